"""The virtual node (low-rank GRU + output projection) and the multi-round layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .lora import ExpertParams, expert_forward, linear
from .routing import RouterParams, RoutingLedger, route, sparse_moe_forward
from .timing import section


@dataclass
class GruParams:
    w_z: Tensor  # [dh, dh + d]
    w_r: Tensor  # [dh, dh + d]
    w_o: Tensor  # [dh, dh + d]
    b_o: Tensor  # [dh]
    w_g: Tensor  # [d, dh]

    @property
    def hidden(self) -> int:
        return self.w_z.shape[0]

    @property
    def model_dim(self) -> int:
        return self.w_g.shape[0]

    def linears(self):
        return (("w_z", self.w_z), ("w_r", self.w_r), ("w_o", self.w_o), ("w_g", self.w_g))

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator, dtype, zero: bool = False):
        def u(shape, fan_in):
            if zero:
                return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
            b = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, size=shape).astype(dtype), requires_grad=True)

        return cls(
            w_z=u((hidden, hidden + d), hidden + d),
            w_r=u((hidden, hidden + d), hidden + d),
            w_o=u((hidden, hidden + d), hidden + d),
            b_o=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            w_g=u((d, hidden), hidden),
        )


def gru_hidden_size(d: int, scale: float) -> int:
    # int() truncation, as for the host model's hidden size
    return int(scale * d)


def gru_step(g: GruParams, h_prev: Tensor, y: Tensor, candidate: str = "tanh"):
    """One GRU update on ``[h_prev, y]``; returns ``(h_new, W_g @ h_new)``."""
    if h_prev.shape[-1] != g.hidden or y.shape[-1] != g.model_dim or h_prev.shape[:-1] != y.shape[:-1]:
        raise DimensionError(
            f"gru_step: hidden {h_prev.shape} / input {y.shape} do not match "
            f"GRU (hidden={g.hidden}, d={g.model_dim})"
        )
    hy = ag.concat_last(h_prev, y)
    z = ag.sigmoid(linear(hy, g.w_z))
    r = ag.sigmoid(linear(hy, g.w_r))
    cand_in = ag.concat_last(ag.hadamard(r, h_prev), y)
    pre = ag.add(linear(cand_in, g.w_o), ag.expand(g.b_o, z.shape))
    h_hat = ag.activation(candidate, pre)
    h_new = ag.add(ag.hadamard(ag.sub(1.0, z), h_prev), ag.hadamard(z, h_hat))
    return h_new, linear(h_new, g.w_g)


@dataclass
class MoeLayerParams:
    experts: list[ExpertParams]
    router: RouterParams
    gru: GruParams


def graphmoe_layer_forward(
    cfg,
    layer: MoeLayerParams,
    x: Tensor,
    T: int,
    ledger: RoutingLedger | None = None,
    layer_idx: int = 0,
) -> Tensor:
    """Run ``T`` rounds of route -> sparse combine -> GRU -> residual.

    The GRU runs after every round except the last, and its projected state
    is added to the round input. Returns the last round's MoE output, not
    ``x + y``. ``cfg`` supplies ``k``, ``renormalize_topk``,
    ``candidate_activation`` and ``ffn_activation``.
    """
    if T < 1:
        raise ConfigError(f"reasoning rounds T must be >= 1, got {T}")
    act = getattr(cfg, "ffn_activation", "silu")
    cand = getattr(cfg, "candidate_activation", "tanh")
    h = Tensor(np.zeros(x.shape[:-1] + (layer.gru.hidden,), dtype=x.dtype))
    y = None
    for t in range(1, T + 1):
        with section("moe_ffn"):
            decision = route(layer.router, x, cfg.k, getattr(cfg, "renormalize_topk", True))
            y = sparse_moe_forward(decision, layer.experts, x, lambda e, xi: expert_forward(e, xi, act))
        if ledger is not None:
            ledger.record(layer_idx, t, decision)
        if t != T:
            with section("gru"):
                h, g = gru_step(layer.gru, h, y, cand)
                x = ag.add(x, g)
    return y
