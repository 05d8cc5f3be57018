"""LoRA-fused feed-forward experts and attention projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class LoraPair:
    """Rank-``r`` update ``(alpha / r) * B @ A`` for a ``[d_out, d_in]`` weight."""

    A: Tensor
    B: Tensor
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def tensors(self):
        return (("A", self.A), ("B", self.B))

    @classmethod
    def init(cls, d_out: int, d_in: int, rank: int, alpha: float, rng: np.random.Generator, dtype):
        # Kaiming-uniform A, zero B: the fused weight starts exactly at the base
        bound = 1.0 / np.sqrt(d_in)
        A = rng.uniform(-bound, bound, size=(rank, d_in)).astype(dtype)
        B = np.zeros((d_out, rank), dtype=dtype)
        return cls(Tensor(A, requires_grad=True), Tensor(B, requires_grad=True), float(alpha))


def fuse(pair: LoraPair, base: Tensor) -> Tensor:
    """Return ``base + (alpha / r) * B @ A``."""
    d_out, d_in = pair.B.shape[0], pair.A.shape[1]
    if base.shape != (d_out, d_in) or pair.B.shape[1] != pair.A.shape[0]:
        raise DimensionError(
            f"fuse: base {base.shape} incompatible with B {pair.B.shape} @ A {pair.A.shape}"
        )
    return ag.add(base, ag.scale(ag.matmul(pair.B, pair.A), pair.scaling))


@dataclass
class FfnBase:
    """The frozen three-matrix FFN every expert of a layer adapts."""

    gate: Tensor  # [d', d]
    up: Tensor  # [d', d]
    down: Tensor  # [d, d']


@dataclass
class ExpertParams:
    base: FfnBase
    lora_gate: LoraPair
    lora_up: LoraPair
    lora_down: LoraPair

    def pairs(self):
        return (("gate", self.lora_gate), ("up", self.lora_up), ("down", self.lora_down))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for a ``[out, in]`` weight."""
    return ag.matmul(x, ag.transpose(w))


def expert_forward(e: ExpertParams, x: Tensor, act: str = "silu") -> Tensor:
    """``W_down~ (act(W_gate~ x) * (W_up~ x))`` on the last axis of ``x``."""
    if x.shape[-1] != e.base.gate.shape[1]:
        raise DimensionError(f"expert_forward: input {x.shape} vs gate {e.base.gate.shape}")
    w_gate = fuse(e.lora_gate, e.base.gate)
    w_up = fuse(e.lora_up, e.base.up)
    w_down = fuse(e.lora_down, e.base.down)
    c_gate = linear(x, w_gate)
    c_up = linear(x, w_up)
    hidden = ag.hadamard(ag.activation(act, c_gate), c_up)
    return linear(hidden, w_down)


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    lora_q: LoraPair
    lora_k: LoraPair
    lora_v: LoraPair
    lora_o: LoraPair
    n_heads: int

    def pairs(self):
        return (("q", self.lora_q), ("k", self.lora_k), ("v", self.lora_v), ("o", self.lora_o))

    def bases(self):
        return (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo))


@dataclass
class KVCache:
    """Per-layer keys/values for incremental decoding (inference only)."""

    k: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return 0 if not self.k else self.k[0].shape[2]


def rope_tables(max_len: int, head_dim: int, base: float = 10000.0, dtype=np.float64):
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(max_len, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def attention_lora_forward(
    p: AttentionParams,
    x: Tensor,
    rope_cos: np.ndarray,
    rope_sin: np.ndarray,
    cache: dict | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal multi-head attention with LoRA-fused Q/K/V/O projections.

    ``cache`` (a dict with optional ``"k"``/``"v"`` arrays) enables
    incremental decoding: new positions start at the cached length and
    attend to every cached key. It is inference only, nothing is taped.
    """
    b, n_new, d = x.shape
    h = p.n_heads
    if d % h:
        raise ConfigError(f"model dim {d} is not divisible by {h} heads")
    dh = d // h
    offset = 0 if cache is None or "k" not in cache else cache["k"].shape[2]
    cos = rope_cos[offset : offset + n_new]
    sin = rope_sin[offset : offset + n_new]

    def heads(t):
        return ag.transpose(ag.reshape(t, (b, n_new, h, dh)), (0, 2, 1, 3))

    q = ag.rope(heads(linear(x, fuse(p.lora_q, p.wq))), cos, sin)
    k = ag.rope(heads(linear(x, fuse(p.lora_k, p.wk))), cos, sin)
    v = heads(linear(x, fuse(p.lora_v, p.wv)))
    if cache is not None:
        if offset:
            k = Tensor(np.concatenate([cache["k"], k.data], axis=2))
            v = Tensor(np.concatenate([cache["v"], v.data], axis=2))
        cache["k"], cache["v"] = k.data, v.data
    n_tot = k.shape[2]

    scores = ag.scale(ag.bmm(q, ag.transpose(k)), 1.0 / np.sqrt(dh))
    qpos = np.arange(offset, offset + n_new)[:, None]
    kpos = np.arange(n_tot)[None, :]
    mask = np.broadcast_to(kpos > qpos, scores.shape)
    probs = ag.softmax_last(ag.masked_fill(scores, mask, -np.inf))
    if dropout > 0.0:
        keep = rng.random(probs.shape) >= dropout
        probs = ag.mul_const(probs, keep / (1.0 - dropout))
    ctx = ag.bmm(probs, v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, n_new, d))
    return linear(ctx, fuse(p.lora_o, p.wo))
