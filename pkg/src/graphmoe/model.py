"""Decoder-only host transformer whose FFN sublayers are multi-round MoE layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import GraphMoeConfig
from .errors import InputError
from .lora import (
    AttentionParams,
    ExpertParams,
    FfnBase,
    LoraPair,
    attention_lora_forward,
    linear,
    rope_tables,
)
from .rethink import GruParams, MoeLayerParams, graphmoe_layer_forward
from .routing import RouterParams, RoutingLedger
from .timing import section


@dataclass
class LayerParams:
    attn_norm: Tensor
    ffn_norm: Tensor
    attn: AttentionParams
    ffn_base: FfnBase
    moe: MoeLayerParams


@dataclass
class ModelState:
    config: GraphMoeConfig
    embed: Tensor  # [V, d]
    head: Tensor | None  # [d, V]; None when tied to the embedding
    final_norm: Tensor
    layers: list[LayerParams]
    rope_cos: np.ndarray = field(repr=False, default=None)
    rope_sin: np.ndarray = field(repr=False, default=None)

    def named_parameters(self):
        """Every tensor exactly once, in a fixed order."""
        yield "embed", self.embed
        if self.head is not None:
            yield "head", self.head
        yield "final_norm", self.final_norm
        for li, layer in enumerate(self.layers):
            pre = f"layers.{li}"
            yield f"{pre}.attn_norm", layer.attn_norm
            yield f"{pre}.ffn_norm", layer.ffn_norm
            for name, t in layer.attn.bases():
                yield f"{pre}.attn.{name}", t
            for name, pair in layer.attn.pairs():
                for part, t in pair.tensors():
                    yield f"{pre}.attn.lora_{name}.{part}", t
            for name in ("gate", "up", "down"):
                yield f"{pre}.ffn_base.{name}", getattr(layer.ffn_base, name)
            for ei, expert in enumerate(layer.moe.experts):
                for name, pair in expert.pairs():
                    for part, t in pair.tensors():
                        yield f"{pre}.experts.{ei}.{name}.{part}", t
            yield f"{pre}.router", layer.moe.router.weight
            g = layer.moe.gru
            for name in ("w_z", "w_r", "w_o", "b_o", "w_g"):
                yield f"{pre}.gru.{name}", getattr(g, name)

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def parameter_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


def _frozen(a: np.ndarray) -> Tensor:
    return Tensor(a, requires_grad=False)


def init_model(cfg: GraphMoeConfig, seed: int | None = None) -> ModelState:
    """Seeded random frozen base plus adapters (B = 0) and GRU/router weights."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.dtype
    d, dff, V = cfg.d_model, cfg.d_ffn, cfg.vocab_size

    def w(shape, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dt)

    embed = Tensor(rng.normal(0.0, 1.0, size=(V, d)).astype(dt), requires_grad=cfg.train_embeddings)
    head = None
    if not cfg.tie_embeddings:
        head = Tensor(w((d, V), d), requires_grad=cfg.train_embeddings)
    layers = []
    for _ in range(cfg.n_layers):
        attn = AttentionParams(
            wq=_frozen(w((d, d), d)),
            wk=_frozen(w((d, d), d)),
            wv=_frozen(w((d, d), d)),
            wo=_frozen(w((d, d), d)),
            lora_q=LoraPair.init(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dt),
            lora_k=LoraPair.init(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dt),
            lora_v=LoraPair.init(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dt),
            lora_o=LoraPair.init(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dt),
            n_heads=cfg.n_heads,
        )
        base = FfnBase(gate=_frozen(w((dff, d), d)), up=_frozen(w((dff, d), d)), down=_frozen(w((d, dff), dff)))
        experts = [
            ExpertParams(
                base,
                LoraPair.init(dff, d, cfg.lora_rank, cfg.lora_alpha, rng, dt),
                LoraPair.init(dff, d, cfg.lora_rank, cfg.lora_alpha, rng, dt),
                LoraPair.init(d, dff, cfg.lora_rank, cfg.lora_alpha, rng, dt),
            )
            for _ in range(cfg.n_experts)
        ]
        router = RouterParams(Tensor(w((cfg.n_experts, d), d), requires_grad=True))
        gru = GruParams.init(d, cfg.gru_dim, rng, dt)
        layers.append(
            LayerParams(
                attn_norm=_frozen(np.ones(d, dtype=dt)),
                ffn_norm=_frozen(np.ones(d, dtype=dt)),
                attn=attn,
                ffn_base=base,
                moe=MoeLayerParams(experts, router, gru),
            )
        )
    m = ModelState(cfg, embed, head, _frozen(np.ones(d, dtype=dt)), layers)
    attach_rope(m)
    return m


def attach_rope(m: ModelState) -> None:
    cfg = m.config
    m.rope_cos, m.rope_sin = rope_tables(cfg.max_seq_len, cfg.d_model // cfg.n_heads, dtype=cfg.dtype)


def _check_tokens(cfg: GraphMoeConfig, tokens: np.ndarray, offset: int = 0) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be [B, P], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
    if offset + tokens.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {offset + tokens.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    return tokens.astype(np.int64)


def _output_head(m: ModelState, h: Tensor) -> Tensor:
    if m.head is not None:
        return ag.matmul(h, m.head)
    return linear(h, m.embed)


def model_forward(
    m: ModelState,
    tokens,
    ledger: RoutingLedger | None = None,
    T: int | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    cache: list | None = None,
) -> Tensor:
    """Logits ``[B, P, V]`` for integer ``tokens[B, P]``.

    ``cache`` is a list of per-layer dicts for incremental decoding; new
    tokens are placed after the cached positions.
    """
    cfg = m.config
    rounds = cfg.T if T is None else T
    offset = 0
    if cache is not None and cache and "k" in cache[0]:
        offset = cache[0]["k"].shape[2]
    tokens = _check_tokens(cfg, tokens, offset)
    if dropout > 0.0 and rng is None:
        rng = np.random.default_rng(0)
    with section("other"):
        b, p = tokens.shape
        h = ag.reshape(ag.take_rows(m.embed, tokens.reshape(-1)), (b, p, cfg.d_model))
    for li, layer in enumerate(m.layers):
        with section("other"):
            a_in = ag.rms_norm(h, layer.attn_norm, cfg.norm_eps)
        with section("attention"):
            a = attention_lora_forward(
                layer.attn, a_in, m.rope_cos, m.rope_sin,
                cache=None if cache is None else cache[li], dropout=dropout, rng=rng,
            )
        with section("other"):
            h = ag.add(h, a)
            f_in = ag.rms_norm(h, layer.ffn_norm, cfg.norm_eps)
        y = graphmoe_layer_forward(cfg, layer.moe, f_in, rounds, ledger, li)
        with section("other"):
            if dropout > 0.0:
                keep = rng.random(y.shape) >= dropout
                y = ag.mul_const(y, keep / (1.0 - dropout))
            h = ag.add(h, y)
    with section("other"):
        h = ag.rms_norm(h, m.final_norm, cfg.norm_eps)
        return _output_head(m, h)


def new_cache(m: ModelState) -> list[dict]:
    return [dict() for _ in m.layers]


def greedy_generate(m: ModelState, prompt, n_new: int, T: int | None = None) -> np.ndarray:
    """Greedy continuation of ``prompt[B, P0]`` using the KV cache."""
    prompt = np.asarray(prompt, dtype=np.int64)
    cache = new_cache(m)
    logits = model_forward(m, prompt, T=T, cache=cache)
    out = []
    nxt = logits.data[:, -1].argmax(axis=-1)
    for step in range(n_new):
        out.append(nxt)
        if step == n_new - 1:
            break
        logits = model_forward(m, nxt[:, None], T=T, cache=cache)
        nxt = logits.data[:, -1].argmax(axis=-1)
    return np.stack(out, axis=1) if out else np.zeros((prompt.shape[0], 0), dtype=np.int64)


# --------------------------------------------------------------------------
# census
# --------------------------------------------------------------------------


@dataclass
class CensusReport:
    attention_adapters: int
    moe_adapters: int
    gru_linears: int
    routers: int
    lora_pairs: int
    trainable_params: int
    frozen_params: int
    adapter_params: int
    other_trainable_params: int
    groups: dict

    @property
    def total_params(self) -> int:
        return self.trainable_params + self.frozen_params

    @property
    def trainable_ratio(self) -> float:
        return self.trainable_params / self.total_params

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["total_params"] = self.total_params
        d["trainable_ratio"] = self.trainable_ratio
        return d


def parameter_census(m: ModelState) -> CensusReport:
    """Count adapters and parameters grouped like the trainable-component table.

    Adapter pairs and GRU linears are counted from the model structure, not
    from the config, so a miswired model shows up as a mismatch.
    """
    attn_pairs = sum(len(layer.attn.pairs()) for layer in m.layers)
    moe_pairs = sum(len(e.pairs()) for layer in m.layers for e in layer.moe.experts)
    gru_lin = sum(len(layer.moe.gru.linears()) for layer in m.layers)
    routers = len({id(layer.moe.router) for layer in m.layers})

    groups: dict[str, int] = {}
    trainable = frozen = 0
    for name, t in m.named_parameters():
        size = int(t.data.size)
        if t.requires_grad:
            trainable += size
        else:
            frozen += size
        g = _group_of(name)
        groups[g] = groups.get(g, 0) + size

    adapter = groups.get("attention_lora", 0) + groups.get("moe_lora", 0) + groups.get("gru", 0) + groups.get("router", 0)
    return CensusReport(
        attention_adapters=attn_pairs,
        moe_adapters=moe_pairs,
        gru_linears=gru_lin,
        routers=routers,
        lora_pairs=attn_pairs + moe_pairs,
        trainable_params=trainable,
        frozen_params=frozen,
        adapter_params=adapter,
        other_trainable_params=trainable - adapter,
        groups=groups,
    )


def _group_of(name: str) -> str:
    if ".attn.lora_" in name:
        return "attention_lora"
    if ".experts." in name:
        return "moe_lora"
    if ".gru." in name:
        return "gru"
    if name.endswith(".router"):
        return "router"
    if name in ("embed", "head"):
        return "embedding"
    return "frozen_base"
