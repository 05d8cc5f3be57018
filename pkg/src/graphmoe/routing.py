"""Token-wise top-k routing, sparse expert combination and balance statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import _kernels
from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DegenerateInputError


@dataclass
class RouterParams:
    weight: Tensor  # [n, d]

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]


@dataclass
class RoutingDecision:
    """Routing of ``N`` flattened tokens.

    ``selected[t]`` lists token ``t``'s experts by descending probability.
    ``tokens_for(i)`` gives the ascending token ids routed to expert ``i``.
    """

    dense_probs: Tensor  # [N, n]
    sparse_weights: Tensor  # [N, n], k nonzeros per row
    selected: np.ndarray  # [N, k]
    lead_shape: tuple
    _tokens: np.ndarray = field(repr=False, default=None)
    _offsets: np.ndarray = field(repr=False, default=None)

    @property
    def n_experts(self) -> int:
        return self.dense_probs.shape[-1]

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]

    def tokens_for(self, i: int) -> np.ndarray:
        return self._tokens[self._offsets[i] : self._offsets[i + 1]]

    def active_experts(self) -> list[int]:
        return [i for i in range(self.n_experts) if self._offsets[i + 1] > self._offsets[i]]


def route(router: RouterParams, x: Tensor, k: int, renormalize: bool = True) -> RoutingDecision:
    """Softmax over router logits, keep the top ``k`` per token.

    Ties go to the lower expert index. Unselected entries are multiplied by
    a constant zero, so gradient reaches the router only through survivors.
    """
    n = router.n_experts
    if not 1 <= k <= n:
        raise ConfigError(f"top-k must satisfy 1 <= k <= n, got k={k}, n={n}")
    lead = x.shape[:-1]
    flat = ag.reshape(x, (-1, x.shape[-1]))
    probs = ag.softmax_last(ag.matmul(flat, ag.transpose(router.weight)))
    selected = _kernels.topk_indices(np.ascontiguousarray(probs.data), k)
    keep = np.zeros(probs.shape, dtype=probs.dtype)
    np.put_along_axis(keep, selected, 1.0, axis=1)
    weights = ag.mul_const(probs, keep)
    # with k == n the kept mass is already 1; skipping keeps s == s_hat exactly
    if renormalize and k < n:
        denom = ag.expand(ag.sum(weights, axis=-1, keepdims=True), weights.shape)
        weights = ag.div(weights, denom)
    tokens, offsets = _kernels.dispatch(selected, n)
    return RoutingDecision(probs, weights, selected, lead, tokens, offsets)


def moe_combine(decision: RoutingDecision, expert_outputs: Mapping[int, Tensor]) -> Tensor:
    """``y = sum_i s[i] * E_i(x)`` accumulated in ascending expert order.

    ``expert_outputs[i]`` holds expert ``i``'s output on the rows
    ``decision.tokens_for(i)`` only. Returns a flat ``[N, D]`` tensor.
    """
    active = decision.active_experts()
    missing = [i for i in active if i not in expert_outputs]
    if missing:
        raise ContractError(f"moe_combine: no output for selected experts {missing}")
    n_tok = decision.n_tokens
    d = expert_outputs[active[0]].shape[-1]
    y = Tensor(np.zeros((n_tok, d), dtype=decision.dense_probs.dtype))
    for i in active:
        idx = decision.tokens_for(i)
        c = expert_outputs[i]
        w = ag.slice_last(ag.take_rows(decision.sparse_weights, idx), i, i + 1)
        y = ag.add(y, ag.scatter_rows(ag.hadamard(ag.expand(w, c.shape), c), idx, n_tok))
    return y


def sparse_moe_forward(
    decision: RoutingDecision, experts: list, x: Tensor, expert_fn: Callable
) -> Tensor:
    """Evaluate only the selected experts on their tokens and combine them.

    ``x`` may be ``[..., D]``; the result has the same shape.
    """
    flat = ag.reshape(x, (-1, x.shape[-1]))
    outputs = {}
    for i in decision.active_experts():
        outputs[i] = expert_fn(experts[i], ag.take_rows(flat, decision.tokens_for(i)))
    y = moe_combine(decision, outputs)
    return ag.reshape(y, x.shape)


# --------------------------------------------------------------------------
# ledger and balance loss
# --------------------------------------------------------------------------


@dataclass
class LedgerEntry:
    """Routing record of one (layer, round) over one batch of tokens."""

    layer: int
    round: int
    k: int
    counts: np.ndarray  # [n] selections per expert
    weight_sums: np.ndarray  # [n] summed sparse weights
    tokens: int
    weights: Tensor | None = None  # live sparse weights, for the loss
    selected: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return self.counts.shape[0]

    @classmethod
    def from_decision(cls, layer: int, rnd: int, d: RoutingDecision) -> "LedgerEntry":
        counts = np.bincount(d.selected.reshape(-1), minlength=d.n_experts)
        sums = d.sparse_weights.data.astype(np.float64).sum(axis=0)
        return cls(layer, rnd, d.k, counts, sums, d.n_tokens, d.sparse_weights, d.selected)

    @classmethod
    def from_weights(cls, weights, layer: int = 0, rnd: int = 1) -> "LedgerEntry":
        """Build an entry from a ``[tokens, n]`` sparse routing table."""
        w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64))
        nz = w.data > 0
        ks = nz.sum(axis=1)
        k = int(ks[0]) if ks.size else 0
        return cls(layer, rnd, k, nz.sum(axis=0), w.data.sum(axis=0), w.shape[0], w)


class RoutingLedger:
    """Append-only collection of routing records for one forward pass."""

    def __init__(self, n_experts: int, k: int):
        self.n_experts = n_experts
        self.k = k
        self.entries: list[LedgerEntry] = []

    def record(self, layer: int, rnd: int, decision: RoutingDecision) -> LedgerEntry:
        e = LedgerEntry.from_decision(layer, rnd, decision)
        self.entries.append(e)
        return e

    def merge(self, other: "RoutingLedger") -> None:
        self.entries.extend(other.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def records_for_layer(self, layer: int) -> int:
        """Number of per-token routing records written for ``layer``."""
        return int(np.sum([e.tokens for e in self.entries if e.layer == layer]))

    def counts(self, layer: int | None = None, rnd: int | None = None) -> tuple[np.ndarray, int]:
        sel = [
            e
            for e in self.entries
            if (layer is None or e.layer == layer) and (rnd is None or e.round == rnd)
        ]
        if not sel:
            return np.zeros(self.n_experts, dtype=np.int64), 0
        return np.sum([e.counts for e in sel], axis=0), int(np.sum([e.tokens for e in sel]))

    def scopes(self) -> list[tuple[int, int]]:
        return sorted({(e.layer, e.round) for e in self.entries})

    def routing_signature(self) -> bytes:
        """Bytes identifying every selection; used to spot routing flips."""
        return b"".join(e.selected.tobytes() for e in self.entries if e.selected is not None)


def load_balance_loss(entry: LedgerEntry) -> Tensor:
    """``n * sum_i f_i * p_i`` for one scope.

    ``f_i`` is the fraction of tokens that selected expert ``i`` (a constant
    for differentiation); ``p_i`` the mean sparse weight of expert ``i``.
    """
    if entry.tokens < 1 or entry.weights is None:
        raise DegenerateInputError("load_balance_loss: empty routing scope")
    m = entry.tokens
    f = np.asarray(entry.counts, dtype=entry.weights.dtype) / m
    p = ag.scale(ag.sum(entry.weights, axis=0), 1.0 / m)
    return ag.scale(ag.sum(ag.mul_const(p, f)), float(entry.n_experts))


def ledger_load_balance(ledger: RoutingLedger, reduce: str = "mean") -> Tensor:
    """Per-(layer, round) balance losses combined into one scalar."""
    entries = [e for e in ledger.entries if e.weights is not None]
    if not entries:
        raise DegenerateInputError("ledger holds no routing records")
    total = load_balance_loss(entries[0])
    for e in entries[1:]:
        total = ag.add(total, load_balance_loss(e))
    if reduce == "mean":
        return ag.scale(total, 1.0 / len(entries))
    if reduce == "sum":
        return total
    raise ConfigError(f"unknown load-balance reduction {reduce!r}")


@dataclass
class WorkloadStats:
    proportions: np.ndarray
    std: float
    counts: np.ndarray
    tokens: int
    k: int

    def as_dict(self) -> dict:
        return {
            "proportions": [float(v) for v in self.proportions],
            "std": float(self.std),
            "tokens": int(self.tokens),
            "k": int(self.k),
        }


def workload_from_counts(counts: np.ndarray, tokens: int, k: int) -> WorkloadStats:
    if tokens < 1:
        raise DegenerateInputError("workload statistics need at least one routed token")
    counts = np.asarray(counts, dtype=np.float64)
    props = counts / (k * tokens)
    return WorkloadStats(props, float(np.std(props)), counts, int(tokens), int(k))


def workload_stats(ledger: RoutingLedger, layer: int | None = None, rnd: int | None = None) -> WorkloadStats:
    """Normalised selection proportions and their population std."""
    counts, tokens = ledger.counts(layer, rnd)
    return workload_from_counts(counts, tokens, ledger.k)


def workload_records(ledger: RoutingLedger, task: str) -> list[dict]:
    """One record per (layer, round, expert) for export."""
    out = []
    for layer, rnd in ledger.scopes():
        st = workload_stats(ledger, layer, rnd)
        for i, prop in enumerate(st.proportions):
            out.append(
                {"task": task, "layer": layer, "round": rnd, "expert": i, "proportion": float(prop)}
            )
    return out
