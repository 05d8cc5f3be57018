"""Hot loops used by the autograd engine and the router.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version performing the same operations in the same order. Within one
backend every kernel is bit-deterministic. Across backends results agree
bitwise for the purely arithmetic kernels (row sums, top-k, dispatch,
scatter, rms norm) and to the last ulp or so for cross entropy, because
numba's libm ``exp``/``log`` differ from numpy's SIMD routines.

The backend is picked at import time. Set ``GRAPHMOE_DISABLE_NUMBA=1`` to
force the numpy path; it is also used automatically when numba is missing.
``set_backend`` switches at runtime (tests and the benchmark use it).
Callers must go through the module (``_kernels.topk_indices(...)``) rather
than importing the names, otherwise they keep the old binding.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _row_sum_np(x):
    acc = x[:, 0].copy()
    for j in range(1, x.shape[1]):
        acc += x[:, j]
    return acc


def _topk_indices_np(probs, k):
    # stable sort on the negated values: ties keep the lower index first
    return np.argsort(-probs, axis=1, kind="stable")[:, :k].astype(np.int64)


def _dispatch_np(selected, n_experts):
    flat = selected.reshape(-1)
    order = np.argsort(flat, kind="stable")
    tokens = (order // selected.shape[1]).astype(np.int64)
    counts = np.bincount(flat, minlength=n_experts)
    offsets = np.zeros(n_experts + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return tokens, offsets


def _scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)
    return out


def _rms_norm_fwd_np(x, gain, eps):
    d = x.shape[1]
    ms = _row_sum_np(x * x) / d
    inv = 1.0 / np.sqrt(ms + eps)
    y = (x * inv[:, None]) * gain[None, :]
    return y, inv


def _rms_norm_bwd_np(gy, x, gain, inv):
    d = x.shape[1]
    gn = gy * gain[None, :]
    dot = _row_sum_np(gn * x)
    coef = (inv * inv * inv) * dot / d
    gx = gn * inv[:, None] - x * coef[:, None]
    ggain = np.zeros(d, dtype=x.dtype)
    for i in range(x.shape[0]):  # sequential over rows, like the numba loop
        ggain += (gy[i] * x[i]) * inv[i]
    return gx, ggain


def _cross_entropy_np(logits, targets, mask):
    m = logits.max(axis=1)
    shifted = logits - m[:, None]
    e = np.exp(shifted)
    s = _row_sum_np(e)
    lse = np.log(s)
    rows = np.arange(logits.shape[0])
    nll = lse - shifted[rows, targets]
    total = 0.0
    for i in range(nll.shape[0]):
        if mask[i]:
            total += float(nll[i])
    probs = e / s[:, None]
    return total, probs


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def _row_sum_nb(x):
        n, m = x.shape
        out = np.empty(n, dtype=x.dtype)
        for i in range(n):
            acc = x[i, 0]
            for j in range(1, m):
                acc += x[i, j]
            out[i] = acc
        return out

    @njit
    def _topk_indices_nb(probs, k):
        n, m = probs.shape
        out = np.empty((n, k), dtype=np.int64)
        taken = np.zeros(m, dtype=np.bool_)
        for i in range(n):
            taken[:] = False
            for slot in range(k):
                best = -1
                for j in range(m):
                    if taken[j]:
                        continue
                    if best < 0 or probs[i, j] > probs[i, best]:
                        best = j
                taken[best] = True
                out[i, slot] = best
        return out

    @njit
    def _dispatch_nb(selected, n_experts):
        n, k = selected.shape
        counts = np.zeros(n_experts, dtype=np.int64)
        for i in range(n):
            for j in range(k):
                counts[selected[i, j]] += 1
        offsets = np.zeros(n_experts + 1, dtype=np.int64)
        for e in range(n_experts):
            offsets[e + 1] = offsets[e] + counts[e]
        fill = offsets[:-1].copy()
        tokens = np.empty(n * k, dtype=np.int64)
        for i in range(n):
            for j in range(k):
                e = selected[i, j]
                tokens[fill[e]] = i
                fill[e] += 1
        return tokens, offsets

    @njit
    def _scatter_add_rows_nb(out, idx, src):
        for i in range(idx.shape[0]):
            r = idx[i]
            for j in range(src.shape[1]):
                out[r, j] += src[i, j]
        return out

    # d, eps and 1 arrive as x.dtype scalars: numba would otherwise widen
    # float32 arithmetic to float64 when mixing in int or literal operands

    @njit
    def _rms_norm_fwd_core(x, gain, c):
        n, d = x.shape
        dd, eps, one = c[0], c[1], c[2]
        y = np.empty_like(x)
        inv = np.empty(n, dtype=x.dtype)
        for i in range(n):
            acc = x[i, 0] * x[i, 0]
            for j in range(1, d):
                acc += x[i, j] * x[i, j]
            r = one / np.sqrt(acc / dd + eps)
            inv[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] * r) * gain[j]
        return y, inv

    @njit
    def _rms_norm_bwd_core(gy, x, gain, inv, c):
        n, d = x.shape
        dd = c[0]
        gx = np.empty_like(x)
        ggain = np.zeros(d, dtype=x.dtype)
        for i in range(n):
            r = inv[i]
            dot = (gy[i, 0] * gain[0]) * x[i, 0]
            for j in range(1, d):
                dot += (gy[i, j] * gain[j]) * x[i, j]
            coef = (r * r * r) * dot / dd
            for j in range(d):
                gx[i, j] = (gy[i, j] * gain[j]) * r - x[i, j] * coef
        for i in range(n):
            r = inv[i]
            for j in range(d):
                ggain[j] += (gy[i, j] * x[i, j]) * r
        return gx, ggain

    def _rms_norm_fwd_nb(x, gain, eps):
        return _rms_norm_fwd_core(x, gain, np.array([x.shape[1], eps, 1.0], dtype=x.dtype))

    def _rms_norm_bwd_nb(gy, x, gain, inv):
        return _rms_norm_bwd_core(gy, x, gain, inv, np.array([x.shape[1]], dtype=x.dtype))

    @njit
    def _cross_entropy_nb(logits, targets, mask):
        n, v = logits.shape
        probs = np.empty_like(logits)
        total = 0.0
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = np.exp(logits[i, 0] - m)
            probs[i, 0] = s
            for j in range(1, v):
                e = np.exp(logits[i, j] - m)
                probs[i, j] = e
                s += e
            for j in range(v):
                probs[i, j] = probs[i, j] / s
            if mask[i]:
                total += np.log(s) - (logits[i, targets[i]] - m)
        return total, probs


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

_NAMES = (
    "row_sum",
    "topk_indices",
    "dispatch",
    "scatter_add_rows",
    "rms_norm_fwd",
    "rms_norm_bwd",
    "cross_entropy",
)

IMPLS = {"numpy": {name: globals()[f"_{name}_np"] for name in _NAMES}}
if HAVE_NUMBA:
    IMPLS["numba"] = {name: globals()[f"_{name}_nb"] for name in _NAMES}

BACKEND = "numpy"


def set_backend(name: str) -> None:
    """Rebind the public kernel names to ``name``'s implementations."""
    global BACKEND
    if name not in IMPLS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}")
    g = globals()
    for fn_name, fn in IMPLS[name].items():
        g[fn_name] = fn
    BACKEND = name


def _default_backend() -> str:
    flag = os.environ.get("GRAPHMOE_DISABLE_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes", "on") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


set_backend(_default_backend())
