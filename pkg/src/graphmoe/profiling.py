"""Per-round and per-module latency of autoregressive decoding."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import MeasurementError
from .model import ModelState, greedy_generate
from .timing import SectionTimer

MODULES = ("attention", "moe_ffn", "gru", "other")
MIN_TICKS = 10


@dataclass
class LatencyProfile:
    T_values: list
    totals: list  # median wall seconds per T
    shares: dict  # T -> {module: share}, shares sum to 1
    module_seconds: dict  # T -> {module: median seconds}
    slope: float
    intercept: float
    r2: float
    per_round_increase: float  # slope relative to the T=1 total
    raw: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "T_values": list(self.T_values),
            "totals": list(self.totals),
            "shares": {str(k): v for k, v in self.shares.items()},
            "module_seconds": {str(k): v for k, v in self.module_seconds.items()},
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "per_round_increase": self.per_round_increase,
        }


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def _one_run(model: ModelState, prompt: np.ndarray, gen_len: int, T: int) -> tuple[float, dict]:
    with SectionTimer() as timer:
        t0 = time.perf_counter()
        greedy_generate(model, prompt, gen_len, T=T)
        total = time.perf_counter() - t0
    return total, dict(timer.totals)


def profile_rounds(
    model: ModelState,
    T_max: int = 5,
    gen_len: int = 16,
    prompt_len: int = 16,
    batch_size: int = 1,
    warmup: int = 2,
    repeats: int = 5,
    seed: int = 0,
) -> LatencyProfile:
    """Time greedy KV-cached decoding for ``T = 1 .. T_max``.

    Every T gets ``warmup`` discarded runs and ``repeats`` timed runs; the
    medians are reported. Modules: attention, moe_ffn (routing + experts),
    gru, and other (embedding, norms, head, python glue).
    """
    cfg = model.config
    if prompt_len + gen_len > cfg.max_seq_len:
        raise MeasurementError("prompt_len + gen_len exceeds the model's max_seq_len")
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, cfg.vocab_size, size=(batch_size, prompt_len))
    tick = time.get_clock_info("perf_counter").resolution

    Ts = list(range(1, T_max + 1))
    totals, shares, seconds, raw = [], {}, {}, {}
    for T in Ts:
        for _ in range(warmup):
            _one_run(model, prompt, gen_len, T)
        runs = [_one_run(model, prompt, gen_len, T) for _ in range(repeats)]
        tot = statistics.median(r[0] for r in runs)
        if tot < MIN_TICKS * tick:
            raise MeasurementError(f"run time {tot:.3g}s is under {MIN_TICKS} clock ticks ({tick:.3g}s)")
        med = {m: statistics.median(r[1].get(m, 0.0) for r in runs) for m in ("attention", "moe_ffn", "gru")}
        med["other"] = max(tot - sum(med.values()), 0.0)
        norm = sum(med.values())
        totals.append(tot)
        seconds[T] = med
        shares[T] = {m: med[m] / norm for m in MODULES}
        raw[T] = [r[0] for r in runs]
    slope, intercept, r2 = linear_fit(Ts, totals)
    return LatencyProfile(Ts, totals, shares, seconds, slope, intercept, r2, slope / totals[0], raw)
