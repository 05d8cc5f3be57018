"""numba vs numpy kernel timings, per kernel and for a full training step.

    python benchmarks/bench_kernels.py [--rows 272] [--repeats 50]

Only the hot loops are compiled; matmuls go to BLAS under both backends, so
the end-to-end gap is much smaller than the per-kernel one.
"""

from __future__ import annotations

import argparse
import statistics
import time
from pathlib import Path

import numpy as np

from graphmoe import _kernels
from graphmoe.config import load_config
from graphmoe.model import init_model
from graphmoe.tasks import batches, generate
from graphmoe.training import AdamW, train_step

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"


def kernel_cases(rows: int, d: int, n: int, k: int, vocab: int, rng) -> dict:
    x = rng.normal(size=(rows, d)).astype(np.float32)
    probs = rng.random((rows, n)).astype(np.float32)
    selected = np.argsort(-probs, axis=1)[:, :k].astype(np.int64)
    gain = rng.normal(size=d).astype(np.float32)
    inv = np.ones(rows, dtype=np.float32)
    logits = rng.normal(size=(rows, vocab)).astype(np.float32)
    targets = rng.integers(0, vocab, size=rows)
    mask = np.ones(rows, dtype=bool)
    idx = rng.integers(0, rows, size=rows * k)
    src = rng.normal(size=(rows * k, d)).astype(np.float32)
    return {
        "row_sum": lambda: _kernels.row_sum(x),
        "topk_indices": lambda: _kernels.topk_indices(probs, k),
        "dispatch": lambda: _kernels.dispatch(selected, n),
        "scatter_add_rows": lambda: _kernels.scatter_add_rows(np.zeros((rows, d), np.float32), idx, src),
        "rms_norm_fwd": lambda: _kernels.rms_norm_fwd(x, gain, 1e-6),
        "rms_norm_bwd": lambda: _kernels.rms_norm_bwd(x, x, gain, inv),
        "cross_entropy": lambda: _kernels.cross_entropy(logits, targets, mask),
    }


def median_time(fn, repeats: int, warmup: int = 3) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def step_time(backend: str, repeats: int) -> float:
    _kernels.set_backend(backend)
    cfg = load_config(DESK)
    model = init_model(cfg.model)
    train_ds, _ = generate(cfg.task)
    it = batches(train_ds, cfg.train.batch_size, np.random.default_rng(0))
    opt = AdamW([t for _, t in model.trainable_parameters()], lr=cfg.train.lr)
    rng = np.random.default_rng(1)
    return median_time(lambda: train_step(model, [next(it)], opt, cfg.train.dropout, rng), repeats, warmup=2)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=272, help="token rows (desk batch 16 x 17 positions)")
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--step-repeats", type=int, default=5)
    args = ap.parse_args(argv)
    cfg = load_config(DESK).model
    backends = [b for b in ("numpy", "numba") if b in _kernels.IMPLS]
    original = _kernels.BACKEND

    timings: dict = {}
    for b in backends:
        _kernels.set_backend(b)
        cases = kernel_cases(args.rows, cfg.d_model, cfg.n_experts, cfg.k, cfg.vocab_size, np.random.default_rng(0))
        for name, fn in cases.items():
            timings.setdefault(name, {})[b] = median_time(fn, args.repeats)

    print(f"{'kernel':18s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, row in timings.items():
        cells = "".join(f"{row[b] * 1e6:10.1f}us" for b in backends)
        speed = f"{row['numpy'] / row['numba']:10.2f}x" if "numba" in row else ""
        print(f"{name:18s}{cells}  {speed}")

    steps = {b: step_time(b, args.step_repeats) for b in backends}
    cells = "".join(f"{steps[b] * 1e3:10.1f}ms" for b in backends)
    speed = f"{steps['numpy'] / steps['numba']:10.2f}x" if "numba" in steps else ""
    print(f"{'train step':18s}{cells}  {speed}")
    _kernels.set_backend(original)


if __name__ == "__main__":
    main()
