"""Expert-workload comparison between two runs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ComparisonError

VARIABLE_KEYS = ("model.T", "model.lb_lambda")
# keys that never change what the comparison measures
_IGNORED = ("train.log_every",)


@dataclass
class RunSummary:
    config: dict
    records: list  # {"task", "layer", "round", "expert", "proportion"}
    name: str = ""

    @property
    def n_experts(self) -> int:
        return self.config["model"]["n_experts"]

    @property
    def k(self) -> int:
        return self.config["model"]["k"]


def load_run(run_dir: str | Path) -> RunSummary:
    run_dir = Path(run_dir)
    try:
        config = json.loads((run_dir / "config.json").read_text())
        lines = (run_dir / "workload.jsonl").read_text().splitlines()
    except OSError as exc:
        raise ComparisonError(f"{run_dir} is not a run directory: {exc}") from exc
    records = [r for r in map(json.loads, lines) if "proportion" in r]
    return RunSummary(config, records, str(run_dir))


def _flatten(cfg: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a: dict, b: dict) -> dict:
    fa, fb = _flatten(a), _flatten(b)
    return {k: (fa.get(k), fb.get(k)) for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def expert_proportions(records: list, n_experts: int) -> dict:
    """Task -> per-expert proportion, averaged over (layer, round) scopes."""
    acc: dict = {}
    for r in records:
        scope = acc.setdefault(r["task"], {})
        scope.setdefault((r["layer"], r["round"]), np.zeros(n_experts))[r["expert"]] = r["proportion"]
    return {task: np.mean(list(scopes.values()), axis=0) for task, scopes in acc.items()}


def balance_summary(run: RunSummary) -> dict:
    """Per-expert proportions per task plus the min/max/mean lines and the pooled std."""
    props = expert_proportions(run.records, run.n_experts)
    if not props:
        raise ComparisonError(f"run {run.name or '?'} has no workload records")
    pooled = np.concatenate(list(props.values()))
    return {
        "n": run.n_experts,
        "k": run.k,
        "proportions": {t: [float(v) for v in p] for t, p in props.items()},
        "std": float(np.std(pooled)),
        "min": float(pooled.min()),
        "max": float(pooled.max()),
        "mean": float(pooled.mean()),
    }


def compare_balance(run_a: RunSummary, run_b: RunSummary, varied=VARIABLE_KEYS) -> dict:
    """Workload statistics of two runs and the ratio ``std_b / std_a``.

    The runs may differ only in the ``varied`` keys; anything else raises
    :class:`ComparisonError`.
    """
    diff = config_diff(run_a.config, run_b.config)
    bad = {k: v for k, v in diff.items() if k not in varied and k not in _IGNORED}
    if bad:
        raise ComparisonError(f"runs differ beyond {list(varied)}: {bad}")
    a, b = balance_summary(run_a), balance_summary(run_b)
    if a["std"] == 0.0:
        ratio = 1.0 if b["std"] == 0.0 else math.inf
    else:
        ratio = b["std"] / a["std"]
    return {"a": a, "b": b, "ratio": ratio, "varied": {k: list(v) for k, v in diff.items()}}
