"""Central finite-difference check of every trainable parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DegenerateInputError
from .model import ModelState, model_forward
from .routing import RoutingLedger, ledger_load_balance
from .training import total_loss

GRADCHECK_TOL = 1e-4
STEP = 1e-5
# |a - n| / max(|a|, |n|, FLOOR): below FLOOR both sides count as zero
FLOOR = 1e-7


def param_group(name: str) -> str:
    if ".attn.lora_" in name or ".experts." in name:
        return "lora_A" if name.endswith(".A") else "lora_B"
    if name.endswith(".router"):
        return "router"
    if ".gru." in name:
        return name.rsplit(".", 1)[1]
    return name if name in ("embed", "head") else "frozen"


def perturb_adapters(model: ModelState, scale: float = 0.3, seed: int = 0) -> None:
    """Move every LoRA B matrix off zero so A and the GRU gates see non-trivial gradients."""
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters():
        if t.requires_grad and param_group(name) == "lora_B":
            t.data[...] = rng.normal(0.0, scale, size=t.shape).astype(t.dtype)


def probe_loss(model: ModelState, tokens, targets, mask, T=None):
    """Total loss (CE + lambda * balance) and the routing ledger of one forward."""
    cfg = model.config
    ledger = RoutingLedger(cfg.n_experts, cfg.k)
    logits = model_forward(model, tokens, ledger, T=T)
    ce = ag.cross_entropy(logits, targets, mask)
    lb = ledger_load_balance(ledger, cfg.lb_reduce)
    return total_loss(ce, lb, cfg.lb_lambda), ledger


@dataclass
class GroupResult:
    group: str
    max_rel_err: float | None  # None for groups without gradient
    coords: list = field(default_factory=list)  # (name, flat index, analytic, numeric, rel)
    resampled: int = 0

    @property
    def has_gradient(self) -> bool:
        return self.max_rel_err is not None


@dataclass
class GradcheckReport:
    groups: dict
    tol: float

    @property
    def worst(self) -> float:
        errs = [g.max_rel_err for g in self.groups.values() if g.has_gradient]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def failures(self) -> list:
        out = []
        for g in self.groups.values():
            if g.has_gradient:
                out.extend((g.group,) + c for c in g.coords if c[-1] >= self.tol)
        return out

    def as_dict(self) -> dict:
        return {
            "tol": self.tol,
            "worst": self.worst,
            "passed": self.passed,
            "groups": {
                k: ("no gradient" if not g.has_gradient else {"max_rel_err": g.max_rel_err, "n_coords": len(g.coords), "resampled": g.resampled})
                for k, g in self.groups.items()
            },
        }


def gradcheck_all(
    model: ModelState,
    tokens,
    targets,
    mask=None,
    n_coords: int = 20,
    step: float = STEP,
    tol: float = GRADCHECK_TOL,
    seed: int = 0,
    T: int | None = None,
    max_resample: int = 200,
) -> GradcheckReport:
    """Compare taped gradients with central differences on sampled coordinates.

    Needs a float64 model. Coordinates whose +/- perturbation changes any
    top-k selection are discarded and redrawn, since the loss is not
    differentiable across a routing flip.
    """
    cfg = model.config
    if cfg.precision != "float64":
        raise ConfigError("gradcheck needs model.precision = float64")
    rounds = cfg.T if T is None else T
    if rounds < 2:
        raise ConfigError("gradcheck needs T >= 2 so the GRU is exercised")
    rng = np.random.default_rng(seed)
    mask = np.ones(np.shape(targets), dtype=bool) if mask is None else mask

    model.zero_grad()
    with ag.Tape() as tape:
        loss, base_ledger = probe_loss(model, tokens, targets, mask, rounds)
    tape.backward(loss)
    base_sig = base_ledger.routing_signature()

    by_group: dict[str, list] = {}
    for name, t in model.named_parameters():
        by_group.setdefault(param_group(name), []).append((name, t))

    results = {}
    for group, members in by_group.items():
        if not any(t.requires_grad for _, t in members):
            results[group] = GroupResult(group, None)
            continue
        members = [(n, t) for n, t in members if t.requires_grad]
        sizes = np.array([t.data.size for _, t in members])
        cum = np.cumsum(sizes)
        total = int(cum[-1])
        want = min(n_coords, total)
        chosen: set = set()
        res = GroupResult(group, 0.0)
        attempts = 0
        while len(res.coords) < want:
            if attempts > max_resample + want:
                raise DegenerateInputError(f"gradcheck: too many routing flips in group {group}")
            attempts += 1
            flat = int(rng.integers(total))
            if flat in chosen:
                if len(chosen) >= total:
                    break
                continue
            chosen.add(flat)
            ti = int(np.searchsorted(cum, flat, side="right"))
            local = flat - (int(cum[ti - 1]) if ti else 0)
            name, t = members[ti]
            view = t.data.reshape(-1)
            orig = view[local]
            view[local] = orig + step
            lp, lp_led = probe_loss(model, tokens, targets, mask, rounds)
            view[local] = orig - step
            lm, lm_led = probe_loss(model, tokens, targets, mask, rounds)
            view[local] = orig
            if lp_led.routing_signature() != base_sig or lm_led.routing_signature() != base_sig:
                res.resampled += 1
                continue
            numeric = (float(lp.data) - float(lm.data)) / (2 * step)
            analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[local])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)
            res.coords.append((name, local, analytic, numeric, rel))
            res.max_rel_err = max(res.max_rel_err, rel)
        results[group] = res
    return GradcheckReport(results, tol)
