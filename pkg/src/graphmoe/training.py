"""Loss assembly, AdamW and the training / evaluation loops."""

from __future__ import annotations

import math
import time
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import TrainConfig
from .errors import ConfigError, DegenerateInputError, NonFiniteLossError
from .model import ModelState, greedy_generate, model_forward
from .routing import RoutingLedger, ledger_load_balance, workload_from_counts, workload_stats
from .tasks import Dataset, batches


def total_loss(ce: Tensor, lb: Tensor, lam: float) -> Tensor:
    """``ce + lam * lb``."""
    if lam < 0:
        raise ConfigError(f"load-balance weight must be >= 0, got {lam}")
    return ag.add(ce, ag.scale(lb, lam))


class AdamW:
    """Adam with decoupled weight decay over a fixed list of tensors."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - (self.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(sq)


def steps_for(train_cfg: TrainConfig, n_samples: int) -> int:
    if train_cfg.max_steps is not None:
        return train_cfg.max_steps
    per_step = train_cfg.batch_size * train_cfg.accumulation_steps
    return train_cfg.epochs * max(1, math.ceil(n_samples / per_step))


def train_step(model: ModelState, micro_batches: list[Dataset], opt: AdamW, dropout: float, rng) -> dict:
    """One optimizer step over ``micro_batches`` (gradient accumulation)."""
    cfg = model.config
    n_tok = int(sum(mb.mask.sum() for mb in micro_batches))
    if n_tok == 0:
        raise DegenerateInputError("training batch has no scored positions")
    accum = len(micro_batches)
    ce_sum = lb_sum = 0.0
    counts = np.zeros((cfg.n_layers, cfg.n_experts), dtype=np.int64)
    routed = np.zeros(cfg.n_layers, dtype=np.int64)
    for mb in micro_batches:
        ledger = RoutingLedger(cfg.n_experts, cfg.k)
        with ag.Tape() as tape:
            logits = model_forward(model, mb.inputs, ledger, dropout=dropout, rng=rng)
            ce = ag.cross_entropy(logits, mb.targets, mb.mask, denom=n_tok)
            lb = ag.scale(ledger_load_balance(ledger, cfg.lb_reduce), 1.0 / accum)
            loss = total_loss(ce, lb, cfg.lb_lambda)
        if not np.isfinite(loss.data):
            raise NonFiniteLossError(f"non-finite loss (ce={float(ce.data)}, lb={float(lb.data)})")
        tape.backward(loss)
        ce_sum += float(ce.data)
        lb_sum += float(lb.data)
        for li in range(cfg.n_layers):
            c, t = ledger.counts(layer=li)
            counts[li] += c
            routed[li] += t
    gnorm = grad_norm(opt.params)
    opt.step()
    opt.zero_grad()
    stds = [workload_from_counts(counts[li], routed[li], cfg.k).std for li in range(cfg.n_layers)]
    return {
        "ce": ce_sum,
        "lb": lb_sum,
        "total": ce_sum + cfg.lb_lambda * lb_sum,
        "grad_norm": gnorm,
        "workload_std": stds,
    }


def train(model: ModelState, data: Dataset, train_cfg: TrainConfig) -> Iterator[dict]:
    """Yield one metrics record per optimizer step.

    Only tensors with ``requires_grad`` are handed to the optimizer. Raises
    :class:`NonFiniteLossError` if a loss goes NaN/inf.
    """
    if len(data) == 0:
        raise DegenerateInputError("training set is empty")
    rng = np.random.default_rng(train_cfg.seed)
    drop_rng = np.random.default_rng(train_cfg.seed + 1)
    opt = AdamW(
        [t for _, t in model.trainable_parameters()],
        lr=train_cfg.lr,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
    )
    it = batches(data, train_cfg.batch_size, rng)
    n_steps = steps_for(train_cfg, len(data))
    t0 = time.perf_counter()
    for step in range(n_steps):
        micro = [next(it) for _ in range(train_cfg.accumulation_steps)]
        rec = train_step(model, micro, opt, train_cfg.dropout, drop_rng)
        rec = {"step": step, **rec, "wall_time": time.perf_counter() - t0}
        yield rec


def evaluate(model: ModelState, ds: Dataset, batch_size: int = 64, T: int | None = None, generate: bool = True) -> dict:
    """Teacher-forced CE, greedy exact match and routing workload on ``ds``."""
    if len(ds) == 0:
        raise DegenerateInputError("evaluation set is empty")
    cfg = model.config
    ledger = RoutingLedger(cfg.n_experts, cfg.k)
    nll = 0.0
    n_tok = 0
    correct = 0
    for start in range(0, len(ds), batch_size):
        part = ds.subset(slice(start, start + batch_size))
        logits = model_forward(model, part.inputs, ledger, T=T)
        count = int(part.mask.sum())
        nll += float(ag.cross_entropy(logits, part.targets, part.mask).data) * count
        n_tok += count
        if generate:
            out = greedy_generate(model, part.prompts(), ds.answer_len, T=T)
            correct += int(np.all(out == part.answers(), axis=1).sum())
    ws = workload_stats(ledger)
    return {
        "ce": nll / n_tok,
        "exact_match": correct / len(ds) if generate else None,
        "workload": ws,
        "ledger": ledger,
    }
