"""Seeded synthetic sequence tasks.

Token layout: 0 is unused padding, 1 separates prompt from answer, content
symbols are ``2 .. vocab-1``. A sample is ``prompt SEP answer``; the model
sees it shifted by one and is scored on the answer positions only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TaskConfig
from .errors import ConfigError, DegenerateInputError

SEP = 1
FIRST_SYMBOL = 2


@dataclass
class Dataset:
    inputs: np.ndarray  # [S, P]
    targets: np.ndarray  # [S, P]
    mask: np.ndarray  # [S, P] bool, True on answer predictions
    prompt_len: int  # tokens up to and including SEP
    answer_len: int

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def prompts(self) -> np.ndarray:
        return self.inputs[:, : self.prompt_len]

    def answers(self) -> np.ndarray:
        return self.targets[:, self.prompt_len - 1 :]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.mask[idx], self.prompt_len, self.answer_len)


def _answer(kind: str, x: np.ndarray, n_sym: int) -> np.ndarray:
    if kind == "copy":
        return x.copy()
    if kind == "reverse":
        return x[::-1].copy()
    if kind == "modular-add":
        return np.array([x.sum() % n_sym])
    if kind == "majority-vote":
        # symbols 0/1 only; odd length so there is no tie
        return np.array([int(x.sum() * 2 > x.shape[0])])
    raise ConfigError(f"unknown task kind {kind!r}")


def _sample_content(kind: str, rng: np.random.Generator, length: int, n_sym: int) -> np.ndarray:
    if kind == "majority-vote":
        return rng.integers(0, 2, size=length)
    return rng.integers(0, n_sym, size=length)


def generate(task: TaskConfig) -> tuple[Dataset, Dataset]:
    """Disjoint train/eval splits drawn from one seeded stream."""
    n_sym = task.vocab - FIRST_SYMBOL
    if n_sym < 2:
        raise ConfigError("task.vocab must leave at least two content symbols")
    length = task.seq_len
    if task.kind == "majority-vote" and length % 2 == 0:
        length += 1
    space = (2 if task.kind == "majority-vote" else n_sym) ** length
    wanted = task.n_train + task.n_eval
    if wanted > space:
        raise ConfigError(f"task asks for {wanted} distinct samples but only {space} exist")
    rng = np.random.default_rng(task.seed)
    seen: set = set()
    rows = []
    while len(rows) < wanted:
        x = _sample_content(task.kind, rng, length, n_sym)
        key = x.tobytes()
        if key in seen:
            continue
        seen.add(key)
        y = _answer(task.kind, x, n_sym)
        rows.append(np.concatenate([x + FIRST_SYMBOL, [SEP], y + FIRST_SYMBOL]))
    seqs = np.array(rows, dtype=np.int64)
    prompt_len = length + 1
    answer_len = seqs.shape[1] - prompt_len
    inputs, targets = seqs[:, :-1], seqs[:, 1:]
    mask = np.zeros(inputs.shape, dtype=bool)
    mask[:, prompt_len - 1 :] = True
    full = Dataset(inputs, targets, mask, prompt_len, answer_len)
    return full.subset(slice(0, task.n_train)), full.subset(slice(task.n_train, wanted))


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator):
    """Endless shuffled mini-batches (reshuffled every epoch)."""
    if len(ds) == 0:
        raise DegenerateInputError("dataset is empty")
    while True:
        order = rng.permutation(len(ds))
        for start in range(0, len(ds) - batch_size + 1 if len(ds) >= batch_size else 1, batch_size):
            yield ds.subset(order[start : start + batch_size])
