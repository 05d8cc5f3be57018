"""Central finite differences for the gradient tests."""

import numpy as np

from graphmoe import autograd as ag

STEP = 1e-5


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps the (mutated) array to a float."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_op(op, *arrays, seed: int = 0, tol: float = 1e-4):
    """Compare taped gradients of ``sum(w * op(*inputs))`` against finite differences.

    A fixed random weighting ``w`` makes every output element matter.
    Returns the worst relative error over all inputs.
    """
    tensors = [ag.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = op(*tensors)
    w = np.random.default_rng(seed).normal(size=out.shape)

    def value():
        return float(np.sum(w * op(*tensors).data))

    with ag.Tape() as tape:
        loss = ag.sum(ag.mul_const(op(*tensors), w))
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(value, t.data)
        ana = np.zeros_like(t.data) if t.grad is None else t.grad
        worst = max(worst, rel_err(ana, num))
    return worst
