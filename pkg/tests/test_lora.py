import numpy as np
import pytest

from graphmoe import autograd as ag
from graphmoe.autograd import Tape, Tensor
from graphmoe.errors import ConfigError, DimensionError
from graphmoe.lora import (
    AttentionParams,
    ExpertParams,
    FfnBase,
    LoraPair,
    attention_lora_forward,
    expert_forward,
    fuse,
    rope_tables,
)

import reference as ref
from fd import numeric_grad, rel_err


def pair(A, B, alpha):
    return LoraPair(Tensor(np.array(A, float), requires_grad=True), Tensor(np.array(B, float), requires_grad=True), alpha)


def make_expert(rng, d=4, dff=6, r=2, alpha=4.0, zero_b=False):
    base = FfnBase(*(Tensor(rng.normal(size=s)) for s in ((dff, d), (dff, d), (d, dff))))

    def lp(dout, din):
        A = rng.normal(size=(r, din))
        B = np.zeros((dout, r)) if zero_b else rng.normal(size=(dout, r))
        return pair(A, B, alpha)

    return ExpertParams(base, lp(dff, d), lp(dff, d), lp(d, dff))


def test_fuse_zero_b_is_base_exactly():
    rng = np.random.default_rng(0)
    base = Tensor(rng.normal(size=(3, 5)).astype(np.float32))
    p = LoraPair.init(3, 5, 2, 4.0, rng, np.float32)
    assert np.array_equal(fuse(p, base).data, base.data)


def test_fuse_hand_example():
    p = pair([[1.0, 0.0]], [[2.0], [0.0]], alpha=1.0)
    assert np.array_equal(fuse(p, Tensor(np.zeros((2, 2)))).data, [[2, 0], [0, 0]])


def test_fuse_linear_in_b():
    rng = np.random.default_rng(1)
    base = Tensor(rng.normal(size=(4, 3)))
    A, B = rng.normal(size=(2, 3)), rng.normal(size=(4, 2))
    d1 = fuse(pair(A, B, 8.0), base).data - base.data
    d2 = fuse(pair(A, 2 * B, 8.0), base).data - base.data
    assert np.allclose(d2, 2 * d1, atol=1e-13)


def test_fuse_scaling_is_alpha_over_r():
    p = LoraPair.init(8, 8, 16, 32.0, np.random.default_rng(0), np.float64)
    assert p.scaling == 2.0 and p.rank == 16


def test_fuse_shape_error():
    with pytest.raises(DimensionError):
        fuse(pair(np.ones((2, 3)), np.ones((4, 2)), 1.0), Tensor(np.zeros((3, 3))))


def test_lora_init_a_kaiming_b_zero():
    p = LoraPair.init(10, 50, 4, 8.0, np.random.default_rng(0), np.float64)
    assert np.all(p.B.data == 0)
    assert np.all(np.abs(p.A.data) <= 1 / np.sqrt(50)) and np.any(p.A.data != 0)


def test_expert_zero_init_equals_frozen_ffn():
    rng = np.random.default_rng(2)
    e = make_expert(rng, zero_b=True)
    x = rng.normal(size=(5, 4))
    out = expert_forward(e, Tensor(x)).data
    assert np.array_equal(out, ref.base_ffn(x, e.base.gate.data, e.base.up.data, e.base.down.data))


def test_expert_zero_input_gives_zero():
    e = make_expert(np.random.default_rng(3))
    assert np.all(expert_forward(e, Tensor(np.zeros((2, 4)))).data == 0)


def test_expert_one_dim_toy():
    one = Tensor(np.ones((1, 1)))
    z = pair(np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
    e = ExpertParams(FfnBase(one, one, one), z, z, z)
    out = expert_forward(e, Tensor(np.ones((1, 1)))).data
    assert out[0, 0] == pytest.approx(0.7310585786300049, abs=1e-15)


def test_expert_matches_reference_with_random_b():
    rng = np.random.default_rng(4)
    e = make_expert(rng)
    x = rng.normal(size=(3, 4))
    w = {
        "gate": e.base.gate.data, "up": e.base.up.data, "down": e.base.down.data, "alpha": 4.0,
        "lora_gate": (e.lora_gate.A.data, e.lora_gate.B.data),
        "lora_up": (e.lora_up.A.data, e.lora_up.B.data),
        "lora_down": (e.lora_down.A.data, e.lora_down.B.data),
    }
    assert np.array_equal(expert_forward(e, Tensor(x)).data, ref.expert(x, w))


@pytest.mark.parametrize("zero_b", [False, True])
def test_expert_gradients_reach_every_lora_matrix(zero_b):
    rng = np.random.default_rng(5)
    e = make_expert(rng, zero_b=zero_b)
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    with Tape() as tape:
        loss = ag.sum(ag.mul_const(expert_forward(e, x), w))
    tape.backward(loss)

    def value():
        return float(np.sum(w * expert_forward(e, x).data))

    for _, lp in e.pairs():
        for name, t in lp.tensors():
            num = numeric_grad(value, t.data)
            if zero_b and name == "A":
                # d/dA is B^T(...) and B is zero
                assert np.all(t.grad == 0) and np.allclose(num, 0, atol=1e-9)
            else:
                assert rel_err(t.grad, num) < 1e-4
    for base in (e.base.gate, e.base.up, e.base.down):
        assert base.grad is None


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------


def attn_params(rng, d=8, h=2, r=2, zero_b=True):
    def lp():
        A = rng.normal(size=(r, d))
        return pair(A, np.zeros((d, r)) if zero_b else rng.normal(size=(d, r)), 4.0)

    ws = [Tensor(rng.normal(size=(d, d)) / np.sqrt(d)) for _ in range(4)]
    return AttentionParams(*ws, lp(), lp(), lp(), lp(), n_heads=h)


def test_attention_zero_init_matches_frozen():
    rng = np.random.default_rng(6)
    p = attn_params(rng)
    x = rng.normal(size=(2, 5, 8))
    cos, sin = rope_tables(16, 4)
    out = attention_lora_forward(p, Tensor(x), cos, sin).data
    exp = ref.causal_attention(x, p.wq.data, p.wk.data, p.wv.data, p.wo.data, 2, cos, sin)
    assert np.array_equal(out, exp)


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(7)
    p = attn_params(rng)
    x = rng.normal(size=(1, 1, 8))
    cos, sin = rope_tables(4, 4)
    out = attention_lora_forward(p, Tensor(x), cos, sin).data
    # weight on the only key is 1, so the output is x Wv^T Wo^T
    assert np.allclose(out, x @ p.wv.data.T @ p.wo.data.T, atol=1e-14)


def test_attention_is_causal():
    rng = np.random.default_rng(8)
    p = attn_params(rng, zero_b=False)
    cos, sin = rope_tables(8, 4)
    x = rng.normal(size=(1, 2, 8))
    y = x.copy()
    y[0, 1] += 5.0
    a = attention_lora_forward(p, Tensor(x), cos, sin).data
    b = attention_lora_forward(p, Tensor(y), cos, sin).data
    assert np.array_equal(a[0, 0], b[0, 0])
    assert not np.allclose(a[0, 1], b[0, 1])


def test_attention_head_divisibility():
    rng = np.random.default_rng(9)
    p = attn_params(rng)
    p.n_heads = 3
    cos, sin = rope_tables(4, 2)
    with pytest.raises(ConfigError):
        attention_lora_forward(p, Tensor(rng.normal(size=(1, 2, 8))), cos, sin)


def test_attention_lora_gradients():
    rng = np.random.default_rng(10)
    p = attn_params(rng, zero_b=False)
    cos, sin = rope_tables(8, 4)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    w = rng.normal(size=(1, 3, 8))
    with Tape() as tape:
        loss = ag.sum(ag.mul_const(attention_lora_forward(p, x, cos, sin), w))
    tape.backward(loss)
    for _, lp in p.pairs():
        for _, t in lp.tensors():
            num = numeric_grad(lambda: float(np.sum(w * attention_lora_forward(p, x, cos, sin).data)), t.data)
            assert rel_err(t.grad, num) < 1e-4
    assert all(b.grad is None for _, b in p.bases())


def test_kv_cache_matches_full_attention():
    rng = np.random.default_rng(12)
    p = attn_params(rng, zero_b=False)
    cos, sin = rope_tables(8, 4)
    x = rng.normal(size=(2, 5, 8))
    full = attention_lora_forward(p, Tensor(x), cos, sin).data
    cache = {}
    parts = [attention_lora_forward(p, Tensor(x[:, :3]), cos, sin, cache=cache).data]
    for t in (3, 4):
        parts.append(attention_lora_forward(p, Tensor(x[:, t : t + 1]), cos, sin, cache=cache).data)
    assert np.allclose(np.concatenate(parts, axis=1), full, atol=1e-12)
