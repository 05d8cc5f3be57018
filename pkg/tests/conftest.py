import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from graphmoe.config import GraphMoeConfig  # noqa: E402

PROBE = dict(
    n_layers=2, n_heads=2, d_model=8, d_ffn=16, gru_hidden=2, n_experts=3, k=2, T=3,
    lora_rank=4, lora_alpha=8.0, vocab_size=16, max_seq_len=16, precision="float64",
)
SMALL = dict(n_layers=2, n_heads=2, d_model=16, d_ffn=24, n_experts=4, k=2, T=3, lora_rank=4, lora_alpha=8.0,
             vocab_size=32, max_seq_len=16)


@pytest.fixture
def probe_cfg():
    return GraphMoeConfig(**PROBE)


@pytest.fixture
def small_cfg():
    return GraphMoeConfig(**SMALL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def expert_dicts(moe_layer) -> list:
    """Plain-array view of a layer's experts for the reference module."""
    out = []
    for e in moe_layer.experts:
        out.append({
            "gate": e.base.gate.data, "up": e.base.up.data, "down": e.base.down.data,
            "lora_gate": (e.lora_gate.A.data, e.lora_gate.B.data),
            "lora_up": (e.lora_up.A.data, e.lora_up.B.data),
            "lora_down": (e.lora_down.A.data, e.lora_down.B.data),
            "alpha": e.lora_gate.alpha,
        })
    return out


def frozen_weights(model) -> dict:
    cfg = model.config
    head = model.head.data if model.head is not None else model.embed.data.T
    return {
        "embed": model.embed.data, "head": head, "final_norm": model.final_norm.data,
        "eps": cfg.norm_eps, "n_heads": cfg.n_heads, "max_len": cfg.max_seq_len,
        "layers": [
            {
                "attn_norm": l.attn_norm.data, "ffn_norm": l.ffn_norm.data,
                "wq": l.attn.wq.data, "wk": l.attn.wk.data, "wv": l.attn.wv.data, "wo": l.attn.wo.data,
                "gate": l.ffn_base.gate.data, "up": l.ffn_base.up.data, "down": l.ffn_base.down.data,
            }
            for l in model.layers
        ],
    }


def zero_gru(model) -> None:
    for l in model.layers:
        for _, t in l.moe.gru.linears():
            t.data[...] = 0.0


def randomize_b(model, scale=0.3, seed=0) -> None:
    r = np.random.default_rng(seed)
    for name, t in model.named_parameters():
        if t.requires_grad and name.endswith(".B"):
            t.data[...] = r.normal(0.0, scale, size=t.shape).astype(t.dtype)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)
