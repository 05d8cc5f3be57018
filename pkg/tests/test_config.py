import pytest

from graphmoe.config import GraphMoeConfig, RunConfig, expand_sweep, load_config, replace, valid_keys
from graphmoe.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.model.k == 2 and cfg.model.T == 3 and cfg.model.lb_lambda == 0.01


def test_toml_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[model]\nT = 2\nprecision = "float64"\n[train]\nlr = 0.001\n')
    cfg = load_config(p, ["model.k=1", "lr=3e-3", "max_steps=5"])
    assert cfg.model.T == 2 and cfg.model.k == 1 and cfg.model.precision == "float64"
    assert cfg.train.lr == 3e-3 and cfg.train.max_steps == 5


def test_unknown_key_lists_valid_keys(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(None, ["model.tee=3"])
    assert "model.T" in str(info.value) and "valid keys" in str(info.value)
    p = tmp_path / "c.toml"
    p.write_text("[model]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="valid keys"):
        load_config(p)
    p.write_text("[nope]\nT = 1\n")
    with pytest.raises(ConfigError, match="section"):
        load_config(p)


@pytest.mark.parametrize("bad", ["k=9", "T=0", "model.n_experts=1", "lb_lambda=-1", "dropout=1.0", "model.T=abc"])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        load_config(None, [bad])


def test_ambiguous_and_malformed_overrides():
    with pytest.raises(ConfigError, match="ambiguous"):
        load_config(None, ["seed=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["noequals"])
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.toml")


def test_task_vocab_must_fit_model():
    with pytest.raises(ConfigError, match="vocab"):
        load_config(None, ["model.vocab_size=16", "task.vocab=32"])


def test_optional_max_steps_accepts_none():
    cfg = load_config(None, ["max_steps=4"])
    cfg2 = replace(cfg, train__max_steps="none")
    assert cfg.train.max_steps == 4 and cfg2.train.max_steps is None


def test_replace_is_a_deep_copy():
    cfg = RunConfig()
    out = replace(cfg, model__T=5)
    assert out.model.T == 5 and cfg.model.T == 3


def test_expand_sweep():
    assert expand_sweep("T=1..5") == ("model.T", [1, 2, 3, 4, 5])
    assert expand_sweep("model.lb_lambda=0.0,0.01") == ("model.lb_lambda", [0.0, 0.01])
    for bad in ("T", "T=a..b", "T="):
        with pytest.raises(ConfigError):
            expand_sweep(bad)


def test_valid_keys_cover_sections():
    keys = valid_keys()
    assert {"model.T", "train.lr", "task.kind", "profile.T_max"} <= set(keys)


def test_gru_dim_floor():
    assert GraphMoeConfig(d_model=4096).gru_dim == 409
    with pytest.raises(ConfigError):
        GraphMoeConfig(d_model=8, n_heads=2).validate()  # 8 * 0.1 truncates to 0
