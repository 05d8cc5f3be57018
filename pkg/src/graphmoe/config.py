"""Run configuration: dataclasses, TOML loading and dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .rethink import gru_hidden_size


@dataclass
class GraphMoeConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ffn: int = 344
    gru_hidden: int | None = None  # None -> int(gru_scale * d_model)
    gru_scale: float = 0.1
    n_experts: int = 8
    k: int = 2
    T: int = 3
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lb_lambda: float = 0.01
    lb_reduce: str = "mean"
    vocab_size: int = 512
    max_seq_len: int = 64
    seed: int = 0
    precision: str = "float32"
    renormalize_topk: bool = True
    candidate_activation: str = "tanh"
    ffn_activation: str = "silu"
    train_embeddings: bool = True
    tie_embeddings: bool = False
    norm_eps: float = 1e-6

    @property
    def gru_dim(self) -> int:
        return self.gru_hidden if self.gru_hidden is not None else gru_hidden_size(self.d_model, self.gru_scale)

    @property
    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == "float64" else np.float32

    def validate(self) -> "GraphMoeConfig":
        positive = ("n_layers", "n_heads", "d_model", "d_ffn", "n_experts", "k", "T",
                    "lora_rank", "vocab_size", "max_seq_len")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.k > self.n_experts:
            raise ConfigError(f"model.k={self.k} exceeds n_experts={self.n_experts}")
        if not 1 <= self.gru_dim < self.d_model:
            raise ConfigError(f"GRU hidden size {self.gru_dim} must satisfy 1 <= hidden < d_model")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"model.precision must be float32 or float64, got {self.precision!r}")
        if self.candidate_activation not in ("tanh", "sigmoid"):
            raise ConfigError("model.candidate_activation must be tanh or sigmoid")
        if self.ffn_activation not in ("silu", "sigmoid", "tanh"):
            raise ConfigError("model.ffn_activation must be silu, sigmoid or tanh")
        if self.lb_reduce not in ("mean", "sum"):
            raise ConfigError("model.lb_reduce must be mean or sum")
        if self.lb_lambda < 0:
            raise ConfigError("model.lb_lambda must be >= 0")
        if self.lora_alpha <= 0:
            raise ConfigError("model.lora_alpha must be > 0")
        return self


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    accumulation_steps: int = 8
    dropout: float = 0.05
    epochs: int = 2
    cutoff_len: int = 512
    max_steps: int | None = None  # overrides epochs when set
    seed: int = 0
    log_every: int = 1

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr and train.weight_decay must be >= 0")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("train.batch_size and train.accumulation_steps must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("train.dropout must be in [0, 1)")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("train.max_steps must be >= 0")
        return self


@dataclass
class TaskConfig:
    kind: str = "copy"
    vocab: int = 32
    seq_len: int = 8
    n_train: int = 256
    n_eval: int = 64
    seed: int = 0

    def validate(self) -> "TaskConfig":
        if self.kind not in ("copy", "reverse", "modular-add", "majority-vote"):
            raise ConfigError(f"task.kind {self.kind!r} is not one of copy, reverse, modular-add, majority-vote")
        if self.seq_len < 1 or self.n_train < 1 or self.n_eval < 0:
            raise ConfigError("task.seq_len and task.n_train must be >= 1, task.n_eval >= 0")
        return self


@dataclass
class ProfileConfig:
    T_max: int = 5
    prompt_len: int = 16
    gen_len: int = 16
    batch_size: int = 1
    warmup: int = 2
    repeats: int = 5


@dataclass
class RunConfig:
    model: GraphMoeConfig = field(default_factory=GraphMoeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.task.validate()
        if self.profile.T_max < 1 or self.profile.repeats < 5 or self.profile.warmup < 2:
            raise ConfigError("profile needs T_max >= 1, repeats >= 5 and warmup >= 2")
        if self.task.vocab > self.model.vocab_size:
            raise ConfigError(
                f"task.vocab={self.task.vocab} exceeds model.vocab_size={self.model.vocab_size}"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def valid_keys() -> list[str]:
    cfg = RunConfig()
    return [f"{s}.{f.name}" for s in SECTIONS for f in fields(getattr(cfg, s))]


def resolve_key(key: str) -> str:
    """Map ``key`` to a full dotted path; bare field names work when unique."""
    keys = valid_keys()
    if key in keys:
        return key
    matches = [k for k in keys if k.split(".", 1)[1] == key]
    if len(matches) == 1:
        return matches[0]
    if len(matches) > 1:
        raise ConfigError(f"ambiguous key {key!r}: matches {', '.join(matches)}")
    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(keys)}")


def parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _coerce(value: Any, current: Any, key: str) -> Any:
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects true/false, got {value!r}")
    if isinstance(current, int) and isinstance(value, int):
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    if isinstance(current, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    raise ConfigError(f"{key} expects {type(current).__name__}, got {value!r}")


def set_key(cfg: RunConfig, key: str, value: Any) -> None:
    full = resolve_key(key)
    sec, name = full.split(".", 1)
    obj = getattr(cfg, sec)
    current = getattr(obj, name)
    optional = {f.name: f.default for f in fields(obj)}[name] is None
    if optional and isinstance(value, str) and value.lower() == "none":
        value = None
    setattr(obj, name, _coerce(value, current, full))


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for sec, body in data.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}; valid sections: {', '.join(SECTIONS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {sec!r} must be a table")
        for name, value in body.items():
            full = f"{sec}.{name}"
            if full not in valid_keys():
                raise ConfigError(f"unknown config key {full!r}; valid keys: {', '.join(valid_keys())}")
            set_key(cfg, full, value)
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | tuple = ()) -> RunConfig:
    """Read a TOML file (sections model/train/task/profile), apply ``key=value`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = from_dict(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        set_key(cfg, key.strip(), parse_value(text.strip()))
    return cfg.validate()


def replace(cfg: RunConfig, **updates: Any) -> RunConfig:
    """Deep copy of ``cfg`` with dotted-path updates (``model.T=3`` as ``model__T=3``)."""
    out = from_dict(cfg.to_dict())
    for key, value in updates.items():
        set_key(out, key.replace("__", "."), value)
    return out


def expand_sweep(spec: str) -> tuple[str, list]:
    """``T=1..5`` -> ("model.T", [1, 2, 3, 4, 5]); ``x=a,b`` lists values."""
    if "=" not in spec:
        raise ConfigError(f"sweep spec {spec!r} must look like key=lo..hi or key=a,b,c")
    key, rng = spec.split("=", 1)
    full = resolve_key(key.strip())
    rng = rng.strip()
    if ".." in rng:
        lo, hi = rng.split("..", 1)
        try:
            values = list(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ConfigError(f"bad sweep range {rng!r}") from exc
    else:
        values = [parse_value(v.strip()) for v in rng.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"sweep {spec!r} has no values")
    return full, values


def model_config_from_dict(d: dict) -> GraphMoeConfig:
    known = {f.name for f in dataclasses.fields(GraphMoeConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return GraphMoeConfig(**d).validate()
