"""Checkpoint = ``manifest.json`` + ``tensors.bin``.

The blob is every tensor in :meth:`ModelState.named_parameters` order,
row-major, little-endian, concatenated with no padding. The manifest lists
name, shape, dtype, byte offset, byte length, CRC-32 and trainability per
tensor, plus the model config and a SHA-256 of the whole blob.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .config import model_config_from_dict
from .errors import CheckpointError
from .model import ModelState, init_model

FORMAT = "graphmoe-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: ModelState, directory: str | Path, extra: dict | None = None) -> Path:
    """Write the checkpoint; 32-bit models store ``<f4``, 64-bit ones ``<f8``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    dt = np.dtype(_DTYPES[cfg.precision])
    entries = []
    offset = 0
    sha = hashlib.sha256()
    with open(out / BLOB, "wb") as fh:
        for name, t in model.named_parameters():
            raw = np.ascontiguousarray(t.data, dtype=dt).tobytes()
            fh.write(raw)
            sha.update(raw)
            entries.append(
                {
                    "name": name,
                    "shape": list(t.shape),
                    "dtype": dt.str,
                    "offset": offset,
                    "nbytes": len(raw),
                    "crc32": zlib.crc32(raw),
                    "trainable": bool(t.requires_grad),
                }
            )
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": asdict(cfg),
        "tensors": entries,
        "total_bytes": offset,
        "sha256": sha.hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return out


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path} is not a {FORMAT} v{VERSION} manifest")
    return manifest


def verify_checkpoint(directory: str | Path) -> dict:
    """Check blob size, SHA-256 and every per-tensor CRC; return the manifest."""
    manifest = read_manifest(directory)
    blob = (Path(directory) / BLOB).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError("blob SHA-256 mismatch")
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"CRC mismatch for tensor {e['name']}")
    return manifest


def load_checkpoint(directory: str | Path) -> ModelState:
    manifest = verify_checkpoint(directory)
    blob = (Path(directory) / BLOB).read_bytes()
    cfg = model_config_from_dict(manifest["config"])
    model = init_model(cfg)
    params = model.parameter_dict()
    listed = {e["name"] for e in manifest["tensors"]}
    if listed != set(params):
        missing = sorted(set(params) - listed)
        extra = sorted(listed - set(params))
        raise CheckpointError(f"tensor set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for e in manifest["tensors"]:
        t: Tensor = params[e["name"]]
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arr = arr.reshape(e["shape"])
        if tuple(arr.shape) != t.shape:
            raise CheckpointError(f"shape mismatch for {e['name']}: {arr.shape} vs {t.shape}")
        t.data = arr.astype(cfg.dtype, copy=True)
        t.requires_grad = bool(e["trainable"])
    return model


def adapter_summary(manifest: dict) -> dict:
    """Count LoRA pairs and GRU linears listed in a manifest."""
    names = [e["name"] for e in manifest["tensors"]]
    attn = sum(1 for n in names if ".attn.lora_" in n and n.endswith(".A"))
    moe = sum(1 for n in names if ".experts." in n and n.endswith(".A"))
    gru = sum(1 for n in names if ".gru.w_" in n)
    cfg = manifest["config"]
    expected = (3 * cfg["n_experts"] + 4) * cfg["n_layers"]
    return {
        "attention_adapters": attn,
        "moe_adapters": moe,
        "lora_pairs": attn + moe,
        "expected_lora_pairs": expected,
        "gru_linears": gru,
        "expected_gru_linears": 4 * cfg["n_layers"],
    }
