"""Checkpoint directories: ``manifest.json`` plus one little-endian f32 blob.

The manifest records the model config, a format version and, for every
tensor, its name, shape, dtype and byte offset into ``tensors.f32``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, Net1D, build_model

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.f32"


class CheckpointError(Exception):
    pass


def checkpoint_tensors(model: Net1D) -> dict[str, torch.Tensor]:
    """Parameters and any normalization running statistics, in state-dict order."""
    return {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_checkpoint(model: Net1D, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in checkpoint_tensors(model).items():
        buf = t.detach().cpu().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(_dumps(manifest))
    return path


def read_manifest(path: str | Path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {mpath}")
    man = json.loads(mpath.read_text())
    if man.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {man.get('format_version')} != {FORMAT_VERSION}")
    return man


def load_tensors(path: str | Path, config: ModelConfig) -> dict[str, torch.Tensor]:
    """Read and validate every tensor against a freshly built model for ``config``."""
    path = Path(path)
    man = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    expected = checkpoint_tensors(Net1D(config))
    entries = {e["name"]: e for e in man["tensors"]}
    for name, ref in expected.items():
        e = entries.get(name)
        if e is None:
            raise CheckpointError(f"missing tensor {name!r}")
        if tuple(e["shape"]) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for tensor {name!r}: checkpoint {e['shape']} vs model {list(ref.shape)}")
        if e.get("dtype") != "float32":
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {e.get('dtype')}")
    unknown = sorted(set(entries) - set(expected))
    if unknown:
        raise CheckpointError(f"unexpected tensor {unknown[0]!r}")
    out = {}
    for name in expected:
        e = entries[name]
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"tensor {name!r}: truncated data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        out[name] = torch.from_numpy(arr)
    return out


def load_checkpoint(path: str | Path, config: ModelConfig | None = None,
                    dtype=torch.float32) -> Net1D:
    """Load a model; ``config`` overrides the stored one but must match its tensors."""
    man = read_manifest(path)
    cfg = config or ModelConfig.from_dict(man["config"])
    tensors = load_tensors(path, cfg)
    model = build_model(cfg, seed=0, dtype=torch.float32)
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    assert not unexpected and all(k.endswith("num_batches_tracked") for k in missing)
    return model.to(dtype)
