"""Checkpoint directory: ``manifest.json`` plus one little-endian float64 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import config as C
from .model import SegModel

VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save(path, model: SegModel, train_config, step: int = 0) -> Path:
    """Write every tensor in ``model`` in named order; returns the directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    mask = model.freeze_mask()
    records, offset = [], 0
    with open(path / BLOB, "wb") as blob:
        for name, t in model.named_parameters():
            data = np.ascontiguousarray(t.data, dtype=_DTYPE)
            blob.write(data.tobytes())
            records.append({"name": name, "shape": list(data.shape), "offset": offset, "trainable": bool(mask[name])})
            offset += data.nbytes
    manifest = {
        "version": VERSION,
        "step": int(step),
        "config": C.as_dict(train_config),
        "blob": BLOB,
        "tensors": records,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest in {path}") from None
    if "version" not in manifest:
        raise CheckpointError("checkpoint manifest has no version field")
    if manifest["version"] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest['version']}")
    _check_records(manifest["tensors"])
    return manifest


def _check_records(records: list[dict]) -> None:
    names = [r["name"] for r in records]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in manifest")
    spans = sorted((r["offset"], r["offset"] + _DTYPE.itemsize * int(np.prod(r["shape"], dtype=np.int64))) for r in records)
    for (_, end), (start, _) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointError("overlapping tensor offsets in manifest")


def load(path, config_cls=None) -> tuple[SegModel, object, dict]:
    """Rebuild the model from the config echo and fill in every stored tensor.

    Returns (model, train_config, manifest).
    """
    from .train import TrainConfig

    path = Path(path)
    manifest = read_manifest(path)
    cls = config_cls or TrainConfig
    try:
        cfg = cls(**manifest["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config echo: {exc}") from exc
    model = SegModel(cfg.model_config, seed=cfg.seed)
    blob = np.fromfile(path / manifest.get("blob", BLOB), dtype=np.uint8)
    params = dict(model.named_parameters())
    stored = {r["name"]: r for r in manifest["tensors"]}
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        raise CheckpointError(f"tensor names differ from the model; missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in params.items():
        r = stored[name]
        if tuple(r["shape"]) != t.shape:
            raise CheckpointError(f"{name}: stored shape {tuple(r['shape'])} != model shape {t.shape}")
        n = t.data.size * _DTYPE.itemsize
        if r["offset"] + n > blob.size:
            raise CheckpointError(f"{name}: blob too short")
        t.data = blob[r["offset"] : r["offset"] + n].view(_DTYPE).reshape(t.shape).astype(np.float64)
    return model, cfg, manifest
