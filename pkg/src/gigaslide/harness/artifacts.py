"""On-disk artifacts: named arrays plus a JSON header in the binary container."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..autograd import checkpoint

META_KEY = "__meta__"


def _encode_meta(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def save_bundle(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write arrays (in insertion order) and an optional JSON-able header."""
    payload = dict(arrays)
    if meta is not None:
        payload[META_KEY] = _encode_meta(meta)
    path = Path(path)
    checkpoint.save(path, payload)
    return path


def load_bundle(path) -> tuple[dict, dict]:
    arrays = dict(checkpoint.load(path))
    raw = arrays.pop(META_KEY, None)
    meta = json.loads(bytes(raw).decode("utf-8")) if raw is not None else {}
    return arrays, meta


def save_model(path, model, config, kind: str, extra: dict | None = None) -> Path:
    """Persist ``model.state_dict()`` with its architecture config."""
    cfg = config.__dict__ if hasattr(config, "__dict__") else dict(config)
    meta = {"kind": kind, "config": json.loads(json.dumps(cfg, default=list))}
    if extra:
        meta.update(extra)
    return save_bundle(path, model.state_dict(), meta)


def load_model(path):
    """Rebuild a saved S-CAE, DSNet or naive baseline."""
    from ..dsnet import DSNet, DsnetConfig
    from ..scae import Scae, ScaeConfig
    from .baseline import NaiveCNN, NaiveConfig

    state, meta = load_bundle(path)
    kind = meta.get("kind")
    cfg = meta.get("config", {})
    if kind == "scae":
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        model = Scae(ScaeConfig(**cfg))
    elif kind == "dsnet":
        model = DSNet(DsnetConfig.from_json(json.dumps(cfg)))
    elif kind == "naive":
        model = NaiveCNN(NaiveConfig(**cfg))
    else:
        raise checkpoint.CheckpointError(f"{path}: unknown model kind {kind!r}")
    model.load_state_dict(state)
    model.eval()
    return model, meta


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
    return path
