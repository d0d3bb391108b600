"""Self-describing checkpoints: one ``.npz`` holding every array plus a JSON
``__meta__`` entry that records the nested structure and scalar fields."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_META = "__meta__"


def _pack(obj, arrays: dict, prefix: str):
    if isinstance(obj, np.ndarray):
        key = f"a{len(arrays)}"
        arrays[key] = obj
        return {"__array__": key}
    if isinstance(obj, dict):
        return {str(k): _pack(v, arrays, f"{prefix}/{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_pack(v, arrays, f"{prefix}/{i}") for i, v in enumerate(obj)]}
    if isinstance(obj, np.generic):
        return obj.item()
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot checkpoint value of type {type(obj).__name__} at {prefix}")


def _unpack(node, arrays):
    if isinstance(node, dict):
        if "__array__" in node:
            return arrays[node["__array__"]]
        if "__list__" in node:
            return [_unpack(v, arrays) for v in node["__list__"]]
        return {k: _unpack(v, arrays) for k, v in node.items()}
    return node


def save_checkpoint(path: str | Path, state: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta = _pack(state, arrays, "")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{_META: np.array(json.dumps(meta, sort_keys=True))})


def load_checkpoint(path: str | Path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != _META}
        meta = json.loads(str(z[_META]))
    return _unpack(meta, arrays)


def load_model(path: str | Path):
    """Rebuild a dynamics model from a checkpoint written with its ``state_dict``."""
    from .dynamics import MODEL_KINDS

    state = load_checkpoint(path)
    kind = state.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"checkpoint {path} does not hold a dynamics model (kind={kind!r})")
    return MODEL_KINDS[kind].from_state_dict(state)
