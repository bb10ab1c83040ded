"""Self-describing checkpoint files.

A checkpoint is a ``.npz`` archive: one array per parameter or buffer,
named ``<module>.<state_key>``, plus a ``__meta__`` entry holding a
JSON document with the format version, the checkpoint kind, every
array's shape, and any extra run information.  Loading verifies the
version and the recorded shapes, so a file from a different layout
fails loudly instead of half-loading.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    kind: str,
    modules: dict[str, nn.Module],
    extra: dict | None = None,
) -> None:
    """Write module state dicts into one archive."""
    arrays: dict[str, np.ndarray] = {}
    shapes: dict[str, list[int]] = {}
    for mod_name, module in modules.items():
        if "." in mod_name:
            raise ValueError(f"module name {mod_name!r} must not contain '.'")
        for key, tensor in module.state_dict().items():
            full = f"{mod_name}.{key}"
            arr = tensor.detach().cpu().numpy()
            arrays[full] = arr
            shapes[full] = list(arr.shape)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "shapes": shapes,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, dict[str, torch.Tensor]], dict]:
    """Read an archive back: (kind, {module: state_dict}, extra metadata)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path}: not a checkpoint (missing __meta__)")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: format version {meta.get('format_version')} unsupported "
                f"(expected {FORMAT_VERSION})"
            )
        states: dict[str, dict[str, torch.Tensor]] = {}
        for full, shape in meta["shapes"].items():
            if full not in data:
                raise ValueError(f"{path}: metadata lists {full} but the array is missing")
            arr = data[full]
            if list(arr.shape) != shape:
                raise ValueError(
                    f"{path}: {full} has shape {list(arr.shape)}, metadata says {shape}"
                )
            mod_name, key = full.split(".", 1)
            states.setdefault(mod_name, {})[key] = torch.from_numpy(arr.copy())
    return meta["kind"], states, meta.get("extra", {})


def load_into(path: str | Path, expected_kind: str, modules: dict[str, nn.Module]) -> dict:
    """Load a checkpoint into live modules, checking the kind tag."""
    kind, states, extra = load_checkpoint(path)
    if kind != expected_kind:
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected {expected_kind!r}")
    for mod_name, module in modules.items():
        if mod_name not in states:
            raise ValueError(f"{path}: no state for module {mod_name!r}")
        module.load_state_dict(states[mod_name])
    return extra
