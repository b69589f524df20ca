"""Checkpoint archives: a single zip holding named weight arrays plus a
plain-text JSON manifest.

Layout inside the archive:
    manifest.json          config, format version, step/epoch counters
    arrays/<name>.npy      one little-endian .npy per tensor

Arrays round-trip bit-exactly (raw dtype bytes), so save/load/compare is a
valid equality test for resumable training state.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1


def save_archive(path, arrays: dict, manifest: dict | None = None) -> Path:
    """Write tensors/ndarrays under their names next to a JSON manifest."""
    path = Path(path)
    manifest = dict(manifest or {})
    manifest.setdefault("format_version", FORMAT_VERSION)
    path.parent.mkdir(parents=True, exist_ok=True)

    def write(archive, member, payload):
        # fixed timestamp: identical state produces byte-identical archives
        archive.writestr(zipfile.ZipInfo(member), payload)

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        write(archive, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, value in sorted(arrays.items()):
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            buffer = io.BytesIO()
            np.save(buffer, np.ascontiguousarray(value))
            write(archive, f"arrays/{name}.npy", buffer.getvalue())
    return path


def load_archive(path) -> tuple[dict, dict]:
    """Read back (arrays, manifest); arrays come out as numpy."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    arrays = {}
    with zipfile.ZipFile(path, "r") as archive:
        manifest = json.loads(archive.read("manifest.json"))
        for member in archive.namelist():
            if member.startswith("arrays/") and member.endswith(".npy"):
                name = member[len("arrays/") : -len(".npy")]
                arrays[name] = np.load(io.BytesIO(archive.read(member)))
    return arrays, manifest


def module_arrays(module: nn.Module, prefix: str = "") -> dict:
    """Flatten a module's full state dict (weights and buffers) to arrays."""
    prefix = f"{prefix}." if prefix else ""
    return {f"{prefix}{key}": value for key, value in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict, prefix: str = ""):
    """Restore a module from arrays saved by module_arrays."""
    prefix = f"{prefix}." if prefix else ""
    state = {}
    for key, reference in module.state_dict().items():
        name = f"{prefix}{key}"
        if name not in arrays:
            raise KeyError(f"checkpoint is missing array {name!r}")
        state[key] = torch.from_numpy(np.array(arrays[name])).to(reference.dtype)
    module.load_state_dict(state)
