"""Checkpoint archives: a zip of one .npy per parameter tensor (keyed by
canonical submodule path) plus a manifest.json with config and counts.
Entries use a fixed timestamp so identical content gives identical bytes.
Backbone and adapter tensors live in separable namespaces (adapter tensors
contain ``.adapter.`` in their path), so an adapter-only archive can be
layered onto a backbone archive."""

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ArchitectureMismatch

CHECKPOINT_FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict  # name -> np.ndarray

    @property
    def parameter_count(self):
        return int(sum(t.size for t in self.tensors.values()))


def save_checkpoint(path, model: torch.nn.Module, manifest_extra: dict | None = None,
                    name_filter=None):
    """Write the model's parameters (optionally filtered by name) to `path`."""
    state = {n: p.detach().cpu().numpy() for n, p in model.named_parameters()}
    if name_filter is not None:
        state = {n: v for n, v in state.items() if name_filter(n)}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "parameter_count": int(sum(v.size for v in state.values())),
        "tensor_names": sorted(state),
    }
    if manifest_extra:
        manifest.update(manifest_extra)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH),
                    json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", _EPOCH), buf.getvalue())
    return manifest


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = {}
        for info in zf.infolist():
            if info.filename.startswith("params/") and info.filename.endswith(".npy"):
                name = info.filename[len("params/"):-len(".npy")]
                tensors[name] = np.load(io.BytesIO(zf.read(info.filename)),
                                        allow_pickle=False)
    return Checkpoint(manifest=manifest, tensors=tensors)


def apply_checkpoint(model: torch.nn.Module, ckpt: Checkpoint, strict: bool = True):
    """Copy checkpoint tensors into the model. strict=True requires an exact
    name match; strict=False loads the (sub)set present in the archive, for
    layering adapter-only checkpoints onto a larger model."""
    params = dict(model.named_parameters())
    missing = set(ckpt.tensors) - set(params)
    if missing:
        raise ArchitectureMismatch(f"checkpoint tensors not in model: {sorted(missing)[:5]}")
    if strict:
        absent = set(params) - set(ckpt.tensors)
        if absent:
            raise ArchitectureMismatch(f"model tensors not in checkpoint: {sorted(absent)[:5]}")
    with torch.no_grad():
        for name, arr in ckpt.tensors.items():
            p = params[name]
            if tuple(p.shape) != tuple(arr.shape):
                raise ArchitectureMismatch(
                    f"{name}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype))
    return model
