"""
Versioned checkpoint files.

A checkpoint is a zip of ``.npy`` arrays (readable with ``np.load``) plus a
``__meta__.json`` entry holding the format version, kind, config echo and
training logs. Entries carry a fixed timestamp so identical content gives
identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_META = "__meta__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    def state_dict(self, prefix: str) -> dict:
        p = prefix + "/"
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(p)}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()


def module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> dict:
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for name, v in st.items():
            out[f"{prefix}/{i}/{name}"] = np.asarray(v.detach().cpu().numpy() if torch.is_tensor(v) else v)
    return out


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "kind": ckpt.kind, **ckpt.meta}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo(_META, _EPOCH), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(ckpt.arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(ckpt.arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", _EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())
    return path


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(_META))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: not a checkpoint ({e})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    found = meta.pop("kind")
    meta.pop("format_version")
    if kind is not None and found != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {found}")
    return Checkpoint(found, meta, arrays)
