"""Named-tensor containers: a directory of tensor files plus ``manifest.txt``.

Manifest lines::

    format=named-tensors
    version=1
    kind=<model|bank|segmentation>
    meta <key> <json>
    tensor <name> <dtype> <d0,d1,...> <file>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import read_tensor_file, write_tensor_file
from .errors import FormatError

CONTAINER_VERSION = 1


def _to_numpy(t):
    if torch.is_tensor(t):
        t = t.detach().cpu()
        if t.dtype in (torch.bool, torch.uint8, torch.int16, torch.int32, torch.int64):
            return t.numpy().astype(np.uint16)
        return t.numpy()
    arr = np.asarray(t)
    if arr.dtype.kind in "biu":
        return arr.astype(np.uint16)
    return arr


def save_named_tensors(directory, tensors, meta=None, kind="model"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["format=named-tensors", f"version={CONTAINER_VERSION}", f"kind={kind}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    for i, name in enumerate(tensors):
        arr = _to_numpy(tensors[name])
        if arr.ndim > 4:
            raise FormatError(f"tensor {name} has rank {arr.ndim} > 4")
        fname = f"t{i:04d}.stsr"
        write_tensor_file(directory / fname, arr)
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {arr.dtype.name} {shape} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_named_tensors(directory, expect_kind=None):
    directory = Path(directory)
    path = directory / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(path)
    header, meta, tensors = {}, {}, {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = json.loads(value)
        elif line.startswith("tensor "):
            _, name, dtype, shape, fname = line.split(" ")
            arr = read_tensor_file(directory / fname)
            want = tuple(int(s) for s in shape.split(",") if s)
            if arr.shape != want:
                raise FormatError(f"{name}: shape {arr.shape} does not match manifest {want}")
            tensors[name] = arr
        elif "=" in line:
            k, v = line.split("=", 1)
            header[k] = v
    if header.get("format") != "named-tensors" or int(header.get("version", -1)) != CONTAINER_VERSION:
        raise FormatError(f"{path}: not a version-{CONTAINER_VERSION} named-tensor container")
    if expect_kind and header.get("kind") != expect_kind:
        raise FormatError(f"{path}: expected kind {expect_kind}, found {header.get('kind')}")
    return tensors, meta


def save_module(directory, module, meta, kind="model"):
    save_named_tensors(directory, module.state_dict(), meta, kind)


def load_state_dict(module, tensors):
    ref = module.state_dict()
    missing = set(ref) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    state = {k: torch.from_numpy(np.ascontiguousarray(tensors[k])).to(ref[k].dtype) for k in ref}
    module.load_state_dict(state)
    return module
