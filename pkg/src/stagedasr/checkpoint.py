"""Checkpoint container: JSON manifest plus a flat binary tensor blob.

Layout (little-endian):

    bytes 0..7    magic b"DSKCKPT1"
    bytes 8..11   uint32 manifest length in bytes
    manifest      UTF-8 JSON, sorted keys:
                    format_version, hyperparams, lineage, seed,
                    params: [{name, group, shape, dtype, offset, nbytes}, ...]
    blob          raw C-order tensor bytes, concatenated in the order the
                  params table lists them (sorted by name)

Round-trips are bitwise: save(load(path)) reproduces the file exactly.
Writes are atomic (temp file then rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ConfigError
from .model import Hyperparams, ModelParams, ParamGroup
from .tensor import Tensor

MAGIC = b"DSKCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, path: str) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params.tensors):
        t = params.tensors[name]
        raw = np.ascontiguousarray(t.data).tobytes()
        entries.append({
            "name": name,
            "group": params.groups[name].value,
            "shape": list(t.data.shape),
            "dtype": str(t.data.dtype),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyperparams": params.hp.to_dict(),
        "lineage": params.lineage,
        "seed": params.seed,
        "params": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(mbytes)))
            f.write(mbytes)
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path: str) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
        (mlen,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(mlen).decode("utf-8"))


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version "
                              f"{manifest.get('format_version')}")
        blob = f.read()
    hp = Hyperparams.from_dict(manifest["hyperparams"])
    tensors: dict[str, Tensor] = {}
    groups: dict[str, ParamGroup] = {}
    for e in manifest["params"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = Tensor(arr)
        groups[e["name"]] = ParamGroup(e["group"])
    return ModelParams(hp, tensors, groups, list(manifest["lineage"]), manifest["seed"])
