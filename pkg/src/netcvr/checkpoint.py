"""Versioned binary checkpoints for ``CascadeModel``.

Layout, all integers little-endian::

    offset  size  content
    0       8     magic b"NCVRCKPT"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H
    16      H     UTF-8 JSON header: variant, dtype, adam step/config,
                  model config, and the ordered tensor table
                  [{"name", "group", "shape"}, ...]
    16+H    ...   tensor payloads in table order, C-contiguous, little-endian
                  ("<f4" for float32 models)

``group`` is one of ``param``, ``buffer``, ``adam_m``, ``adam_v`` or
``tail``. Frozen delay-tail models ride along optionally: their scalars sit in
the header under ``"tails"`` and their embedding/head arrays are ``tail``
tensors named ``<tail>.emb`` / ``<tail>.head`` (stored as ``<f8``). A JSON
sidecar (``<path>.json``) repeats the header plus caller metadata for humans
and tooling; loading needs only the binary file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .delay_model import DelayTailModel
from .model import CascadeModel, ModelConfig
from .nn import AdamConfig

MAGIC = b"NCVRCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _tensors(model: CascadeModel):
    opt = model.optimizer
    for name in sorted(model.params):
        yield name, "param", model.params[name]
    for name in sorted(model.buffers):
        yield name, "buffer", model.buffers[name]
    for name in sorted(opt.m):
        yield name, "adam_m", opt.m[name]
        yield name, "adam_v", opt.v[name]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


TAIL_DTYPE = np.dtype("<f8")


def save_checkpoint(
    model: CascadeModel, path, metadata: Optional[dict] = None, tails: Optional[dict] = None
) -> Path:
    """Write ``model`` (and optionally named ``DelayTailModel`` objects) to ``path``."""
    path = Path(path)
    dtype = np.dtype(model.cfg.dtype).newbyteorder("<")
    table, payload = [], []
    for name, group, arr in _tensors(model):
        table.append({"name": name, "group": group, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    tail_meta = {}
    for tname, tail in sorted((tails or {}).items()):
        info = tail.to_dict()
        for key in ("emb", "head"):
            arr = getattr(tail, key)
            info.pop(key)
            if arr is not None:
                table.append({"name": f"{tname}.{key}", "group": "tail", "shape": list(arr.shape)})
                payload.append(np.ascontiguousarray(arr, dtype=TAIL_DTYPE).tobytes())
        tail_meta[tname] = info
    header = {
        "format_version": FORMAT_VERSION,
        "variant": model.variant,
        "dtype": dtype.str,
        "adam": {"t": model.optimizer.t, **vars(model.optimizer.cfg)},
        "model_config": model.cfg.to_dict(),
        "tensors": table,
        "tails": tail_meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for chunk in payload:
            fh.write(chunk)
    side = dict(header)
    side["metadata"] = metadata or {}
    side["fingerprint"] = model.fingerprint()
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> CascadeModel:
    return load_checkpoint_bundle(path)[0]


def load_checkpoint_bundle(path) -> tuple[CascadeModel, dict]:
    """``(model, {name: DelayTailModel})`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, head_len = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if 16 + head_len > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable header") from err
    adam = dict(header["adam"])
    t = adam.pop("t")
    model = CascadeModel(ModelConfig(**header["model_config"]), AdamConfig(**adam), init=False)
    if model.variant != header["variant"]:
        raise CheckpointError(f"{path}: variant tag does not match model config")
    dtype = np.dtype(header["dtype"])
    tail_arrays: dict = {}
    pos = 16 + head_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        name, group = entry["name"], entry["group"]
        dt = TAIL_DTYPE if group == "tail" else dtype
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape)
        pos += nbytes
        if group == "tail":
            tail_arrays[name] = arr.astype(np.float64, copy=True)
            continue
        arr = arr.astype(model.dtype, copy=True)
        if group == "param":
            model.params[name] = arr
        elif group == "buffer":
            model.buffers[name] = arr
        elif group == "adam_m":
            model.optimizer.m[name] = arr
        elif group == "adam_v":
            model.optimizer.v[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor group {group!r}")
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    model.optimizer.t = t
    tails = {}
    for tname, info in header.get("tails", {}).items():
        info = dict(info)
        info["emb"] = tail_arrays.get(f"{tname}.emb")
        info["head"] = tail_arrays.get(f"{tname}.head")
        tails[tname] = DelayTailModel.from_dict(info)
    return model, tails
