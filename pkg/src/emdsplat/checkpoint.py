"""Checkpoint container.

Layout::

    EMDSPLAT-CKPT\\n
    <header byte length>\\n
    <JSON header, sorted keys>
    <raw little-endian float32 arrays, in header order>

The header lists every array with its shape, byte offset and length, and
carries the config, scene layout, iteration counter, optimizer scalars and
the frame-sampling RNG state. Writing is canonical, so load -> save yields an
identical file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffkit import OptimizerState
from .errors import FormatError

MAGIC = b"EMDSPLAT-CKPT\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: dict
    layout: dict
    iteration: int
    params: dict
    optimizer: dict = field(default_factory=dict)
    rng_state: dict | None = None
    format_version: int = FORMAT_VERSION

    def arrays(self):
        out = [(f"param/{k}", v) for k, v in sorted(self.params.items())]
        for name, st in sorted(self.optimizer.items()):
            out += [(f"adam_m/{name}", st.m[name]), (f"adam_v/{name}", st.v[name])] if name in st.m else []
        return out


def _header(ckpt: Checkpoint):
    table, offset = [], 0
    for name, arr in ckpt.arrays():
        n = int(np.prod(arr.shape)) * _DTYPE.itemsize
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": n})
        offset += n
    opt = {name: {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}
           for name, st in sorted(ckpt.optimizer.items())}
    return {
        "format_version": ckpt.format_version,
        "config": ckpt.config,
        "layout": ckpt.layout,
        "iteration": int(ckpt.iteration),
        "optimizer": opt,
        "rng_state": ckpt.rng_state,
        "arrays": table,
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, f"{len(header)}\n".encode(), header]
    for _, arr in ckpt.arrays():
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    return b"".join(parts)


def save(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def from_bytes(blob: bytes, source="<bytes>") -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError(f"{source}: truncated header")
    try:
        hlen = int(rest[:nl])
        header = json.loads(rest[nl + 1:nl + 1 + hlen])
    except (ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {header.get('format_version')!r}")
    data = rest[nl + 1 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * _DTYPE.itemsize
        off, n = entry["offset"], entry["nbytes"]
        if n != expected or off + n > len(data):
            raise FormatError(f"{source}: array {entry['name']} is truncated or mis-sized")
        arrays[entry["name"]] = np.frombuffer(data, dtype=_DTYPE, count=n // 4, offset=off).reshape(shape).astype(np.float32)
    end = max((e["offset"] + e["nbytes"] for e in header["arrays"]), default=0)
    if end != len(data):
        raise FormatError(f"{source}: {len(data) - end} trailing bytes after array data")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    optimizer = {}
    for name, meta in header["optimizer"].items():
        st = OptimizerState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["step"])
        if f"adam_m/{name}" in arrays:
            st.m[name] = arrays[f"adam_m/{name}"]
            st.v[name] = arrays[f"adam_v/{name}"]
        optimizer[name] = st
    return Checkpoint(header["config"], header["layout"], header["iteration"], params,
                      optimizer, header["rng_state"], header["format_version"])


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob, str(path))
