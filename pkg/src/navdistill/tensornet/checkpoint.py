"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"NDCK"
    4       2     uint16 format version (currently 1)
    6       2     uint16 reserved, 0
    8       4     uint32 header length H
    12      H     UTF-8 JSON header
    12+H    P     payload: raw arrays, C order, dtype given per entry ("<f4" or "<f8")
    12+H+P  4     uint32 CRC-32 of bytes [0, 12+H+P)

The header object holds ``fingerprint`` (architecture hash), ``step`` (Adam
step counter), ``metadata`` (free-form JSON) and ``entries``: a list of
``{"name", "kind", "dtype", "shape", "offset", "nbytes"}`` where ``kind`` is
``param``, ``adam_m`` or ``adam_v`` and ``offset`` is relative to the payload
start. Entries appear in parameter order.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from navdistill.tensornet.layers import Module, ParamSet
from navdistill.tensornet.tensor import Tensor

MAGIC = b"NDCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class FingerprintError(CheckpointError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(params: ParamSet, path: str | Path, metadata: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0

    def add(name: str, kind: str, arr: np.ndarray) -> None:
        nonlocal offset
        data = _le(arr)
        raw = data.tobytes()
        entries.append({"name": name, "kind": kind, "dtype": data.dtype.str, "shape": list(data.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in params:
        add(name, "param", p.data)
    for name, _ in params:
        if name in params.m:
            add(name, "adam_m", params.m[name])
            add(name, "adam_v", params.v[name])
    meta = dict(params.metadata)
    meta.update(metadata or {})
    header = json.dumps({"fingerprint": params.fingerprint, "step": params.step, "metadata": meta,
                         "entries": entries}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<HHI", FORMAT_VERSION, 0, len(header)) + header + b"".join(blobs)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> ParamSet:
    """Parse a checkpoint file; nothing is returned unless the whole file verifies."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from None
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, _, hlen = struct.unpack("<HHI", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    payload = raw[12 + hlen:-4]
    params: OrderedDict[str, Tensor] = OrderedDict()
    moments: dict[str, dict[str, np.ndarray]] = {"adam_m": {}, "adam_v": {}}
    for e in header["entries"]:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: entry {e['name']!r} runs past payload")
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        if e["kind"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True)
        elif e["kind"] in moments:
            moments[e["kind"]][e["name"]] = arr
        else:
            raise CheckpointError(f"{path}: unknown entry kind {e['kind']!r}")
    ps = ParamSet(params, fingerprint=header["fingerprint"], metadata=header["metadata"])
    ps.m = moments["adam_m"]
    ps.v = moments["adam_v"]
    ps.step = int(header["step"])
    return ps


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> ParamSet:
    ps = read_checkpoint(path)
    if expected_fingerprint is not None and ps.fingerprint != expected_fingerprint:
        raise FingerprintError(
            f"{path}: architecture fingerprint {ps.fingerprint} does not match expected {expected_fingerprint}")
    return ps


def load_into(module: Module, params: ParamSet) -> ParamSet:
    """Copy checkpoint values into ``module``; returns the module's live ParamSet carrying the optimizer state."""
    if params.fingerprint != module.fingerprint():
        raise FingerprintError(f"architecture fingerprint {params.fingerprint} does not match module {module.fingerprint()}")
    module.load_state_dict(OrderedDict((k, t.data) for k, t in params))
    live = module.paramset()
    live.m = {k: v.copy() for k, v in params.m.items()}
    live.v = {k: v.copy() for k, v in params.v.items()}
    live.step = params.step
    live.metadata = dict(params.metadata)
    return live
