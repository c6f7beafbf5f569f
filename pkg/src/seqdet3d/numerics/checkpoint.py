"""Binary checkpoint files for parameter stores.

Layout (all little-endian):

    magic   4 bytes  "P2SQ"
    version u32      (currently 1)
    records, in sorted name order, until end of file:
        name_len u32
        name     utf-8 bytes
        rank     u32
        dims     u32 * rank
        data     f64 * prod(dims), C order

Adam state lives in a sibling file `<path>.adam` with the same layout;
its records are "m:<name>" and "v:<name>" per parameter plus a scalar
"__step__" record holding the step counter.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError, TruncatedFileError, VersionMismatchError
from .optim import ParamStore

MAGIC = b"P2SQ"
VERSION = 1

_STEP_KEY = "__step__"


def _write_record(f, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return buf


def _read_records(path: str) -> dict:
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) < 4:
            raise TruncatedFileError(f"{path}: shorter than the magic header")
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != VERSION:
            raise VersionMismatchError(f"{path}: version {version}, supported {VERSION}")
        while True:
            head = f.read(4)
            if len(head) == 0:
                break
            if len(head) < 4:
                raise TruncatedFileError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, path, "record name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path, f"rank of {name!r}"))
            if rank > 4:
                raise FormatError(f"{path}: record {name!r} has rank {rank} > 4")
            dims = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, path, f"dims of {name!r}"))
            count = 1
            for d in dims:
                count *= d
            raw = _read_exact(f, 8 * count, path, f"values of {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    return out


def save_checkpoint(store: ParamStore, path: str):
    """Write parameters to `path` and Adam state to `path + ".adam"`."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in store.names():
            _write_record(f, name, store.params[name].data)
    with open(path + ".adam", "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        records = {_STEP_KEY: np.array(float(store.step_count))}
        for name in store.names():
            m, v = store.moments[name]
            records["m:" + name] = m
            records["v:" + name] = v
        for name in sorted(records):
            _write_record(f, name, records[name])


def load_checkpoint(path: str):
    """Read a checkpoint.

    Returns (params, moments, step_count) where params maps name -> array,
    moments maps name -> (m, v) when the sibling Adam file exists (otherwise
    empty), and step_count is 0 without Adam state.
    """
    params = _read_records(path)
    moments = {}
    step = 0
    adam_path = path + ".adam"
    if os.path.exists(adam_path):
        records = _read_records(adam_path)
        if _STEP_KEY in records:
            step = int(records.pop(_STEP_KEY))
        for name in params:
            m_key, v_key = "m:" + name, "v:" + name
            if m_key not in records or v_key not in records:
                raise FormatError(f"{adam_path}: missing moment records for {name!r}")
            moments[name] = (records[m_key], records[v_key])
    return params, moments, step


def restore(store: ParamStore, path: str):
    """Load a checkpoint into an existing store (shapes must match)."""
    params, moments, step = load_checkpoint(path)
    store.load_state_dict(params)
    if moments:
        for name, (m, v) in moments.items():
            if m.shape != store.params[name].data.shape:
                raise FormatError(
                    f"{path}.adam: moment shape {m.shape} does not match {name!r}")
            store.moments[name] = (m.copy(), v.copy())
        store.step_count = step
