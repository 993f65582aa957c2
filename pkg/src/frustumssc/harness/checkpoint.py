"""Versioned binary checkpoints.

Layout: magic, schema version, config digest, a JSON metadata blob (includes
the full config and training progress), then (name, dtype, shape, raw
little-endian data) records for parameters, buffers, and optimizer moments.
"""

import json
import struct

import numpy as np

from ..errors import ConfigError, ContractError

MAGIC = b"FSSCKPT"
SCHEMA_VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_record(f, name, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_record(f):
    raw = f.read(2)
    if not raw:
        return None
    (nlen,) = struct.unpack("<H", raw)
    name = f.read(nlen).decode("utf-8")
    code, ndim = struct.unpack("<BB", f.read(2))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype.newbyteorder("<"))
    return name, data.astype(dtype).reshape(shape)


def save_checkpoint(path, state, meta, digest, opt_state=None):
    """state: name -> ndarray (params and buffers); opt_state: name -> ndarray."""
    meta_json = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", SCHEMA_VERSION))
        f.write(digest.encode("ascii"))
        f.write(struct.pack("<I", len(meta_json)))
        f.write(meta_json)
        names = sorted(state)
        opt_names = sorted(opt_state) if opt_state else []
        f.write(struct.pack("<II", len(names), len(opt_names)))
        for name in names:
            _write_record(f, name, state[name])
        for name in opt_names:
            _write_record(f, name, opt_state[name])


def load_checkpoint(path, expected_digest=None, force=False):
    """Returns (state, opt_state, meta). Refuses a digest mismatch unless
    force is set."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ContractError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", f.read(2))
        if version != SCHEMA_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint schema {version}")
        digest = f.read(64).decode("ascii")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        n_state, n_opt = struct.unpack("<II", f.read(8))
        state = dict(_read_record(f) for _ in range(n_state))
        opt_state = dict(_read_record(f) for _ in range(n_opt))
    if expected_digest is not None and digest != expected_digest and not force:
        raise ConfigError(
            f"{path}: config digest mismatch (checkpoint {digest[:12]}..., "
            f"expected {expected_digest[:12]}...); pass force to override"
        )
    return state, opt_state, meta
