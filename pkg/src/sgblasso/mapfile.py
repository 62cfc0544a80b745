"""Raw-float map files: one JSON header line followed by little-endian f64
values in row-major ``(rows, cols, channels)`` order."""

import json
from pathlib import Path

import numpy as np


def write_map(path, data, tag=""):
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"map data must be 2-D or 3-D, got {arr.ndim}-D")
    rows, cols, channels = arr.shape
    header = {"rows": rows, "cols": cols, "channels": channels, "dtype": "f64le", "tag": tag}
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)


def read_map(path):
    """Return ``(array of shape (rows, cols, channels), header dict)``."""
    raw = Path(path).read_bytes()
    line, payload = raw.split(b"\n", 1)
    header = json.loads(line)
    if header.get("dtype") != "f64le":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    shape = (header["rows"], header["cols"], header["channels"])
    if len(payload) != 8 * int(np.prod(shape)):
        raise ValueError(f"payload is {len(payload)} bytes, header implies {8 * int(np.prod(shape))}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy(), header


def tsmi_to_map(x, voxel_shape):
    """``(n, v)`` time series to a ``(rows, cols, n)`` image stack."""
    rows, cols = voxel_shape
    return np.asarray(x).T.reshape(rows, cols, -1)


def map_to_tsmi(arr):
    return arr.reshape(-1, arr.shape[-1]).T
