"""Deterministic on-disk array storage.

Checkpoints and exported samples are written as a plain text header
followed by raw row-major array bytes. Unlike pickle- or zip-based
formats, identical arrays always produce identical files, which makes
byte-level reproducibility checks possible.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

_MAGIC = "JNFARRAYS 1"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to a single file with deterministic bytes.

    Arrays are stored in sorted-name order; the header records name,
    dtype and shape for each entry.
    """
    path = Path(path)
    names = sorted(arrays)
    header = io.StringIO()
    header.write(f"{_MAGIC}\n")
    header.write(f"count={len(names)}\n")
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if "\n" in name or " " in name:
            raise ValueError(f"array name {name!r} must not contain spaces or newlines")
        shape = ",".join(str(s) for s in arr.shape)
        header.write(f"{name} {arr.dtype.str} {shape}\n")
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read a file written by :func:`save_arrays`."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    head_end = raw.index(b"end\n") + len(b"end\n")
    lines = raw[:head_end].decode("ascii").splitlines()
    if lines[0] != _MAGIC:
        raise ValueError(f"{path} is not an array container")
    count = int(lines[1].split("=", 1)[1])
    out: dict[str, np.ndarray] = {}
    offset = head_end
    for line in lines[2 : 2 + count]:
        name, dtype_str, shape_str = line.split(" ")
        shape = tuple(int(s) for s in shape_str.split(",") if s != "")
        dtype = np.dtype(dtype_str)
        n_items = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dtype, count=n_items, offset=offset)
        out[name] = arr.reshape(shape).copy()
        offset += dtype.itemsize * n_items
    return out


def save_raw(path: str | Path, arr: np.ndarray) -> tuple[str, str]:
    """Write one array as bare row-major bytes; return (dtype, shape) strings."""
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    return arr.dtype.str, ",".join(str(s) for s in arr.shape)


def load_raw(path: str | Path, dtype: str, shape: str) -> np.ndarray:
    """Read an array written by :func:`save_raw` given its manifest entry."""
    shp = tuple(int(s) for s in shape.split(",") if s != "")
    data = np.fromfile(str(path), dtype=np.dtype(dtype))
    return data.reshape(shp)


def write_manifest(path: str | Path, entries: dict[str, str]) -> None:
    """Write a key=value manifest, keys sorted for stable bytes."""
    with open(path, "w", encoding="ascii") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            out[key] = value
    return out
