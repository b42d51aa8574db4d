"""Deterministic npz containers with a JSON header entry."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def write_npz(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> Path:
    """Uncompressed npz with sorted entries and fixed timestamps.

    Identical inputs give identical bytes.
    """
    path = Path(path)
    arrays = dict(arrays)
    if header is not None:
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE), buf.getvalue())
    return path


def read_npz(path) -> tuple[dict, dict[str, np.ndarray]]:
    """(header, arrays) from a file written by :func:`write_npz`."""
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    raw = arrays.pop("__header__", None)
    header = json.loads(bytes(raw).decode()) if raw is not None else {}
    return header, arrays
