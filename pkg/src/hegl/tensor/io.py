"""Raw little-endian f64 blobs with a JSON shape sidecar."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import numpy as np

PathLike = Union[str, Path]
_LE_F64 = np.dtype("<f8")


def _paths(path: PathLike) -> tuple:
    # append rather than replace suffixes: parameter names such as "patch.w" contain dots
    path = Path(path)
    if path.suffix == ".f64":
        path = path.with_suffix("")
    return path.with_name(path.name + ".f64"), path.with_name(path.name + ".json")


def save_array(path: PathLike, values, meta: Optional[dict] = None) -> Path:
    """Write ``values`` row-major as ``<path>.f64`` plus ``<path>.json``.

    Extra ``meta`` keys are merged into the sidecar.
    """
    arr = np.ascontiguousarray(np.asarray(values, dtype=_LE_F64))
    blob, sidecar = _paths(path)
    blob.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(arr.tobytes(order="C"))
    header = {"shape": list(arr.shape), "dtype": "f64"}
    if meta:
        header.update(meta)
    sidecar.write_text(json.dumps(header, indent=2, sort_keys=True))
    return blob


def load_array(path: PathLike, with_meta: bool = False):
    blob, sidecar = _paths(path)
    header = json.loads(sidecar.read_text())
    if header.get("dtype") != "f64":
        raise ValueError(f"{sidecar}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    arr = np.frombuffer(blob.read_bytes(), dtype=_LE_F64)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ValueError(f"{blob}: {arr.size} values, sidecar shape {shape} needs {expected}")
    arr = arr.reshape(shape).astype(np.float64)
    return (arr, header) if with_meta else arr
