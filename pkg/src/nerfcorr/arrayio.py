"""On-disk formats: named-array container, PNG/PPM images, depth maps.

The container is a single file: magic, version, a JSON manifest (array
names, shapes, dtypes, offsets, plus arbitrary metadata) and a raw payload
of row-major little-endian arrays. Fixed little-endian layout keeps files
portable across platforms.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

_MAGIC = b"NACF"
_VERSION = 1

# dtype tag -> little-endian numpy dtype
_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
}


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write ``name -> ndarray`` plus a JSON ``meta`` block to ``path``."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = next((t for t, d in _DTYPES.items() if np.dtype(d).base == arr.dtype.base), None)
        if tag is None:
            tag = "float32"
            arr = arr.astype(np.float32)
        blob = np.ascontiguousarray(arr).astype(_DTYPES[tag]).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"version": _VERSION, "meta": meta or {}, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_arrays(path):
    """Read a container written by :func:`save_arrays`.

    Returns (arrays, meta) with native-endian ndarrays.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a named-array container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for e in manifest["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("=")).copy()
    return arrays, manifest["meta"]


def write_image(path, image) -> None:
    """Write an HxW or HxWx3 image as 8-bit PNG (PPM fallback).

    Float input is clipped to [0, 1] and quantized; uint8 passes through.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    try:
        from PIL import Image
    except ImportError:
        _write_ppm(path.with_suffix(".ppm"), img)
        return
    mode = "L" if img.ndim == 2 else "RGB"
    Image.fromarray(img, mode=mode).save(path)


def _write_ppm(path, img: np.ndarray) -> None:
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_depth(path, depth) -> None:
    """Write a depth map as float32 binary with a JSON header."""
    depth = np.asarray(depth, dtype=np.float32)
    header = json.dumps({"shape": list(depth.shape), "dtype": "<f4"}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(depth).astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        data = np.frombuffer(f.read(), dtype=header["dtype"])
    return data.reshape(header["shape"]).astype(np.float32)
