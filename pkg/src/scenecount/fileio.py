"""Binary and text file formats.

Three little-endian binary containers, each with a 4-byte magic and a u32
version:

* ``TNSR`` — one tensor: rank u32, extents u32[rank], float32 data row-major.
* ``DMAP`` — one raster: height u32, width u32, float32 data row-major.
  Used both for density maps and for synthetic images.
* ``ASDM`` — a model checkpoint: a JSON config block followed by named
  ``TNSR`` records.

Plus JSON annotations (``{"width": int, "height": int, "points": [[x, y],
...]}``), CSV dumps, and 8-bit max-scaled PGM exports for eyeballing maps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .density import AnnotationSet
from .errors import DataError

TENSOR_MAGIC = b"TNSR"
DENSITY_MAGIC = b"DMAP"
CHECKPOINT_MAGIC = b"ASDM"
FORMAT_VERSION = 1


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated file while reading {what}")
    return buf


def _check_header(fh, magic: bytes, path) -> None:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")


# ---------------------------------------------------------------------------
# TNSR
# ---------------------------------------------------------------------------

def tensor_record(array: np.ndarray) -> bytes:
    """Serialize one array as a TNSR record (data stored as float32)."""
    arr = np.ascontiguousarray(array)
    header = struct.pack("<4sII", TENSOR_MAGIC, FORMAT_VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + extents + arr.astype("<f4", copy=False).tobytes()


def read_tensor_record(fh, path="<stream>") -> np.ndarray:
    _check_header(fh, TENSOR_MAGIC, path)
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * n, "tensor data"), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_record(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_record(fh, path)


# ---------------------------------------------------------------------------
# DMAP
# ---------------------------------------------------------------------------

def write_density(path, density: np.ndarray) -> None:
    """Write a 2-D raster as a DMAP file (float32)."""
    d = np.asarray(density)
    if d.ndim != 2:
        raise DataError(f"DMAP rasters are 2-D, got shape {d.shape}")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", DENSITY_MAGIC, FORMAT_VERSION, h, w))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def read_density(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_header(fh, DENSITY_MAGIC, path)
        h, w = struct.unpack("<II", _read_exact(fh, 8, "extents"))
        data = np.frombuffer(_read_exact(fh, 4 * h * w, "raster data"), dtype="<f4")
    return data.reshape(h, w).astype(np.float32)


def write_density_csv(path, density: np.ndarray) -> None:
    np.savetxt(path, np.asarray(density), delimiter=",", fmt="%.9g")


def write_density_pgm(path, density: np.ndarray) -> None:
    """8-bit binary PGM, max-scaled so the peak maps to 255."""
    d = np.asarray(density, dtype=np.float64)
    if d.ndim != 2:
        raise DataError(f"PGM export needs a 2-D map, got shape {d.shape}")
    peak = d.max()
    scaled = np.zeros_like(d) if peak <= 0 else d * (255.0 / peak)
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{d.shape[1]} {d.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def write_annotations(path, ann: AnnotationSet) -> None:
    payload = {
        "width": int(ann.width),
        "height": int(ann.height),
        "points": [[float(x), float(y)] for x, y in ann.points],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def read_annotations(path) -> AnnotationSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return AnnotationSet(
            width=int(payload["width"]),
            height=int(payload["height"]),
            points=np.asarray(payload.get("points", []), dtype=np.float64).reshape(-1, 2),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid annotation file ({exc})") from exc


# ---------------------------------------------------------------------------
# ASDM checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a named-tensor checkpoint with an embedded JSON config block."""
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, FORMAT_VERSION, len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(tensor_record(arr))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        _check_header(fh, CHECKPOINT_MAGIC, path)
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config = json.loads(_read_exact(fh, config_len, "config block"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid config block ({exc})") from exc
        (num,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(num):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            tensors[name] = read_tensor_record(fh, path)
    return config, tensors
