#!/usr/bin/env python3
"""
Tensor Container and KITTI File I/O
-----------------------------------
One binary container for every tensor the repo persists (range images,
camera images, semantic and depth maps), plus the KITTI-style formats
used for interchange:

- `.vten` container: magic, version, dtype code, shape, optional JSON
  metadata, row-major little-endian payload
- KITTI velodyne `.bin`: float32 records (x, y, z, intensity), no header
- KITTI-style calibration text: `K_<view>: 12 floats`, `T_<view>: 16 floats`
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

MAGIC = b"VTEN"
VERSION = 1

# dtype code <-> little-endian numpy dtype
_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("<u1"),
    6: np.dtype("<i2"),
}
_CODES = {dt: code for code, dt in _DTYPES.items()}

# magic, version, dtype code, ndim, metadata length
_HEADER = struct.Struct("<4sHBBI")


class ContainerError(ValueError):
    """Raised for malformed or unsupported tensor containers."""


def encode_tensor(array: np.ndarray, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    """Serialize an array (and optional JSON metadata) into container bytes"""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _CODES:
        raise ContainerError(f"Unsupported dtype for container: {array.dtype}")

    meta = b""
    if metadata:
        meta = json.dumps(metadata, sort_keys=True).encode("utf-8")

    header = _HEADER.pack(MAGIC, VERSION, _CODES[dtype], array.ndim, len(meta))
    shape = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=dtype).tobytes(order="C")
    return header + shape + meta + payload


def decode_tensor(blob: bytes) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Parse container bytes back into (array, metadata)"""
    if len(blob) < _HEADER.size:
        raise ContainerError("Truncated container header")

    magic, version, code, ndim, meta_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContainerError(f"Bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerError(f"Unsupported container version {version}")
    if code not in _DTYPES:
        raise ContainerError(f"Unknown dtype code {code}")

    offset = _HEADER.size
    shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim

    metadata: Dict[str, Any] = {}
    if meta_len:
        metadata = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len

    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise ContainerError(
            f"Payload size {len(payload)} does not match shape {tuple(shape)} ({expected} bytes)"
        )

    array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return array, metadata


def save_tensor(path: Path, array: np.ndarray, metadata: Optional[Dict[str, Any]] = None) -> None:
    Path(path).write_bytes(encode_tensor(array, metadata))


def load_tensor(path: Path) -> Tuple[np.ndarray, Dict[str, Any]]:
    return decode_tensor(Path(path).read_bytes())


def file_md5(path: Path) -> str:
    """MD5 of a file's bytes, used for manifests and provenance"""
    digest = hashlib.md5()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ==================== KITTI Formats ====================

def read_kitti_bin(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a KITTI velodyne scan -> (points [N, 3] float64, intensity [N] float32)"""
    scan = np.fromfile(path, dtype="<f4")
    if scan.size % 4:
        raise ContainerError(f"{path}: size is not a multiple of 4 float32 values")
    scan = scan.reshape(-1, 4)
    return scan[:, :3].astype(np.float64), scan[:, 3].astype(np.float32)


def write_kitti_bin(path: Path, points: np.ndarray, intensity: np.ndarray) -> None:
    records = np.empty((len(points), 4), dtype="<f4")
    records[:, :3] = points
    records[:, 3] = intensity
    records.tofile(path)


def format_matrix(matrix: np.ndarray) -> str:
    """Whitespace-separated row-major floats (KITTI calib style)"""
    return " ".join(repr(float(x)) for x in np.asarray(matrix, dtype=np.float64).ravel())


def parse_matrix(text: str, shape: Tuple[int, int]) -> np.ndarray:
    values = [float(x) for x in text.split()]
    if len(values) != shape[0] * shape[1]:
        raise ContainerError(f"Expected {shape[0] * shape[1]} floats, got {len(values)}")
    return np.array(values, dtype=np.float64).reshape(shape)


def write_calib(path: Path, calibrations: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> None:
    """Write `K_<view>` (3x4) and `T_<view>` (4x4) lines for every view"""
    lines = []
    for name, (K, T) in calibrations.items():
        lines.append(f"K_{name}: {format_matrix(K)}")
        lines.append(f"T_{name}: {format_matrix(T)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_calib(path: Path) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Parse a calibration file written by `write_calib`.

    Plain KITTI files are accepted too: `P2` is read as the intrinsic of a
    view named `P2`, and `Tr`/`Tr_velo_to_cam` (12 floats) as its extrinsic.
    """
    entries: Dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, value = line.split(":", 1)
        entries[key.strip()] = value.strip()

    calibrations: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for key, value in entries.items():
        if key.startswith("K_"):
            name = key[2:]
            if f"T_{name}" not in entries:
                raise ContainerError(f"{path}: missing T_{name} for K_{name}")
            calibrations[name] = (
                parse_matrix(value, (3, 4)),
                parse_matrix(entries[f"T_{name}"], (4, 4)),
            )

    if not calibrations and "P2" in entries:
        tr_key = "Tr_velo_to_cam" if "Tr_velo_to_cam" in entries else "Tr"
        if tr_key not in entries:
            raise ContainerError(f"{path}: KITTI calib without Tr / Tr_velo_to_cam")
        T = np.eye(4)
        T[:3, :] = parse_matrix(entries[tr_key], (3, 4))
        if "R0_rect" in entries:
            R0 = np.eye(4)
            R0[:3, :3] = parse_matrix(entries["R0_rect"], (3, 3))
            T = R0 @ T
        calibrations["P2"] = (parse_matrix(entries["P2"], (3, 4)), T)

    if not calibrations:
        raise ContainerError(f"{path}: no calibration entries found")
    return calibrations
