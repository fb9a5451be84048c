"""3D volumes and the ``DFSV`` on-disk container.

Layout (little-endian)::

    magic    4 bytes  b"DFSV"
    version  u16      1
    dtype    u8       1 = f32, 2 = u8
    dims     3 x u32  (z, y, x)
    spacing  3 x f64  mm per axis (z, y, x)
    payload  row-major voxels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DFSV"
VERSION = 1
HEADER = struct.Struct("<4sHB3I3d")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("u1"): 2}


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-d (z, y, x), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def stats(self) -> dict:
        d = self.data.astype(np.float64)
        return {"min": float(d.min()), "max": float(d.max()), "mean": float(d.mean()), "std": float(d.std())}

    def with_data(self, data: np.ndarray, spacing=None) -> "Volume":
        return Volume(data, self.spacing if spacing is None else spacing, dict(self.meta))


def write_volume(path, vol: Volume) -> None:
    data = vol.data
    if data.dtype == np.uint8 or data.dtype == np.bool_:
        arr = data.astype("u1")
    else:
        arr = data.astype("<f4")
    header = HEADER.pack(MAGIC, VERSION, DTYPE_TAGS[arr.dtype], *arr.shape, *vol.spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_volume(path) -> Volume:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise VolumeFormatError(f"{path}: truncated header ({len(head)} of {HEADER.size} bytes)")
        magic, version, tag, z, y, x, sz, sy, sx = HEADER.unpack(head)
        if magic != MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise VolumeFormatError(f"{path}: unsupported format version {version}")
        if tag not in DTYPES:
            raise VolumeFormatError(f"{path}: unknown dtype tag {tag}")
        if min(sz, sy, sx) <= 0:
            raise VolumeFormatError(f"{path}: nonpositive spacing {(sz, sy, sx)}")
        dtype = DTYPES[tag]
        expected = dtype.itemsize * z * y * x
        payload = fh.read()
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(z, y, x).copy()
    if dtype.kind == "f":
        data = data.astype(np.float32)
    return Volume(data, (sz, sy, sx))
