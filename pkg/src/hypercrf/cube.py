"""Hyperspectral cube and label-map containers plus their on-disk formats.

HSC cube file:  magic "HSC1", little-endian u32 H, W, B, u32 dtype code
                (0 = 32-bit float), then H*W*B floats, pixel-major with the
                bands of one pixel contiguous.
LBL label file: magic "LBL1", u32 H, W, then H*W u16 labels, 0 = unlabeled.

Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_CUBE_VALUES = 1 << 31


class CubeFormatError(ValueError):
    pass


class BadMagicError(CubeFormatError):
    pass


class TruncatedFileError(CubeFormatError):
    pass


class ExtentOverflowError(CubeFormatError):
    pass


class UnsupportedDtypeError(CubeFormatError):
    pass


@dataclass
class HyperCube:
    """H x W reflectance image with B contiguous spectral bands per pixel."""

    values: np.ndarray  # (H, W, B) float32
    band_wavelengths: np.ndarray | None = None  # optional B wavelengths, meters

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"cube values must be (H, W, B), got {self.values.shape}")
        if self.bands < 1:
            raise ValueError("cube must have at least one band")
        if self.band_wavelengths is not None:
            self.band_wavelengths = np.asarray(self.band_wavelengths, dtype=np.float64)
            if self.band_wavelengths.size != self.bands:
                raise ValueError("one wavelength per band required")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    """Per-pixel class ids (u16); 0 marks an unlabeled pixel."""

    labels: np.ndarray  # (H, W) uint16

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be (H, W), got {self.labels.shape}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def num_classes(self) -> int:
        return int(self.labels.max(initial=0))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ends inside {what} ({len(buf)}/{n} bytes)")
    return buf


def write_cube(cube: HyperCube, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(b"HSC1")
        fh.write(struct.pack("<IIII", cube.height, cube.width, cube.bands, 0))
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def read_cube(path) -> HyperCube:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != b"HSC1":
            raise BadMagicError(f"expected cube magic HSC1, found {magic!r}")
        h, w, b, code = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if code != 0:
            raise UnsupportedDtypeError(f"unknown dtype code {code}")
        n = h * w * b
        if b < 1 or n == 0 or n > MAX_CUBE_VALUES:
            raise ExtentOverflowError(f"unreasonable extents {h}x{w}x{b}")
        payload = _read_exact(fh, 4 * n, "payload")
        extra = fh.read(1)
    if extra:
        raise TruncatedFileError("trailing bytes after declared payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, b)
    return HyperCube(values=values.copy())


def write_labels(labels: LabelMap, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(b"LBL1")
        fh.write(struct.pack("<II", labels.height, labels.width))
        fh.write(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def read_labels(path) -> LabelMap:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != b"LBL1":
            raise BadMagicError(f"expected label magic LBL1, found {magic!r}")
        h, w = struct.unpack("<II", _read_exact(fh, 8, "header"))
        n = h * w
        if n == 0 or n > MAX_CUBE_VALUES:
            raise ExtentOverflowError(f"unreasonable extents {h}x{w}")
        payload = _read_exact(fh, 2 * n, "payload")
        extra = fh.read(1)
    if extra:
        raise TruncatedFileError("trailing bytes after declared payload")
    return LabelMap(np.frombuffer(payload, dtype="<u2").reshape(h, w).copy())
