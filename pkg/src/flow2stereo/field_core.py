"""Core image and field containers plus resampling operations.

All pixel data is float64. Images hold values in [0, 1], row-major, with
pixel centers at integer coordinates. Flow fields store (u, v) displacement
in pixels along the last axis.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np

from . import _interp

_RAW_MAGIC = b"F2SR"
_RAW_DTYPE = b"<f8 "


def _freeze(obj, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True)
class Image:
    """Grayscale or multi-channel image, float64 values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, np.float64)
        if data.ndim not in (2, 3):
            raise ValueError(f"image must be 2-D or 3-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        _freeze(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field, (H, W, 2) with (u, v) on the last axis."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("flow contains non-finite values")
        _freeze(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.data[:, :, 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[:, :, 1]


@dataclass(frozen=True)
class DisparityField:
    """Dense non-negative disparity, (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, np.float64)
        if data.ndim != 2:
            raise ValueError(f"disparity must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("disparity contains non-finite values")
        if data.min() < 0.0:
            raise ValueError("disparity must be non-negative")
        _freeze(self, "data", data)


@dataclass(frozen=True)
class Mask:
    """Per-pixel mask with values in {0, 1}, stored uint8."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {data.shape}")
        if data.dtype == bool:
            data = data.astype(np.uint8)
        else:
            data = np.asarray(data)
            vals = np.unique(data)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        _freeze(self, "data", data)

    @property
    def bool(self) -> np.ndarray:
        return self.data.astype(np.bool_)

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class Pyramid:
    """Coarse-to-fine stack; level 0 is the finest."""

    levels: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]


def grayscale(img: Image) -> Image:
    """Luma conversion with weights 0.299 R + 0.587 G + 0.114 B."""
    if img.data.ndim == 2:
        return img
    if img.data.shape[2] != 3:
        raise ValueError("grayscale conversion expects a 3-channel image")
    w = np.array([0.299, 0.587, 0.114])
    return Image(np.clip(img.data @ w, 0.0, 1.0))


def bilinear_sample(img: Image, x, y) -> np.ndarray:
    """Sample image values at positions (x, y) with border clamping.

    Returns an array shaped like x for single-channel images, or with a
    trailing channel axis otherwise.
    """
    aux = _interp.bilinear_aux(x, y, img.height, img.width)
    return _interp.sample(img.data, aux)


def box_down2(arr: np.ndarray) -> np.ndarray:
    """2x2 box average with ceil(dim / 2) output; odd edges average what exists."""
    h, w = arr.shape[:2]
    row_idx = np.arange(0, h, 2)
    col_idx = np.arange(0, w, 2)
    summed = np.add.reduceat(np.add.reduceat(arr, row_idx, axis=0), col_idx, axis=1)
    rcount = np.minimum(row_idx + 2, h) - row_idx
    ccount = np.minimum(col_idx + 2, w) - col_idx
    counts = np.multiply.outer(rcount, ccount).astype(np.float64)
    if arr.ndim == 3:
        counts = counts[:, :, None]
    return summed / counts


def downsample2(img: Image) -> Image:
    """Halve an image by 2x2 box averaging."""
    return Image(box_down2(img.data))


def build_pyramid(img: Image, levels: int) -> Pyramid:
    """Image pyramid; level k has dims ceil(level0 / 2**k)."""
    if levels < 1:
        raise ValueError("pyramid needs at least one level")
    out = [img]
    for _ in range(levels - 1):
        out.append(downsample2(out[-1]))
    return Pyramid(tuple(out))


def resample_bilinear(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Resize by bilinear interpolation with source position dst * (old / new).

    The origin-aligned mapping reproduces source lattice values exactly at
    integer scale factors (target (2i, 2j) reads source (i, j)).
    """
    h, w = arr.shape[:2]
    xs = np.arange(new_w, dtype=np.float64) * (w / new_w)
    ys = np.arange(new_h, dtype=np.float64) * (h / new_h)
    xg, yg = np.meshgrid(xs, ys)
    aux = _interp.bilinear_aux(xg, yg, h, w)
    return _interp.sample(arr, aux)


def upsample_flow(flow: FlowField, new_h: int, new_w: int) -> FlowField:
    """Bilinearly upsample a flow field and rescale its displacement values.

    u is multiplied by new_w / W and v by new_h / H so the displacements stay
    meaningful in the units of the target grid.
    """
    res = resample_bilinear(flow.data, new_h, new_w)
    res[:, :, 0] *= new_w / flow.width
    res[:, :, 1] *= new_h / flow.height
    return FlowField(res)


def load_png(path) -> Image:
    """Read an 8-bit PNG as float64 in [0, 1] (v / 255)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read image: {path}")
    if raw.dtype != np.uint8:
        raise ValueError(f"expected an 8-bit PNG, got dtype {raw.dtype}: {path}")
    if raw.ndim == 3:
        raw = raw[:, :, ::-1]  # BGR -> RGB
    return Image(raw.astype(np.float64) / 255.0)


def save_png(path, img: Image) -> None:
    """Write an image as 8-bit PNG, values quantized by round(v * 255)."""
    data = np.round(img.data * 255.0).astype(np.uint8)
    if data.ndim == 3:
        data = data[:, :, ::-1]
    if not cv2.imwrite(str(path), data):
        raise IOError(f"cannot write image: {path}")


def save_raw(path, arr: np.ndarray) -> None:
    """Dump a float64 array as magic + u32 dims (H, W, C) + little-endian data."""
    arr = np.asarray(arr, np.float64)
    if arr.ndim == 2:
        h, w = arr.shape
        c = 1
    elif arr.ndim == 3:
        h, w, c = arr.shape
    else:
        raise ValueError(f"raw dump expects 2-D or 3-D data, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(_RAW_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(_RAW_DTYPE)
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_raw(path) -> np.ndarray:
    """Read a raw dump written by save_raw; returns (H, W) or (H, W, C)."""
    with open(path, "rb") as f:
        blob = f.read()
    header = len(_RAW_MAGIC) + 12 + len(_RAW_DTYPE)
    if len(blob) < header or blob[:4] != _RAW_MAGIC:
        raise ValueError(f"not a raw field dump: {path}")
    h, w, c = struct.unpack("<III", blob[4:16])
    if blob[16:20] != _RAW_DTYPE:
        raise ValueError(f"unsupported raw dtype tag: {blob[16:20]!r}")
    data = np.frombuffer(blob[header:], dtype="<f8")
    if data.size != h * w * c:
        raise ValueError(f"raw dump payload size mismatch: {path}")
    arr = data.reshape(h, w, c).astype(np.float64)
    return arr[:, :, 0] if c == 1 else arr


def pyramid_dims(height: int, width: int, levels: int) -> Sequence[tuple]:
    """Dims per level, level 0 finest: ceil(dim / 2**k)."""
    dims = []
    h, w = height, width
    for _ in range(levels):
        dims.append((h, w))
        h = -(-h // 2)
        w = -(-w // 2)
    return dims
