"""Bilinear sampling and robust-penalty primitives shared by warp and loss code.

Everything here operates on raw float64 arrays; the typed wrappers live in
field_core. Positions follow image convention: x is the column coordinate,
y the row, pixel centers at integer coordinates. Out-of-range positions are
clamped to the border, and the position derivative is zero there.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class BilinearAux(NamedTuple):
    """Corner indices, fractional weights and in-range flags for sample positions."""

    y0: np.ndarray
    x0: np.ndarray
    y1: np.ndarray
    x1: np.ndarray
    fy: np.ndarray
    fx: np.ndarray
    gx_ok: np.ndarray
    gy_ok: np.ndarray


def bilinear_aux(x, y, height: int, width: int) -> BilinearAux:
    """Precompute interpolation corners for positions (x, y) on an HxW grid."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    xc = np.clip(x, 0.0, width - 1.0)
    yc = np.clip(y, 0.0, height - 1.0)
    # keep x0+1 a valid column so every sample touches a full 2x2 cell
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = xc - x0
    fy = yc - y0
    gx_ok = ((x >= 0.0) & (x <= width - 1.0)).astype(np.float64)
    gy_ok = ((y >= 0.0) & (y <= height - 1.0)).astype(np.float64)
    return BilinearAux(y0, x0, y1, x1, fy, fx, gx_ok, gy_ok)


def _corners(arr: np.ndarray, aux: BilinearAux):
    a00 = arr[aux.y0, aux.x0]
    a01 = arr[aux.y0, aux.x1]
    a10 = arr[aux.y1, aux.x0]
    a11 = arr[aux.y1, aux.x1]
    return a00, a01, a10, a11


def _bcast(aux: BilinearAux, channelled: bool):
    if channelled:
        return aux.fx[..., None], aux.fy[..., None], aux.gx_ok[..., None], aux.gy_ok[..., None]
    return aux.fx, aux.fy, aux.gx_ok, aux.gy_ok


def sample(arr: np.ndarray, aux: BilinearAux) -> np.ndarray:
    """Bilinear sample of an (H, W) or (H, W, C) array at the aux positions."""
    a00, a01, a10, a11 = _corners(arr, aux)
    fx, fy, _, _ = _bcast(aux, arr.ndim == 3)
    top = a00 + (a01 - a00) * fx
    bot = a10 + (a11 - a10) * fx
    return top + (bot - top) * fy


def sample_with_grad(arr: np.ndarray, aux: BilinearAux):
    """Sample plus derivatives of the value w.r.t. the x and y position.

    Returns (value, dvalue_dx, dvalue_dy), each (H, W) or (H, W, C) matching
    arr's channel layout. Derivatives are zero where the position was clamped.
    """
    a00, a01, a10, a11 = _corners(arr, aux)
    fx, fy, gx_ok, gy_ok = _bcast(aux, arr.ndim == 3)
    top = a00 + (a01 - a00) * fx
    bot = a10 + (a11 - a10) * fx
    val = top + (bot - top) * fy
    dx = ((a01 - a00) + ((a11 - a10) - (a01 - a00)) * fy) * gx_ok
    dy = (bot - top) * gy_ok
    return val, dx, dy


def scatter(grad: np.ndarray, aux: BilinearAux, out: np.ndarray) -> None:
    """Adjoint of sample: accumulate grad into out at the four corners.

    grad must be (H, W) and out a 2-D array. Multi-channel fields scatter one
    channel at a time.
    """
    fx, fy = aux.fx, aux.fy
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    np.add.at(out, (aux.y0, aux.x0), w00 * grad)
    np.add.at(out, (aux.y0, aux.x1), w01 * grad)
    np.add.at(out, (aux.y1, aux.x0), w10 * grad)
    np.add.at(out, (aux.y1, aux.x1), w11 * grad)


def grid_coords(height: int, width: int):
    """Pixel-center coordinate arrays (xs, ys), each (H, W) float64."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def psi(x, eps: float, q: float) -> np.ndarray:
    """Robust penalty (|x| + eps)^q."""
    return (np.abs(x) + eps) ** q


def dpsi(x, eps: float, q: float) -> np.ndarray:
    """Derivative of psi; sign(0) = 0, so the penalty is stationary at zero."""
    x = np.asarray(x, np.float64)
    return q * (np.abs(x) + eps) ** (q - 1.0) * np.sign(x)


def census_offsets(window: int):
    """Neighbour offsets of a window x window census patch, centre excluded."""
    if window < 3 or window % 2 == 0:
        raise ValueError(f"census window must be odd and >= 3, got {window}")
    r = window // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if (dy, dx) != (0, 0)]


def census_transform(img: np.ndarray, window: int, soft_scale: float) -> np.ndarray:
    """Soft census descriptor stack, (H, W, window**2 - 1).

    Channel k holds d_k / sqrt(soft_scale + d_k^2) where d_k is the difference
    between the k-th neighbour (border-clamped) and the centre pixel.
    """
    h, w = img.shape
    offsets = census_offsets(window)
    iy = np.arange(h)[:, None]
    ix = np.arange(w)[None, :]
    out = np.empty((h, w, len(offsets)), np.float64)
    for k, (dy, dx) in enumerate(offsets):
        ny = np.clip(iy + dy, 0, h - 1)
        nx = np.clip(ix + dx, 0, w - 1)
        d = img[ny, nx] - img
        out[:, :, k] = d / np.sqrt(soft_scale + d * d)
    return out
