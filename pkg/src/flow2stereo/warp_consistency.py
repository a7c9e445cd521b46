"""Backward warping and forward-backward confidence estimation.

Confidence masks are 1 where a correspondence is considered reliable: the
forward flow's landing point is inside the frame and the backward flow sampled
there roughly cancels the forward flow. Pixels failing the check are treated
as occluded or mismatched and excluded from the losses.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from . import _interp
from .field_core import Image, Mask


@dataclass(frozen=True)
class ConsistencyConfig:
    """Forward-backward gating |wf + wb|^2 < alpha1 (|wf|^2 + |wb|^2) + alpha2.

    nearest=True samples the backward flow at the rounded landing pixel
    instead of bilinearly at the sub-pixel point.
    """

    alpha1: float = 0.01
    alpha2: float = 0.5
    nearest: bool = False


def warp_backward(img, flow):
    """Sample img at p + flow(p) for every pixel p.

    img may be an Image or a raw (H, W) / (H, W, C) array; flow is (H, W, 2).
    Returns (warped array, inbounds Mask); out-of-frame samples are border
    clamped and flagged 0 in the mask.
    """
    data = img.data if isinstance(img, Image) else np.asarray(img, np.float64)
    flow = flow if isinstance(flow, np.ndarray) else np.asarray(flow.data, np.float64)
    h, w = data.shape[:2]
    xs, ys = _interp.grid_coords(h, w)
    px = xs + flow[:, :, 0]
    py = ys + flow[:, :, 1]
    aux = _interp.bilinear_aux(px, py, h, w)
    warped = _interp.sample(data, aux)
    inb = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    return warped, Mask(inb)


def fb_consistency(flow_fwd, flow_bwd, cfg: ConsistencyConfig = ConsistencyConfig()) -> Mask:
    """Forward-backward confidence mask for a directed flow field."""
    wf = flow_fwd if isinstance(flow_fwd, np.ndarray) else np.asarray(flow_fwd.data, np.float64)
    wb = flow_bwd if isinstance(flow_bwd, np.ndarray) else np.asarray(flow_bwd.data, np.float64)
    h, w = wf.shape[:2]
    xs, ys = _interp.grid_coords(h, w)
    px = xs + wf[:, :, 0]
    py = ys + wf[:, :, 1]
    if cfg.nearest:
        nx = np.clip(np.floor(px + 0.5).astype(np.intp), 0, w - 1)
        ny = np.clip(np.floor(py + 0.5).astype(np.intp), 0, h - 1)
        wb_at = wb[ny, nx]
    else:
        aux = _interp.bilinear_aux(px, py, h, w)
        wb_at = _interp.sample(wb, aux)
    diff2 = ((wf + wb_at) ** 2).sum(axis=-1)
    bound = cfg.alpha1 * ((wf ** 2).sum(axis=-1) + (wb_at ** 2).sum(axis=-1)) + cfg.alpha2
    inb = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    return Mask((diff2 < bound) & inb)


def quad_confidence(m12: Mask, m13: Mask, m14: Mask) -> Mask:
    """Quadrilateral gate: confident only where all three anchor maps agree."""
    return Mask(m12.data & m13.data & m14.data)


def tri_confidence(m_step: Mask, m_diag: Mask) -> Mask:
    """Triangle gate for one route: the stepping-stone and diagonal maps."""
    return Mask(m_step.data & m_diag.data)


def all_confidences(fields: dict, cfg: ConsistencyConfig = ConsistencyConfig()) -> dict:
    """fb_consistency for every ordered pair in a 12-field bundle."""
    return {(i, j): fb_consistency(fields[(i, j)], fields[(j, i)], cfg)
            for (i, j) in fields}


def save_mask_png(path, mask: Mask) -> None:
    """Write a confidence mask as a 1-bit PNG."""
    PILImage.fromarray(mask.bool).convert("1").save(str(path), format="PNG")


def load_mask_png(path) -> Mask:
    arr = np.array(PILImage.open(str(path)))
    return Mask(arr.astype(bool))
