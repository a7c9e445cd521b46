"""KITTI-format flow and disparity codecs, flow colorization, and metrics.

Flow PNGs are 16-bit RGB: stored = component * 64 + 2**15 in R (u) and G (v),
validity in B. Disparity PNGs are 16-bit single channel: stored = d * 256
rounded, 0 meaning invalid. Values outside the representable range raise
instead of wrapping.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

_FLOW_OFFSET = 2 ** 15
_FLOW_SCALE = 64.0
_DISP_SCALE = 256.0


def encode_flow(flow: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Encode an (H, W, 2) flow into a uint16 (H, W, 3) RGB array."""
    flow = np.asarray(flow, np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    if valid is None:
        valid = np.ones(flow.shape[:2], bool)
    valid = np.asarray(valid).astype(bool)
    stored = np.round(flow * _FLOW_SCALE) + _FLOW_OFFSET
    if stored.min() < 0 or stored.max() > 65535:
        raise ValueError("flow magnitude out of the encodable range (|value| < 512)")
    out = np.zeros(flow.shape[:2] + (3,), np.uint16)
    out[:, :, 0] = stored[:, :, 0].astype(np.uint16)
    out[:, :, 1] = stored[:, :, 1].astype(np.uint16)
    out[:, :, 2] = valid.astype(np.uint16)
    return out


def decode_flow(png: np.ndarray):
    """Decode a uint16 (H, W, 3) array into (flow (H, W, 2), valid bool)."""
    png = np.asarray(png)
    if png.ndim != 3 or png.shape[2] != 3 or png.dtype != np.uint16:
        raise ValueError("encoded flow must be a uint16 (H, W, 3) array")
    valid = png[:, :, 2] > 0
    flow = (png[:, :, :2].astype(np.float64) - _FLOW_OFFSET) / _FLOW_SCALE
    flow[~valid] = 0.0
    return flow, valid


def encode_disparity(disp: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Encode an (H, W) disparity into a uint16 array; invalid pixels store 0."""
    disp = np.asarray(disp, np.float64)
    if disp.ndim != 2:
        raise ValueError(f"disparity must be 2-D, got {disp.shape}")
    if valid is None:
        valid = np.ones(disp.shape, bool)
    valid = np.asarray(valid).astype(bool)
    if disp.min() < 0:
        raise ValueError("disparity must be non-negative")
    stored = np.round(disp * _DISP_SCALE)
    if stored.max() > 65535:
        raise ValueError("disparity out of the encodable range (d < 256)")
    out = np.where(valid, stored, 0.0).astype(np.uint16)
    return out


def decode_disparity(png: np.ndarray):
    """Decode a uint16 (H, W) array into (disparity, valid bool)."""
    png = np.asarray(png)
    if png.ndim != 2 or png.dtype != np.uint16:
        raise ValueError("encoded disparity must be a uint16 (H, W) array")
    valid = png > 0
    return png.astype(np.float64) / _DISP_SCALE, valid


def write_flow_png(path, flow: np.ndarray, valid: np.ndarray | None = None) -> None:
    enc = encode_flow(flow, valid)
    if not cv2.imwrite(str(path), enc[:, :, ::-1]):  # RGB -> BGR on disk
        raise IOError(f"cannot write flow png: {path}")


def read_flow_png(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read flow png: {path}")
    return decode_flow(raw[:, :, ::-1])


def write_disparity_png(path, disp: np.ndarray, valid: np.ndarray | None = None) -> None:
    if not cv2.imwrite(str(path), encode_disparity(disp, valid)):
        raise IOError(f"cannot write disparity png: {path}")


def read_disparity_png(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read disparity png: {path}")
    return decode_disparity(raw)


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Direction-as-hue colorization, uint8 RGB. Zero flow maps to white.

    Hue encodes atan2(v, u), saturation the magnitude over max_mag (clamped),
    value is 1. max_mag defaults to the field's maximum magnitude.
    """
    flow = np.asarray(flow, np.float64)
    u, v = flow[:, :, 0], flow[:, :, 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max())
    if max_mag <= 0:
        max_mag = 1.0
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    # inline HSV -> RGB with value fixed at 1
    k = hue * 6.0
    i = np.floor(k).astype(int) % 6
    f = k - np.floor(k)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    lut_r = np.choose(i, [one, q, p, p, t, one])
    lut_g = np.choose(i, [t, one, one, q, p, p])
    lut_b = np.choose(i, [p, p, t, one, one, q])
    rgb = np.stack([lut_r, lut_g, lut_b], axis=-1)
    return np.round(rgb * 255.0).astype(np.uint8)


@dataclass
class MetricsReport:
    """EPE / outlier-fraction metrics per region split.

    Splits with no pixels report None. fl_* is populated for flow, d1_* for
    disparity; the err >= 3 px and err >= 5% of GT magnitude rule is shared.
    """

    kind: str
    n_all: int = 0
    n_noc: int = 0
    n_occ: int = 0
    epe_all: float | None = None
    epe_noc: float | None = None
    epe_occ: float | None = None
    fl_all: float | None = None
    fl_noc: float | None = None
    fl_occ: float | None = None
    d1_all: float | None = None
    d1_noc: float | None = None
    d1_occ: float | None = None
    extra: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"kind": self.kind, "n_all": self.n_all, "n_noc": self.n_noc,
               "n_occ": self.n_occ}
        for name in ("epe_all", "epe_noc", "epe_occ", "fl_all", "fl_noc",
                     "fl_occ", "d1_all", "d1_noc", "d1_occ"):
            row[name] = getattr(self, name)
        return row


def _erroneous(err: np.ndarray, gt_mag: np.ndarray) -> np.ndarray:
    return (err >= 3.0) & (err >= 0.05 * gt_mag)


def _split_stats(err, gt_mag, sel):
    n = int(sel.sum())
    if n == 0:
        return 0, None, None
    e = err[sel]
    return n, float(e.mean()), float(_erroneous(e, gt_mag[sel]).mean())


def evaluate_flow(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray,
                  noc: np.ndarray | None = None) -> MetricsReport:
    """Flow EPE and Fl outlier fraction over all / noc / occ splits.

    valid selects pixels with ground truth; noc marks the non-occluded subset.
    The occ split is valid and not noc.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    valid = np.asarray(valid).astype(bool)
    err = np.hypot(*(pred - gt).transpose(2, 0, 1))
    gt_mag = np.hypot(gt[:, :, 0], gt[:, :, 1])
    rep = MetricsReport(kind="flow")
    rep.n_all, rep.epe_all, rep.fl_all = _split_stats(err, gt_mag, valid)
    if noc is not None:
        noc = np.asarray(noc).astype(bool)
        rep.n_noc, rep.epe_noc, rep.fl_noc = _split_stats(err, gt_mag, valid & noc)
        rep.n_occ, rep.epe_occ, rep.fl_occ = _split_stats(err, gt_mag, valid & ~noc)
    return rep


def evaluate_disparity(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray,
                       noc: np.ndarray | None = None) -> MetricsReport:
    """Disparity EPE and D1 outlier fraction over all / noc / occ splits."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    valid = np.asarray(valid).astype(bool)
    err = np.abs(pred - gt)
    gt_mag = np.abs(gt)
    rep = MetricsReport(kind="disparity")
    rep.n_all, rep.epe_all, rep.d1_all = _split_stats(err, gt_mag, valid)
    if noc is not None:
        noc = np.asarray(noc).astype(bool)
        rep.n_noc, rep.epe_noc, rep.d1_noc = _split_stats(err, gt_mag, valid & noc)
        rep.n_occ, rep.epe_occ, rep.d1_occ = _split_stats(err, gt_mag, valid & ~noc)
    return rep
