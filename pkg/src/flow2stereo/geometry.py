"""Stereo/flow geometric relations and cross-view consistency residuals.

The four views form a square: 1 = left(t), 2 = right(t), 3 = left(t+1),
4 = right(t+1). Stereo pairs are {1,2} and {3,4}, temporal pairs {1,3} and
{2,4}, diagonals {1,4} and {2,3}. A bundle holds one dense flow field for
every ordered pair.

Residual conventions, anchored at view 1 (other anchors are the symmetric
rotations of the square):

  quadrilateral  res_u = u24(p_r) - u13(p) - u34(p_l1) + u12(p)
                 res_v = v24(p_r) - v13(p)
  triangle       via the stereo neighbour:
                 res_u = u14(p) - u24(p_r) - u12(p),  res_v = v14(p) - v24(p_r)
                 via the temporal neighbour:
                 res_u = u14(p) - u34(p_l1) - u13(p), res_v = v14(p) - v13(p)

with p_r = p + w12(p) and p_l1 = p + w13(p), intermediate fields sampled
bilinearly. The v equations drop the stereo steps, whose vertical component
is zero under rectification.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import cv2
import numpy as np

from . import _interp
from .field_core import FlowField
from .scene_synth import DIRECTIONS, GroundTruth

# anchor view -> (stereo neighbour, temporal neighbour, diagonal)
ANCHOR_LAYOUT = {1: (2, 3, 4), 2: (1, 4, 3), 3: (4, 1, 2), 4: (3, 2, 1)}

STEREO_PAIRS = ((1, 2), (2, 1), (3, 4), (4, 3))

TRI_ROUTES = ("stereo", "temporal")


@dataclass(frozen=True)
class FlowBundle:
    """Flow fields for all 12 ordered view pairs.

    With rectified=True the v component of the four stereo-direction fields
    is forced to zero on construction.
    """

    fields: dict
    rectified: bool = False

    def __post_init__(self):
        missing = [d for d in DIRECTIONS if d not in self.fields]
        if missing:
            raise ValueError(f"bundle is missing directions: {missing}")
        fields = {}
        dims = None
        for d in DIRECTIONS:
            f = self.fields[d]
            if not isinstance(f, FlowField):
                f = FlowField(np.asarray(f, np.float64))
            if dims is None:
                dims = (f.height, f.width)
            elif (f.height, f.width) != dims:
                raise ValueError("bundle fields must share one grid")
            if self.rectified and d in STEREO_PAIRS:
                data = f.data.copy()
                data[:, :, 1] = 0.0
                f = FlowField(data)
            fields[d] = f
        object.__setattr__(self, "fields", fields)

    @property
    def height(self) -> int:
        return self.fields[(1, 2)].height

    @property
    def width(self) -> int:
        return self.fields[(1, 2)].width

    def field(self, i: int, j: int) -> FlowField:
        return self.fields[(i, j)]

    def arrays(self) -> dict:
        """Mutable float64 copies of every field, keyed by direction."""
        return {d: self.fields[d].data.copy() for d in DIRECTIONS}

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowBundle":
        z = np.zeros((height, width, 2))
        return cls({d: z.copy() for d in DIRECTIONS})

    @classmethod
    def from_ground_truth(cls, gt: GroundTruth) -> "FlowBundle":
        return cls(dict(gt.flows))


def _as_arrays(bundle) -> dict:
    if isinstance(bundle, FlowBundle):
        return {d: bundle.fields[d].data for d in DIRECTIONS}
    return bundle


# ---------------------------------------------------------------------------
# pointwise pinhole relations


def flow_from_motion(point, motion, f_prime: float, exact: bool = False):
    """Image displacement of a 3-D point under translation, (u, v).

    point and motion are (..., 3) arrays or 3-tuples (X, Y, Z) / (dX, dY, dZ).
    The default is the first-order model u = f' dX / Z - f' dZ X / Z^2 (and
    the Y analogue); exact=True projects both endpoints instead.
    """
    pt = np.asarray(point, np.float64)
    mv = np.asarray(motion, np.float64)
    x, y, z = pt[..., 0], pt[..., 1], pt[..., 2]
    dx, dy, dz = mv[..., 0], mv[..., 1], mv[..., 2]
    if exact:
        u = f_prime * (x + dx) / (z + dz) - f_prime * x / z
        v = f_prime * (y + dy) / (z + dz) - f_prime * y / z
    else:
        u = f_prime * dx / z - f_prime * dz * x / (z * z)
        v = f_prime * dy / z - f_prime * dz * y / (z * z)
    return np.stack([u, v], axis=-1)


def disparity_from_depth(z, f_prime: float, baseline: float):
    """d = f' B / Z; positive for points in front of the rig."""
    return f_prime * baseline / np.asarray(z, np.float64)


def depth_from_disparity(d, f_prime: float, baseline: float):
    return f_prime * baseline / np.asarray(d, np.float64)


def disparity_change_linearized(z, dz, f_prime: float, baseline: float):
    """First-order disparity change -f' B dZ / Z^2 for a depth step dZ."""
    z = np.asarray(z, np.float64)
    return -f_prime * baseline * np.asarray(dz, np.float64) / (z * z)


def disparity_change_exact(z, dz, f_prime: float, baseline: float):
    z = np.asarray(z, np.float64)
    dz = np.asarray(dz, np.float64)
    return f_prime * baseline / (z + dz) - f_prime * baseline / z


def quad_residual_3d(u_left, u_right, d_t, d_t1):
    """Residual of (u_r - u_l) = d_t - d_(t+1) given flows and disparities."""
    return (np.asarray(u_right, np.float64) - np.asarray(u_left, np.float64)
            - (np.asarray(d_t, np.float64) - np.asarray(d_t1, np.float64)))


# ---------------------------------------------------------------------------
# bundle residuals


@dataclass
class AnchorTerms:
    """Direct and sampled field values for one anchor, with sampling caches."""

    stereo: np.ndarray      # w(a -> s) at p
    temporal: np.ndarray    # w(a -> t) at p
    diagonal: np.ndarray    # w(a -> d) at p
    via_stereo: np.ndarray  # w(s -> d) sampled at p + stereo
    via_temporal: np.ndarray  # w(t -> d) sampled at p + temporal
    aux_stereo: _interp.BilinearAux
    aux_temporal: _interp.BilinearAux
    via_stereo_grad: tuple | None = None
    via_temporal_grad: tuple | None = None


def anchor_terms(bundle, anchor: int, with_grad: bool = False) -> AnchorTerms:
    """Gather every field value the quad/tri residuals at this anchor need."""
    fields = _as_arrays(bundle)
    s, t, d = ANCHOR_LAYOUT[anchor]
    w_s = fields[(anchor, s)]
    w_t = fields[(anchor, t)]
    w_d = fields[(anchor, d)]
    h, w = w_s.shape[:2]
    xs, ys = _interp.grid_coords(h, w)
    aux_s = _interp.bilinear_aux(xs + w_s[:, :, 0], ys + w_s[:, :, 1], h, w)
    aux_t = _interp.bilinear_aux(xs + w_t[:, :, 0], ys + w_t[:, :, 1], h, w)
    a_sd = fields[(s, d)]
    a_td = fields[(t, d)]
    if with_grad:
        av, av_dx, av_dy = _interp.sample_with_grad(a_sd, aux_s)
        bv, bv_dx, bv_dy = _interp.sample_with_grad(a_td, aux_t)
        return AnchorTerms(w_s, w_t, w_d, av, bv, aux_s, aux_t,
                           (av_dx, av_dy), (bv_dx, bv_dy))
    av = _interp.sample(a_sd, aux_s)
    bv = _interp.sample(a_td, aux_t)
    return AnchorTerms(w_s, w_t, w_d, av, bv, aux_s, aux_t)


def quad_residual_from_terms(terms: AnchorTerms) -> np.ndarray:
    res_u = (terms.via_stereo[:, :, 0] - terms.temporal[:, :, 0]
             - terms.via_temporal[:, :, 0] + terms.stereo[:, :, 0])
    res_v = terms.via_stereo[:, :, 1] - terms.temporal[:, :, 1]
    return np.stack([res_u, res_v], axis=-1)


def tri_residual_from_terms(terms: AnchorTerms, route: str) -> np.ndarray:
    if route == "stereo":
        res_u = (terms.diagonal[:, :, 0] - terms.via_stereo[:, :, 0]
                 - terms.stereo[:, :, 0])
        res_v = terms.diagonal[:, :, 1] - terms.via_stereo[:, :, 1]
    elif route == "temporal":
        res_u = (terms.diagonal[:, :, 0] - terms.via_temporal[:, :, 0]
                 - terms.temporal[:, :, 0])
        res_v = terms.diagonal[:, :, 1] - terms.temporal[:, :, 1]
    else:
        raise ValueError(f"unknown triangle route: {route!r}")
    return np.stack([res_u, res_v], axis=-1)


def quad_residual_map(bundle, anchor: int = 1) -> np.ndarray:
    """Dense quadrilateral residual (H, W, 2) for the given anchor view."""
    return quad_residual_from_terms(anchor_terms(bundle, anchor))


def tri_residual_map(bundle, anchor: int = 1, route: str = "stereo") -> np.ndarray:
    """Dense triangle residual (H, W, 2) for the given anchor and route."""
    return tri_residual_from_terms(anchor_terms(bundle, anchor), route)


def quad_residual_motion(bundle, p) -> tuple:
    """Quadrilateral residual (res_u, res_v) at integer pixel p = (x, y) of view 1."""
    x, y = int(p[0]), int(p[1])
    res = quad_residual_map(bundle, anchor=1)
    return (float(res[y, x, 0]), float(res[y, x, 1]))


def tri_residual(bundle, p, route: str = "stereo") -> tuple:
    """Triangle residual (res_u, res_v) at integer pixel p = (x, y) of view 1."""
    x, y = int(p[0]), int(p[1])
    res = tri_residual_map(bundle, anchor=1, route=route)
    return (float(res[y, x, 0]), float(res[y, x, 1]))


# ---------------------------------------------------------------------------
# residual exports


def residual_summary(res: np.ndarray, mask: np.ndarray | None = None) -> dict:
    """Magnitude statistics of a residual map over the masked pixels."""
    mag = np.hypot(res[:, :, 0], res[:, :, 1])
    if mask is not None:
        mag = mag[np.asarray(mask).astype(bool)]
    if mag.size == 0:
        return {"count": 0, "mean": None, "max": None,
                "p50": None, "p90": None, "p99": None}
    return {
        "count": int(mag.size),
        "mean": float(mag.mean()),
        "max": float(mag.max()),
        "p50": float(np.percentile(mag, 50)),
        "p90": float(np.percentile(mag, 90)),
        "p99": float(np.percentile(mag, 99)),
    }


def save_residual_heatmap(path, res: np.ndarray, mask: np.ndarray | None = None,
                          vmax: float | None = None) -> None:
    """Write |residual| as an 8-bit grayscale PNG; masked-out pixels are black."""
    mag = np.hypot(res[:, :, 0], res[:, :, 1])
    if mask is not None:
        mag = mag * np.asarray(mask).astype(np.float64)
    if vmax is None:
        vmax = float(mag.max()) or 1.0
    gray = np.round(np.clip(mag / vmax, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), gray):
        raise IOError(f"cannot write heatmap: {path}")


def write_residual_csv(path, summaries: dict) -> None:
    """Summaries keyed by a label (e.g. 'quad_anchor1') to one CSV row each."""
    cols = ["label", "count", "mean", "max", "p50", "p90", "p99"]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(cols)
        for label, s in summaries.items():
            wr.writerow([label] + [s[c] for c in cols[1:]])
