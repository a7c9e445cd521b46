"""Finite-difference verification of every analytic loss gradient.

Shared by the test suite and the checkgrad CLI command: build seeded random
instances, compare each loss family's analytic gradient against central
finite differences at sampled coordinates, and report the worst relative
error per family.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .losses import (LossConfig, photometric_loss, quad_loss, selfsup_loss,
                     tri_loss)
from .optimize import smoothness_loss
from .scene_synth import DIRECTIONS

FAMILIES = ("photometric", "quad", "tri", "selfsup", "smoothness")


def _random_image(rng, h: int, w: int) -> np.ndarray:
    """Smooth random texture in [0, 1]: blurred noise keeps the census
    descriptors differentiable at sampled subpixel positions."""
    img = rng.random((h, w))
    img = cv2.GaussianBlur(img, (5, 5), 1.2)
    lo, hi = img.min(), img.max()
    return (img - lo) / max(hi - lo, 1e-12)


def _random_flow(rng, h: int, w: int, max_int: int = 2) -> np.ndarray:
    """Integer base displacement plus a per-pixel fraction in [0.2, 0.8].

    Keeping every sampled position strictly off the pixel lattice avoids
    probing bilinear interpolation exactly at its kinks, where one-sided
    and central differences legitimately disagree.
    """
    base = rng.integers(-max_int, max_int + 1, (h, w, 2)).astype(np.float64)
    frac = rng.uniform(0.2, 0.8, (h, w, 2)) * np.where(rng.random((h, w, 2)) < 0.5, -1.0, 1.0)
    return base + frac


def _random_mask(rng, h: int, w: int) -> np.ndarray:
    m = (rng.random((h, w)) < 0.85).astype(np.uint8)
    if not m.any():
        m[h // 2, w // 2] = 1
    return m


def _probe_coords(rng, grad: np.ndarray, h: int, w: int, margin: int,
                  n_probes: int, floor: float = 1e-9) -> list:
    """Sample (y, x, c) coordinates with non-negligible analytic gradient,
    away from the border so perturbed samples stay strictly interior."""
    ys, xs, cs = np.nonzero(np.abs(grad) >= floor)
    keep = ((ys >= margin) & (ys < h - margin) &
            (xs >= margin) & (xs < w - margin))
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return []
    pick = rng.choice(idx, size=min(n_probes, idx.size), replace=False)
    return [(int(ys[i]), int(xs[i]), int(cs[i])) for i in pick]


def _central_diff(fn, flow: np.ndarray, coord: tuple, h: float = 1e-5) -> float:
    y, x, c = coord
    fp = np.array(flow, copy=True)
    fp[y, x, c] += h
    fm = np.array(flow, copy=True)
    fm[y, x, c] -= h
    return (fn(fp) - fn(fm)) / (2.0 * h)


@dataclass
class FamilyResult:
    family: str
    max_rel_err: float = 0.0
    n_probes: int = 0
    worst: tuple = ()  # (instance, direction-or-None, (y, x, c))


@dataclass
class GradCheckResult:
    tol: float
    families: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(f.max_rel_err < self.tol for f in self.families.values())

    @property
    def max_rel_err(self) -> float:
        return max((f.max_rel_err for f in self.families.values()), default=0.0)

    def rows(self) -> list:
        return [(f.family, f.n_probes, f.max_rel_err,
                 "ok" if f.max_rel_err < self.tol else "FAIL")
                for f in self.families.values()]


def _rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-12)


def _check_family(res: FamilyResult, instance: int, tag, analytic: float,
                  fd: float, coord: tuple):
    e = _rel_err(analytic, fd)
    res.n_probes += 1
    if e > res.max_rel_err:
        res.max_rel_err = e
        res.worst = (instance, tag, coord)


def run_gradcheck(n_instances: int = 50, size: int = 16, tol: float = 1e-4,
                  seed: int = 0, probes_per_family: int = 4,
                  cfg: LossConfig = LossConfig()) -> GradCheckResult:
    """Compare analytic and central-difference gradients on random instances.

    Every instance draws fresh images, flow bundles, labels, and masks of
    the given size, then probes a few coordinates of each loss family's
    gradient. Deterministic in (n_instances, size, seed).
    """
    result = GradCheckResult(tol=tol)
    for fam in FAMILIES:
        result.families[fam] = FamilyResult(fam)
    h = w = size
    margin = 4

    for inst in range(n_instances):
        rng = np.random.default_rng([seed, inst])
        images = {v: _random_image(rng, h, w) for v in (1, 2, 3, 4)}
        bundle = {d: _random_flow(rng, h, w) for d in DIRECTIONS}
        masks = {d: _random_mask(rng, h, w) for d in DIRECTIONS}

        # photometric: one direction per instance, rotating
        d = DIRECTIONS[inst % len(DIRECTIONS)]
        fam = result.families["photometric"]
        val, grad = photometric_loss(images[d[0]], images[d[1]], bundle[d],
                                     masks[d], cfg)
        fn = lambda f: photometric_loss(images[d[0]], images[d[1]], f,
                                        masks[d], cfg, want_grad=False)[0]
        for coord in _probe_coords(rng, grad, h, w, margin, probes_per_family):
            _check_family(fam, inst, d, grad[coord], _central_diff(fn, bundle[d], coord), coord)

        # quad: probe one participating field per instance
        fam = result.families["quad"]
        _, grads, _ = quad_loss(bundle, masks, cfg)
        dq = DIRECTIONS[(inst * 5 + 1) % len(DIRECTIONS)]

        def fn_quad(f, dq=dq):
            b = dict(bundle)
            b[dq] = f
            return quad_loss(b, masks, cfg, want_grad=False)[0]

        for coord in _probe_coords(rng, grads[dq], h, w, margin, probes_per_family):
            _check_family(fam, inst, dq, grads[dq][coord],
                          _central_diff(fn_quad, bundle[dq], coord), coord)

        # tri: alternate routes across instances
        fam = result.families["tri"]
        tri_cfg = LossConfig(tri_route=("stereo", "temporal", "both")[inst % 3])
        _, grads, _ = tri_loss(bundle, masks, tri_cfg)
        dt = DIRECTIONS[(inst * 7 + 3) % len(DIRECTIONS)]

        def fn_tri(f, dt=dt):
            b = dict(bundle)
            b[dt] = f
            return tri_loss(b, masks, tri_cfg, want_grad=False)[0]

        for coord in _probe_coords(rng, grads[dt], h, w, margin, probes_per_family):
            _check_family(fam, inst, dt, grads[dt][coord],
                          _central_diff(fn_tri, bundle[dt], coord), coord)

        # selfsup: student vs labels on the same grid
        fam = result.families["selfsup"]
        student = {d2: _random_flow(rng, h, w) for d2 in DIRECTIONS}
        labels = {d2: _random_flow(rng, h, w) for d2 in DIRECTIONS}
        sn = ("component", "vector")[inst % 2]
        s_cfg = LossConfig(selfsup_norm=sn)
        _, grads, _ = selfsup_loss(student, labels, masks, s_cfg)
        ds = DIRECTIONS[(inst * 11 + 5) % len(DIRECTIONS)]

        def fn_s(f, ds=ds):
            b = dict(student)
            b[ds] = f
            return selfsup_loss(b, labels, masks, s_cfg, want_grad=False)[0]

        for coord in _probe_coords(rng, grads[ds], h, w, margin, probes_per_family):
            _check_family(fam, inst, ds, grads[ds][coord],
                          _central_diff(fn_s, student[ds], coord), coord)

        # smoothness: single field
        fam = result.families["smoothness"]
        fs = bundle[DIRECTIONS[(inst * 3) % len(DIRECTIONS)]]
        _, grad = smoothness_loss(fs, cfg)
        fn_sm = lambda f: smoothness_loss(f, cfg, want_grad=False)[0]
        for coord in _probe_coords(rng, grad, h, w, 1, probes_per_family):
            _check_family(fam, inst, None, grad[coord],
                          _central_diff(fn_sm, fs, coord), coord)

    return result
