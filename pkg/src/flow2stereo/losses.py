"""Robust photometric, quadrilateral, triangle and self-supervision losses.

All losses share the penalty psi(x) = (|x| + eps)^q and report masked means:
sum over confident pixels divided by the confident-pixel count. Each loss also
returns its analytic gradient with respect to every flow field it touches,
as a dict keyed by flow direction with (H, W, 2) arrays.

The photometric term compares soft census descriptors: the descriptor stack of
the target image is sampled bilinearly at the flow landing points and compared
against the reference descriptors. Sampling descriptors (rather than taking
the census of a warped image) keeps the loss at a pixel a function of that
pixel's flow alone, so confidence gating cleanly removes pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _interp
from .field_core import Image, Mask
from .geometry import (ANCHOR_LAYOUT, AnchorTerms, anchor_terms,
                       quad_residual_from_terms, tri_residual_from_terms,
                       _as_arrays)
from .scene_synth import DIRECTIONS, QuadSet


class UndefinedLossError(ValueError):
    """A loss term has no confident pixels to average over."""


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.01
    q: float = 0.4
    lambda1: float = 0.1
    lambda2: float = 0.2
    census_window: int = 7
    census_soft_scale: float = 0.81
    photometric_mode: str = "census"  # or "raw" for direct intensity residuals
    quad_anchors: tuple = (1, 2, 3, 4)
    tri_anchors: tuple = (1, 2, 3, 4)
    tri_route: str = "stereo"  # "stereo", "temporal", or "both"
    selfsup_norm: str = "component"  # or "vector"

    def tri_routes(self) -> tuple:
        if self.tri_route == "both":
            return ("stereo", "temporal")
        if self.tri_route in ("stereo", "temporal"):
            return (self.tri_route,)
        raise ValueError(f"unknown tri_route: {self.tri_route!r}")


def psi(x, cfg: LossConfig = LossConfig()):
    """Robust penalty (|x| + eps)^q."""
    return _interp.psi(x, cfg.epsilon, cfg.q)


def dpsi(x, cfg: LossConfig = LossConfig()):
    return _interp.dpsi(x, cfg.epsilon, cfg.q)


def census_descriptor(img, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Soft census stack (H, W, window**2 - 1) of an intensity image."""
    data = img.data if isinstance(img, Image) else np.asarray(img, np.float64)
    return _interp.census_transform(data, cfg.census_window, cfg.census_soft_scale)


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, Mask):
        return mask.data.astype(np.float64)
    return np.asarray(mask).astype(np.float64)


def _image_array(img) -> np.ndarray:
    return img.data if isinstance(img, Image) else np.asarray(img, np.float64)


def _flow_array(flow) -> np.ndarray:
    if isinstance(flow, np.ndarray):
        return flow
    return np.asarray(flow.data, np.float64)


def photometric_loss(img_i, img_j, flow, mask, cfg: LossConfig = LossConfig(),
                     desc_i: np.ndarray | None = None,
                     desc_j: np.ndarray | None = None,
                     want_grad: bool = True):
    """Masked census (or raw) photometric loss of one directed flow field.

    Returns (value, grad) with grad an (H, W, 2) array, or (value, None) when
    want_grad is False. desc_i / desc_j allow reuse of precomputed census
    stacks across iterations.
    """
    flow = _flow_array(flow)
    m = _mask_array(mask)
    n = m.sum()
    if n == 0:
        raise UndefinedLossError("photometric loss has no confident pixels")
    a_i = _image_array(img_i)
    h, w = a_i.shape[:2]
    xs, ys = _interp.grid_coords(h, w)
    aux = _interp.bilinear_aux(xs + flow[:, :, 0], ys + flow[:, :, 1], h, w)

    if cfg.photometric_mode == "census":
        if desc_i is None:
            desc_i = census_descriptor(a_i, cfg)
        if desc_j is None:
            desc_j = census_descriptor(img_j, cfg)
        if want_grad:
            val, ddx, ddy = _interp.sample_with_grad(desc_j, aux)
        else:
            val = _interp.sample(desc_j, aux)
        r = desc_i - val
        per_px = psi(r, cfg).sum(axis=-1)
        value = float((per_px * m).sum() / n)
        if not want_grad:
            return value, None
        gr = dpsi(r, cfg) * (m / n)[:, :, None]
        gu = -(gr * ddx).sum(axis=-1)
        gv = -(gr * ddy).sum(axis=-1)
        return value, np.stack([gu, gv], axis=-1)

    if cfg.photometric_mode == "raw":
        a_j = _image_array(img_j)
        if want_grad:
            val, ddx, ddy = _interp.sample_with_grad(a_j, aux)
        else:
            val = _interp.sample(a_j, aux)
        r = a_i - val
        value = float((psi(r, cfg) * m).sum() / n)
        if not want_grad:
            return value, None
        gr = dpsi(r, cfg) * (m / n)
        return value, np.stack([-gr * ddx, -gr * ddy], axis=-1)

    raise ValueError(f"unknown photometric mode: {cfg.photometric_mode!r}")


def _zero_grads(fields: dict) -> dict:
    return {d: np.zeros_like(fields[d]) for d in fields}


def _accum_quad(fields, grads, terms: AnchorTerms, anchor, g_u, g_v):
    """Backpropagate quad residual gradients (g_u, g_v) into the field grads."""
    s, t, d = ANCHOR_LAYOUT[anchor]
    av_dx, av_dy = terms.via_stereo_grad
    bv_dx, bv_dy = terms.via_temporal_grad
    grads[(anchor, s)][:, :, 0] += g_u
    grads[(anchor, t)][:, :, 0] -= g_u
    grads[(anchor, t)][:, :, 1] -= g_v
    # sampled w(s->d): residual reads +u and +v
    _interp.scatter(g_u, terms.aux_stereo, grads[(s, d)][:, :, 0])
    _interp.scatter(g_v, terms.aux_stereo, grads[(s, d)][:, :, 1])
    gpx = g_u * av_dx[:, :, 0] + g_v * av_dx[:, :, 1]
    gpy = g_u * av_dy[:, :, 0] + g_v * av_dy[:, :, 1]
    grads[(anchor, s)][:, :, 0] += gpx
    grads[(anchor, s)][:, :, 1] += gpy
    # sampled w(t->d): residual reads -u only
    _interp.scatter(-g_u, terms.aux_temporal, grads[(t, d)][:, :, 0])
    grads[(anchor, t)][:, :, 0] += -g_u * bv_dx[:, :, 0]
    grads[(anchor, t)][:, :, 1] += -g_u * bv_dy[:, :, 0]


def _accum_tri(fields, grads, terms: AnchorTerms, anchor, route, g_u, g_v):
    s, t, d = ANCHOR_LAYOUT[anchor]
    grads[(anchor, d)][:, :, 0] += g_u
    grads[(anchor, d)][:, :, 1] += g_v
    if route == "stereo":
        av_dx, av_dy = terms.via_stereo_grad
        grads[(anchor, s)][:, :, 0] -= g_u
        _interp.scatter(-g_u, terms.aux_stereo, grads[(s, d)][:, :, 0])
        _interp.scatter(-g_v, terms.aux_stereo, grads[(s, d)][:, :, 1])
        gpx = -(g_u * av_dx[:, :, 0] + g_v * av_dx[:, :, 1])
        gpy = -(g_u * av_dy[:, :, 0] + g_v * av_dy[:, :, 1])
        grads[(anchor, s)][:, :, 0] += gpx
        grads[(anchor, s)][:, :, 1] += gpy
    else:
        bv_dx, bv_dy = terms.via_temporal_grad
        grads[(anchor, t)][:, :, 0] -= g_u
        grads[(anchor, t)][:, :, 1] -= g_v
        _interp.scatter(-g_u, terms.aux_temporal, grads[(t, d)][:, :, 0])
        grads[(anchor, t)][:, :, 0] += -g_u * bv_dx[:, :, 0]
        grads[(anchor, t)][:, :, 1] += -g_u * bv_dy[:, :, 0]


def _group_value_and_gates(res, m, cfg):
    n = m.sum()
    value = float(((psi(res[:, :, 0], cfg) + psi(res[:, :, 1], cfg)) * m).sum() / n)
    g_u = dpsi(res[:, :, 0], cfg) * (m / n)
    g_v = dpsi(res[:, :, 1], cfg) * (m / n)
    return value, g_u, g_v


def quad_loss(bundle, masks: dict, cfg: LossConfig = LossConfig(),
              want_grad: bool = True):
    """Quadrilateral constraint loss summed over the configured anchors.

    masks holds the 12 per-direction confidence maps; each anchor group is
    gated by the product of its three outgoing maps. Returns (value, grads,
    breakdown) where breakdown maps anchor -> group value. Groups without
    confident pixels are skipped; if all are empty the loss is undefined.
    """
    fields = _as_arrays(bundle)
    grads = _zero_grads(fields) if want_grad else None
    breakdown = {}
    total = 0.0
    for a in cfg.quad_anchors:
        s, t, d = ANCHOR_LAYOUT[a]
        m = (_mask_array(masks[(a, s)]) * _mask_array(masks[(a, t)])
             * _mask_array(masks[(a, d)]))
        if m.sum() == 0:
            continue
        terms = anchor_terms(fields, a, with_grad=want_grad)
        res = quad_residual_from_terms(terms)
        value, g_u, g_v = _group_value_and_gates(res, m, cfg)
        breakdown[a] = value
        total += value
        if want_grad:
            _accum_quad(fields, grads, terms, a, g_u, g_v)
    if not breakdown:
        raise UndefinedLossError("every quadrilateral group has an empty gate")
    return total, grads, breakdown


def tri_loss(bundle, masks: dict, cfg: LossConfig = LossConfig(),
             want_grad: bool = True):
    """Triangle constraint loss over (anchor, route) groups.

    Gating per group: the stepping-stone direction's map times the anchor's
    diagonal map. Returns (value, grads, breakdown keyed (anchor, route)).
    """
    fields = _as_arrays(bundle)
    grads = _zero_grads(fields) if want_grad else None
    breakdown = {}
    total = 0.0
    for a in cfg.tri_anchors:
        s, t, d = ANCHOR_LAYOUT[a]
        terms = None
        for route in cfg.tri_routes():
            step = s if route == "stereo" else t
            m = _mask_array(masks[(a, step)]) * _mask_array(masks[(a, d)])
            if m.sum() == 0:
                continue
            if terms is None:
                terms = anchor_terms(fields, a, with_grad=want_grad)
            res = tri_residual_from_terms(terms, route)
            value, g_u, g_v = _group_value_and_gates(res, m, cfg)
            breakdown[(a, route)] = value
            total += value
            if want_grad:
                _accum_tri(fields, grads, terms, a, route, g_u, g_v)
    if not breakdown:
        raise UndefinedLossError("every triangle group has an empty gate")
    return total, grads, breakdown


def selfsup_loss(student, labels: dict, masks: dict,
                 cfg: LossConfig = LossConfig(), want_grad: bool = True):
    """Label-regression loss psi(w - w_tilde) per component, masked means.

    student is a bundle (or field dict); labels / masks map directions to
    transported teacher flow and confidence. Directions with empty masks are
    skipped; all-empty raises. Returns (value, grads, breakdown).
    """
    fields = _as_arrays(student)
    grads = _zero_grads(fields) if want_grad else None
    breakdown = {}
    total = 0.0
    for d in labels:
        m = _mask_array(masks[d])
        n = m.sum()
        if n == 0:
            continue
        res = fields[d] - _flow_array(labels[d])
        if cfg.selfsup_norm == "component":
            value = float(((psi(res[:, :, 0], cfg) + psi(res[:, :, 1], cfg)) * m).sum() / n)
            if want_grad:
                grads[d][:, :, 0] += dpsi(res[:, :, 0], cfg) * (m / n)
                grads[d][:, :, 1] += dpsi(res[:, :, 1], cfg) * (m / n)
        elif cfg.selfsup_norm == "vector":
            mag = np.hypot(res[:, :, 0], res[:, :, 1])
            value = float((psi(mag, cfg) * m).sum() / n)
            if want_grad:
                safe = np.where(mag > 0, mag, 1.0)
                coef = dpsi(mag, cfg) * (m / n) / safe
                grads[d][:, :, 0] += coef * res[:, :, 0]
                grads[d][:, :, 1] += coef * res[:, :, 1]
        else:
            raise ValueError(f"unknown selfsup norm: {cfg.selfsup_norm!r}")
        breakdown[d] = value
        total += value
    if not breakdown:
        raise UndefinedLossError("every self-supervision direction has an empty mask")
    return total, grads, breakdown


def _key_name(k) -> str:
    if isinstance(k, tuple) and len(k) == 2 and all(isinstance(x, int) for x in k):
        return f"{k[0]}->{k[1]}"
    if isinstance(k, tuple):
        return ":".join(str(x) for x in k)
    return str(k)


@dataclass
class LossReport:
    """Per-term loss values, confident-pixel counts, and skipped terms."""

    photometric: dict = field(default_factory=dict)
    quad: dict = field(default_factory=dict)
    tri: dict = field(default_factory=dict)
    selfsup: dict = field(default_factory=dict)
    smoothness: float = 0.0
    counts: dict = field(default_factory=dict)
    undefined: tuple = ()
    lambda1: float = 0.1
    lambda2: float = 0.2

    @property
    def lp(self) -> float:
        return float(sum(self.photometric.values()))

    @property
    def lq(self) -> float:
        return float(sum(self.quad.values()))

    @property
    def lt(self) -> float:
        return float(sum(self.tri.values()))

    @property
    def ls(self) -> float:
        return float(sum(self.selfsup.values()))

    @property
    def total(self) -> float:
        return self.lp + self.lambda1 * self.lq + self.lambda2 * self.lt + self.ls

    def to_json(self) -> dict:
        return {
            "photometric": {f"{i}->{j}": v for (i, j), v in self.photometric.items()},
            "quad": {str(a): v for a, v in self.quad.items()},
            "tri": {f"{a}:{r}": v for (a, r), v in self.tri.items()},
            "selfsup": {_key_name(k): v for k, v in self.selfsup.items()},
            "smoothness": self.smoothness,
            "counts": {str(k): v for k, v in self.counts.items()},
            "undefined": list(self.undefined),
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lp": self.lp, "lq": self.lq, "lt": self.lt, "ls": self.ls,
            "total": self.total,
        }


def total_teacher_loss(bundle, images, confidences: dict,
                       cfg: LossConfig = LossConfig(),
                       descs: dict | None = None, want_grad: bool = True,
                       threads: int = 1):
    """Stage-1 objective L_p + lambda1 L_q + lambda2 L_t over a full bundle.

    images is a QuadSet or a sequence of the four view images; descs allows
    passing precomputed census stacks keyed by view. Terms whose gates are
    empty are recorded in the report's undefined list and excluded. Returns
    (LossReport, grads dict or None).

    threads > 1 evaluates the 12 photometric directions in a thread pool;
    results are merged in the fixed direction order, so values and gradients
    are identical to the single-threaded run.
    """
    fields = _as_arrays(bundle)
    imgs = list(images.images) if isinstance(images, QuadSet) else list(images)
    if len(imgs) != 4:
        raise ValueError("teacher loss needs the four view images")
    report = LossReport(lambda1=cfg.lambda1, lambda2=cfg.lambda2)
    grads = _zero_grads(fields) if want_grad else None
    undefined = []

    if descs is None and cfg.photometric_mode == "census":
        descs = {v: census_descriptor(imgs[v - 1], cfg) for v in (1, 2, 3, 4)}

    def _one_direction(ij):
        i, j = ij
        m = _mask_array(confidences[(i, j)])
        try:
            value, g = photometric_loss(
                imgs[i - 1], imgs[j - 1], fields[(i, j)], m, cfg,
                desc_i=None if descs is None else descs[i],
                desc_j=None if descs is None else descs[j],
                want_grad=want_grad)
        except UndefinedLossError:
            return int(m.sum()), None, None
        return int(m.sum()), value, g

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one_direction, DIRECTIONS))
    else:
        results = [_one_direction(ij) for ij in DIRECTIONS]

    for (i, j), (count, value, g) in zip(DIRECTIONS, results):
        report.counts[f"lp_{i}{j}"] = count
        if value is None:
            undefined.append(f"lp_{i}{j}")
            continue
        report.photometric[(i, j)] = value
        if want_grad:
            grads[(i, j)] += g
    if not report.photometric:
        raise UndefinedLossError("photometric loss undefined for every direction")

    if cfg.quad_anchors and cfg.lambda1 != 0.0:
        try:
            _, qg, qb = quad_loss(fields, confidences, cfg, want_grad=want_grad)
            report.quad = qb
            for a in qb:
                s, t, d = ANCHOR_LAYOUT[a]
                m = (_mask_array(confidences[(a, s)]) * _mask_array(confidences[(a, t)])
                     * _mask_array(confidences[(a, d)]))
                report.counts[f"lq_a{a}"] = int(m.sum())
            if want_grad:
                for d in grads:
                    grads[d] += cfg.lambda1 * qg[d]
        except UndefinedLossError:
            undefined.append("lq")

    if cfg.tri_anchors and cfg.lambda2 != 0.0:
        try:
            _, tg, tb = tri_loss(fields, confidences, cfg, want_grad=want_grad)
            report.tri = tb
            for (a, route) in tb:
                s, t, d = ANCHOR_LAYOUT[a]
                step = s if route == "stereo" else t
                m = _mask_array(confidences[(a, step)]) * _mask_array(confidences[(a, d)])
                report.counts[f"lt_a{a}_{route}"] = int(m.sum())
            if want_grad:
                for d in grads:
                    grads[d] += cfg.lambda2 * tg[d]
        except UndefinedLossError:
            undefined.append("lt")

    report.undefined = tuple(undefined)
    return report, grads
