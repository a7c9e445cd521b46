"""Teacher-to-student self-supervision on proxy-transformed quadsets.

The teacher's confident predictions are transported into a hardened "proxy"
view of the scene (crop, optional 2x downscale, additive noise) and used as
pseudo ground truth for a student bundle. Because supervision comes from
labels rather than image evidence, the student also learns flow at pixels
that the proxy view occludes (cropped-away landing points), which is the
mechanism the occlusion-error comparisons measure.

The student bundle always lives on the original full-resolution grid; each
proxy contributes a loss by sampling the student fields at the proxy's
lattice points mapped through its coordinate transform. Keeping one common
grid makes students of different proxy schedules directly comparable.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _interp
from .field_core import (FlowField, Image, Mask, box_down2, pyramid_dims,
                         upsample_flow)
from .geometry import FlowBundle
from .losses import (LossConfig, LossReport, UndefinedLossError, dpsi, psi,
                     quad_loss, tri_loss)
from .optimize import (SolverConfig, TeacherResult, gradient_descent,
                       smoothness_loss, solve_teacher)
from .scene_synth import DIRECTIONS, CameraRig, ConfigError, QuadSet
from .warp_consistency import ConsistencyConfig


@dataclass(frozen=True)
class ProxyTransform:
    """Crop + integer downscale + additive noise, as an invertible pixel map.

    Proxy pixel p' corresponds to original position
        T(p') = (x0 + s*px' + (s-1)/2,  y0 + s*py' + (s-1)/2),
    the center of the s x s cell that box-averaging collapses into p'.
    Flow values transported into the proxy frame scale by 1/s per axis.
    """

    x0: int
    y0: int
    width: int
    height: int
    scale: int = 1
    noise_amp: float = 0.0
    noise_images: tuple = (2, 3, 4)
    seed: int = 0

    def __post_init__(self):
        if self.scale not in (1, 2):
            raise ConfigError("proxy scale must be 1 or 2")
        if self.width < 32 or self.height < 32:
            raise ConfigError("proxy crop must be at least 32 x 32")
        if self.width % self.scale or self.height % self.scale:
            raise ConfigError("crop extent must be a multiple of the scale")
        if self.x0 < 0 or self.y0 < 0:
            raise ConfigError("crop origin must be non-negative")

    @property
    def out_width(self) -> int:
        return self.width // self.scale

    @property
    def out_height(self) -> int:
        return self.height // self.scale

    @property
    def value_scale(self) -> float:
        return 1.0 / self.scale

    def map_points(self, xs, ys):
        """Proxy pixel coordinates -> original image coordinates."""
        off = (self.scale - 1) / 2.0
        return (self.x0 + self.scale * np.asarray(xs, np.float64) + off,
                self.y0 + self.scale * np.asarray(ys, np.float64) + off)

    def check_bounds(self, width: int, height: int):
        if self.x0 + self.width > width or self.y0 + self.height > height:
            raise ConfigError(
                f"crop ({self.x0},{self.y0},{self.width},{self.height}) "
                f"exceeds the {width}x{height} image")


def identity_transform(width: int, height: int) -> ProxyTransform:
    return ProxyTransform(0, 0, width, height, scale=1, noise_amp=0.0)


def proxy_rig(rig: CameraRig, t: ProxyTransform) -> CameraRig:
    """Camera parameters of the proxy view implied by the coordinate map."""
    off = (t.scale - 1) / 2.0
    return CameraRig(
        f_prime=rig.f_prime / t.scale,
        baseline=rig.baseline,
        width=t.out_width,
        height=t.out_height,
        cx=(rig.cx - t.x0 - off) / t.scale,
        cy=(rig.cy - t.y0 - off) / t.scale,
    )


def apply_proxy(quadset: QuadSet, t: ProxyTransform) -> QuadSet:
    """Render the proxy quadset: crop, box-downscale, then add noise."""
    t.check_bounds(quadset.image(1).width, quadset.image(1).height)
    out = []
    for v in (1, 2, 3, 4):
        a = quadset.image(v).data
        a = a[t.y0:t.y0 + t.height, t.x0:t.x0 + t.width]
        if t.scale == 2:
            a = box_down2(a)
        if t.noise_amp > 0.0 and v in t.noise_images:
            rng = np.random.default_rng([t.seed, v])
            a = a + rng.uniform(-t.noise_amp, t.noise_amp, a.shape)
            a = np.clip(a, 0.0, 1.0)
        out.append(Image(np.ascontiguousarray(a)))
    return QuadSet(tuple(out), proxy_rig(quadset.rig, t))


def random_transform(width: int, height: int, seed: int,
                     crop_frac: tuple = (0.6, 0.85),
                     scales: tuple = (1, 2),
                     noise_amp: float = 0.0,
                     noise_images: tuple = (2, 3, 4)) -> ProxyTransform:
    """Draw a seeded proxy transform with a feasible crop window."""
    rng = np.random.default_rng(seed)
    s = int(scales[rng.integers(len(scales))])
    w = max(32, int(width * rng.uniform(*crop_frac)))
    h = max(32, int(height * rng.uniform(*crop_frac)))
    w = min(width - width % s, w + (-w) % s)
    h = min(height - height % s, h + (-h) % s)
    if w < 32 or h < 32:
        raise ConfigError(
            f"image {width}x{height} too small for a scale-{s} proxy crop")
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return ProxyTransform(x0, y0, w, h, scale=s, noise_amp=noise_amp,
                          noise_images=noise_images, seed=seed)


def make_proxy(quadset: QuadSet, seed: int, **kwargs):
    """Draw a transform from the seed and apply it; returns (QuadSet, T)."""
    img = quadset.image(1)
    t = random_transform(img.width, img.height, seed, **kwargs)
    return apply_proxy(quadset, t), t


def transport_labels(flow, mask, t: ProxyTransform):
    """Teacher flow + confidence mapped into the proxy pixel frame.

    Flow is sampled bilinearly at T(p') and scaled by 1/s; the confidence
    mask is sampled nearest. Returns (FlowField, Mask) on the proxy grid.
    """
    f = flow.data if isinstance(flow, FlowField) else np.asarray(flow, np.float64)
    m = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    h, w = f.shape[:2]
    xs, ys = _interp.grid_coords(t.out_height, t.out_width)
    ox, oy = t.map_points(xs, ys)
    aux = _interp.bilinear_aux(ox, oy, h, w)
    vals = _interp.sample(f, aux) * t.value_scale
    nx = np.clip(np.floor(ox + 0.5).astype(np.int64), 0, w - 1)
    ny = np.clip(np.floor(oy + 0.5).astype(np.int64), 0, h - 1)
    inb = (ox >= 0) & (ox <= w - 1) & (oy >= 0) & (oy <= h - 1)
    mt = (m[ny, nx].astype(np.uint8) & inb.astype(np.uint8))
    return FlowField(vals), Mask(mt)


def transport_bundle(bundle, confidences: dict, t: ProxyTransform):
    """transport_labels over all 12 directions -> (labels, masks) dicts."""
    labels = {}
    masks = {}
    for d in DIRECTIONS:
        f = bundle.field(*d) if isinstance(bundle, FlowBundle) else bundle[d]
        labels[d], masks[d] = transport_labels(f, confidences[d], t)
    return labels, masks


# ---------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class VariantConfig:
    tag: str
    n_proxies: int
    scales: tuple
    noise_amp: float
    gate_by_proxy_consistency: bool  # v1: supervise only proxy-fb-confident px
    geometric_terms: bool            # v4: add quad/tri on the student bundle
    crop_frac: tuple = (0.6, 0.85)
    noise_images: tuple = (2, 3, 4)


def selfsup_variant(tag: str) -> VariantConfig:
    """Configured pipeline per ablation variant.

    v1: one crop-only proxy, labels gated to pixels that also pass the
        proxy's own forward-backward check (occluded pixels excluded).
    v2: one crop-only proxy, labels applied wherever the transported teacher
        confidence holds - including pixels the crop occludes.
    v3: schedule of eight proxies with crop, 1x/2x scale, and image noise.
    v4: v3 plus the quadrilateral/triangle terms on the student bundle.
    """
    if tag == "v1":
        return VariantConfig("v1", 1, (1,), 0.0, True, False)
    if tag == "v2":
        return VariantConfig("v2", 1, (1,), 0.0, False, False)
    if tag == "v3":
        return VariantConfig("v3", 8, (1, 2), 0.04, False, False)
    if tag == "v4":
        return VariantConfig("v4", 8, (1, 2), 0.04, False, True)
    raise ConfigError(f"unknown self-supervision variant: {tag!r}")


# ---------------------------------------------------------------------------
# student objective


def _mask_downsample_all(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Shrink a binary mask so a coarse pixel is set iff its cell is fully set."""
    m = mask.astype(np.float64)
    while m.shape[0] > h or m.shape[1] > w:
        m = box_down2(m)
        m = (m >= 1.0 - 1e-12).astype(np.float64)
    if m.shape != (h, w):
        raise ValueError("mask dims do not reach the requested level dims")
    return m


@dataclass
class StudentResult:
    bundle: FlowBundle
    trace: list
    report: LossReport
    objective: float
    transforms: tuple
    variant: VariantConfig


def _direction_label_term(field: np.ndarray, d: tuple, full_w: int,
                          full_h: int, proxies: list, cfg: LossConfig,
                          want_grad: bool):
    """L_s value and descent direction for one direction's field.

    The value is the robust psi penalty averaged over the proxy schedule.
    The returned array is not the psi gradient but the gradient of the
    least-squares version of the same residuals (the classic reweighting
    trick for concave-robust penalties): per label residual r it scatters
    r instead of dpsi(r). Since dpsi(r) * r >= 0 everywhere, this direction
    has a non-negative inner product with the true gradient, so backtracking
    on the psi objective still yields monotone steps - while the step length
    a pixel takes is now proportional to its distance from the label, which
    is what lets far-from-label pixels keep moving after near-label pixels
    (whose psi slope is enormous) have converged.
    """
    hk, wk = field.shape[:2]
    rx, ry = wk / full_w, hk / full_h
    grad = np.zeros_like(field) if want_grad else None
    total = 0.0
    n_prox = len(proxies)
    for t, labels, masks in proxies:
        m = masks[d].data.astype(np.float64)
        n = m.sum()
        if n == 0:
            continue
        xs, ys = _interp.grid_coords(t.out_height, t.out_width)
        ox, oy = t.map_points(xs, ys)
        aux = _interp.bilinear_aux(ox * rx, oy * ry, hk, wk)
        su = (full_w / wk) * t.value_scale
        sv = (full_h / hk) * t.value_scale
        val = _interp.sample(field, aux)
        ru = val[:, :, 0] * su - labels[d].data[:, :, 0]
        rv = val[:, :, 1] * sv - labels[d].data[:, :, 1]
        total += float(((psi(ru, cfg) + psi(rv, cfg)) * m).sum() / n) / n_prox
        if want_grad:
            _interp.scatter(ru * (m / (n * n_prox)) * su, aux, grad[:, :, 0])
            _interp.scatter(rv * (m / (n * n_prox)) * sv, aux, grad[:, :, 1])
    return total, grad


def _dirichlet_direction(field: np.ndarray) -> np.ndarray:
    """Gradient of the quadratic (least-squares) smoothness surrogate."""
    h, w = field.shape[:2]
    norm = 2.0 * h * w
    dx = (field[:, 1:, :] - field[:, :-1, :]) / norm
    dy = (field[1:, :, :] - field[:-1, :, :]) / norm
    g = np.zeros_like(field)
    g[:, 1:, :] += dx
    g[:, :-1, :] -= dx
    g[1:, :, :] += dy
    g[:-1, :, :] -= dy
    return g


def solve_student(full_width: int, full_height: int, proxies: list,
                  cfg: SolverConfig = SolverConfig(),
                  loss_cfg: LossConfig = LossConfig(),
                  variant: VariantConfig | None = None,
                  teacher_confidences: dict | None = None) -> StudentResult:
    """Optimize a student bundle on the original grid under L_s alone.

    proxies is a list of (ProxyTransform, labels, masks) triples whose labels
    and masks live on each proxy's grid; the per-proxy losses are averaged.
    Confidence never refreshes: the transported masks are the supervision.

    The objective separates exactly across the 12 directions (label terms
    and smoothness touch one field each), so each level runs one descent per
    direction instead of a joint one: a shared step size cannot serve fields
    whose label distances differ by an order of magnitude, because fields
    that have already converged veto, via the backtracking test, the step
    sizes the distant fields still need. For the same reason the descent
    direction is the residual-proportional one from _direction_label_term
    (solver mode "given"), normalized per field so the farthest-from-label
    pixel moves exactly one step length per accepted step. With
    variant.geometric_terms the coupling terms are evaluated against the
    other fields frozen at their latest values (block-coordinate order is
    the fixed DIRECTIONS order), so every accepted step still decreases the
    full objective.
    """
    if variant is None:
        variant = selfsup_variant("v2")
    if not proxies:
        raise UndefinedLossError("student solve needs at least one proxy")
    usable = sum(1 for _, labels, masks in proxies
                 for d in DIRECTIONS if masks[d].data.any())
    if usable == 0:
        raise UndefinedLossError("every transported label mask is empty")
    geo = variant.geometric_terms
    if geo and teacher_confidences is None:
        raise ValueError("geometric terms need the teacher confidence maps")

    dims = pyramid_dims(full_height, full_width, cfg.pyramid_levels)
    trace: list = []
    fields = None
    reports = {}
    for level in range(cfg.pyramid_levels - 1, -1, -1):
        h, w = dims[level]
        if fields is None:
            fields = {d: np.zeros((h, w, 2)) for d in DIRECTIONS}
        else:
            fields = {d: upsample_flow(FlowField(fields[d]), h, w).data.copy()
                      for d in DIRECTIONS}
        if geo:
            gates = {d: Mask(_mask_downsample_all(
                teacher_confidences[d].data, h, w).astype(np.uint8))
                for d in DIRECTIONS}

        scfg = replace(cfg, direction="given")
        for d in DIRECTIONS:

            def objective(single, want_grad, d=d):
                f = single[d]
                rep = LossReport(lambda1=loss_cfg.lambda1,
                                 lambda2=loss_cfg.lambda2)
                v, g = _direction_label_term(f, d, full_width, full_height,
                                             proxies, loss_cfg, want_grad)
                rep.selfsup[d] = v
                if geo:
                    trial_bundle = dict(fields)
                    trial_bundle[d] = f
                    qv, qg, qb = quad_loss(trial_bundle, gates, loss_cfg,
                                           want_grad)
                    tv, tg, tb = tri_loss(trial_bundle, gates, loss_cfg,
                                          want_grad)
                    rep.quad = qb
                    rep.tri = tb
                    if want_grad:
                        g = g + loss_cfg.lambda1 * qg[d]
                        g = g + loss_cfg.lambda2 * tg[d]
                sval, _ = smoothness_loss(f, loss_cfg, False)
                rep.smoothness = sval
                o = rep.total + cfg.smoothness_weight * sval
                if want_grad:
                    g = g + cfg.smoothness_weight * _dirichlet_direction(f)
                    top = float(np.hypot(g[:, :, 0], g[:, :, 1]).max())
                    g = g / (top + 1e-30)
                return o, rep, ({d: g} if want_grad else None)

            out, _, rep_d = gradient_descent({d: fields[d]}, objective, scfg,
                                             trace, level, on_refresh=None)
            fields[d] = out[d]
            reports[d] = rep_d

    report = LossReport(lambda1=loss_cfg.lambda1, lambda2=loss_cfg.lambda2)
    for d in DIRECTIONS:
        report.selfsup[d] = reports[d].selfsup[d]
        report.smoothness += reports[d].smoothness
    if geo:
        # quad/tri span all fields; the last block's evaluation is current
        report.quad = reports[DIRECTIONS[-1]].quad
        report.tri = reports[DIRECTIONS[-1]].tri
    obj = report.total + cfg.smoothness_weight * report.smoothness

    bundle = FlowBundle({d: FlowField(fields[d]) for d in DIRECTIONS})
    return StudentResult(bundle=bundle, trace=trace, report=report,
                         objective=obj, transforms=tuple(t for t, _, _ in proxies),
                         variant=variant)


# ---------------------------------------------------------------------------
# full stage-2 pipeline


def run_selfsup(quadset: QuadSet, teacher: TeacherResult, variant_tag: str,
                seed: int = 0, cfg: SolverConfig = SolverConfig(),
                loss_cfg: LossConfig = LossConfig(),
                consistency: ConsistencyConfig = ConsistencyConfig(),
                proxy_solver: SolverConfig | None = None,
                threads: int = 1) -> StudentResult:
    """Stage 2: proxy schedule -> label transport -> student solve.

    The proxy schedule is drawn deterministically from the seed. For v1, a
    photometric-only pass on each proxy provides the forward-backward set
    used to exclude occlusion-suspect pixels from supervision; proxy_solver
    controls that pass's budget (default: the student solver config).
    """
    variant = selfsup_variant(variant_tag)
    img = quadset.image(1)
    proxies = []
    for k in range(variant.n_proxies):
        t = random_transform(img.width, img.height, seed * 1009 + k,
                             crop_frac=variant.crop_frac,
                             scales=variant.scales,
                             noise_amp=variant.noise_amp,
                             noise_images=variant.noise_images)
        labels, masks = transport_bundle(teacher.bundle, teacher.confidences, t)
        if variant.gate_by_proxy_consistency:
            pq = apply_proxy(quadset, t)
            pcfg = proxy_solver if proxy_solver is not None else cfg
            photometric_only = replace(loss_cfg, quad_anchors=(), tri_anchors=())
            proxy_pass = solve_teacher(pq, pcfg, photometric_only, consistency,
                                       threads=threads)
            masks = {d: Mask(masks[d].data & proxy_pass.confidences[d].data)
                     for d in DIRECTIONS}
        proxies.append((t, labels, masks))
    return solve_student(img.width, img.height, proxies, cfg, loss_cfg,
                         variant, teacher_confidences=teacher.confidences)
