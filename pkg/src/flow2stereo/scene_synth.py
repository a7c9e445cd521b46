"""Synthetic piecewise-planar stereo scenes with exact correspondence ground truth.

A scene is a set of fronto-parallel textured patches, each rigidly translated
between frame times t and t+1, viewed by a rectified stereo pair. The four
rendered views are I1 = left(t), I2 = right(t), I3 = left(t+1), I4 = right(t+1).
Textures are procedural multi-octave value noise evaluated at the material
point on the patch, so corresponding pixels across views and times carry
identical intensity up to grid sampling. Ground truth flow for all 12 ordered
view pairs comes from exact projective correspondence, never from linearized
motion models.

Fronto-parallel patches under pure translation produce flow fields that are
affine in pixel coordinates within each patch, which makes bilinear sampling
of ground-truth fields exact away from patch boundaries. The co-visibility
masks account for that: a pixel counts as co-visible for direction i -> j only
if its correspondence is in frame, actually visible (not behind a nearer
patch), and the 2x2 interpolation stencil around the landing point sees the
same patch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._interp import grid_coords
from .field_core import DisparityField, FlowField, Image, Mask

DIRECTIONS = tuple((i, j) for i in (1, 2, 3, 4) for j in (1, 2, 3, 4) if i != j)

# view index -> (camera, time); camera 0 is left, 1 is right
VIEWS = {1: (0, 0), 2: (1, 0), 3: (0, 1), 4: (1, 1)}


class ConfigError(ValueError):
    """Raised for infeasible or malformed scene / run configuration."""


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo rig: focal length in pixels, baseline in meters."""

    f_prime: float
    baseline: float
    width: int
    height: int
    cx: float
    cy: float

    def __post_init__(self):
        if self.f_prime <= 0 or self.baseline <= 0:
            raise ConfigError("focal length and baseline must be positive")
        if self.width < 2 or self.height < 2:
            raise ConfigError("image dims must be at least 2x2")


@dataclass(frozen=True)
class PlanarPatch:
    """Fronto-parallel rectangle at depth z, translated by dp between frames.

    The extent (x0..x1, y0..y1) is in world meters at time t; at t+1 both the
    extent and the plane depth shift by dp.
    """

    z: float
    x0: float
    x1: float
    y0: float
    y1: float
    dp: tuple
    tex_seed: int
    tex_freq: float
    tex_octaves: int
    tex_contrast: float

    def depth_at(self, time: int) -> float:
        return self.z + self.dp[2] * time

    def depth_interval(self):
        z0, z1 = self.z, self.z + self.dp[2]
        return (min(z0, z1), max(z0, z1))


@dataclass(frozen=True)
class Scene:
    patches: tuple

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(self.patches))
        ivals = sorted(p.depth_interval() for p in self.patches)
        for (lo_a, hi_a), (lo_b, hi_b) in zip(ivals, ivals[1:]):
            if hi_a >= lo_b:
                raise ConfigError(
                    f"patch depth intervals overlap: [{lo_a}, {hi_a}] and [{lo_b}, {hi_b}]")
        if min(lo for lo, _ in ivals) <= 0:
            raise ConfigError("patch depths must stay positive over both frames")


@dataclass(frozen=True)
class QuadSet:
    """The four rendered views plus the rig that produced them."""

    images: tuple
    rig: CameraRig

    def __post_init__(self):
        if len(self.images) != 4:
            raise ValueError("a quadset holds exactly four images")
        object.__setattr__(self, "images", tuple(self.images))

    def image(self, view: int) -> Image:
        return self.images[view - 1]


@dataclass(frozen=True)
class GroundTruth:
    """Exact flows, per-direction co-visibility masks, and disparities."""

    flows: dict
    masks: dict
    disparity_t: DisparityField
    disparity_t1: DisparityField


@dataclass(frozen=True)
class SceneConfig:
    """Generator knobs; lengths are meters, frequencies cycles per pixel."""

    width: int = 96
    height: int = 64
    f_prime: float = 180.0
    baseline: float = 0.35
    cx: float | None = None
    cy: float | None = None
    patches: int = 3
    depth_min: float = 6.0
    depth_max: float = 14.0
    dz_min: float = 0.0
    dz_max: float = 0.0
    dxy_max: float = 0.12
    texture_octaves: int = 3
    texture_base_cycles: float = 1.0 / 64.0
    texture_contrast: float = 0.8
    seed: int = 0

    def rig(self) -> CameraRig:
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return CameraRig(self.f_prime, self.baseline, self.width, self.height, cx, cy)


# ---------------------------------------------------------------------------
# procedural texture


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform [0, 1) values on integer lattice coordinates."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             + iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
             + np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x94D049BB133111EB))
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return h.astype(np.float64) / float(2 ** 64)


def _smooth(t: np.ndarray) -> np.ndarray:
    # quintic smoothstep, C2 at lattice points
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lattice_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = _smooth(x - x0)
    fy = _smooth(y - y0)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    n00 = _hash01(ix, iy, seed)
    n01 = _hash01(ix + 1, iy, seed)
    n10 = _hash01(ix, iy + 1, seed)
    n11 = _hash01(ix + 1, iy + 1, seed)
    top = n00 + (n01 - n00) * fx
    bot = n10 + (n11 - n10) * fx
    return top + (bot - top) * fy


def value_noise(x: np.ndarray, y: np.ndarray, seed: int, base_freq: float,
                octaves: int) -> np.ndarray:
    """Multi-octave value noise in [0, 1]; amplitude halves per octave."""
    acc = np.zeros(np.broadcast(x, y).shape, np.float64)
    amp = 1.0
    norm = 0.0
    for o in range(octaves):
        freq = base_freq * (2.0 ** o)
        acc += amp * (_lattice_noise(x * freq, y * freq, seed + 7919 * o) - 0.5)
        norm += amp
        amp *= 0.5
    return acc / norm + 0.5


def _patch_intensity(patch: PlanarPatch, local_x: np.ndarray,
                     local_y: np.ndarray) -> np.ndarray:
    n = value_noise(local_x, local_y, patch.tex_seed, patch.tex_freq,
                    patch.tex_octaves)
    return 0.5 + patch.tex_contrast * (n - 0.5)


# ---------------------------------------------------------------------------
# visibility and rendering


def _ray_hits(scene: Scene, rig: CameraRig, cam: int, time: int,
              xs: np.ndarray, ys: np.ndarray):
    """Nearest patch along the rays through pixel positions (xs, ys).

    Returns (depth, patch_index); patch_index is -1 where no patch is hit.
    """
    rx = (np.asarray(xs, np.float64) - rig.cx) / rig.f_prime
    ry = (np.asarray(ys, np.float64) - rig.cy) / rig.f_prime
    cam_x = rig.baseline if cam == 1 else 0.0
    best_z = np.full(rx.shape, np.inf)
    best_i = np.full(rx.shape, -1, np.int64)
    for i, p in enumerate(scene.patches):
        z = p.depth_at(time)
        wx = cam_x + rx * z
        wy = ry * z
        ox = p.dp[0] * time
        oy = p.dp[1] * time
        inside = ((wx >= p.x0 + ox) & (wx <= p.x1 + ox)
                  & (wy >= p.y0 + oy) & (wy <= p.y1 + oy))
        closer = inside & (z < best_z)
        best_z = np.where(closer, z, best_z)
        best_i = np.where(closer, i, best_i)
    return best_z, best_i


class _ViewCache:
    """Per-view render products reused by the ground-truth pass."""

    def __init__(self, scene: Scene, rig: CameraRig, view: int):
        cam, time = VIEWS[view]
        xs, ys = grid_coords(rig.height, rig.width)
        depth, pidx = _ray_hits(scene, rig, cam, time, xs, ys)
        if (pidx < 0).any():
            raise ConfigError("scene does not cover the full frame; "
                              "the background patch must span every view")
        cam_x = rig.baseline if cam == 1 else 0.0
        wx = cam_x + (xs - rig.cx) / rig.f_prime * depth
        wy = (ys - rig.cy) / rig.f_prime * depth
        img = np.zeros((rig.height, rig.width), np.float64)
        for i, p in enumerate(scene.patches):
            sel = pidx == i
            if not sel.any():
                continue
            lx = wx[sel] - p.dp[0] * time
            ly = wy[sel] - p.dp[1] * time
            img[sel] = _patch_intensity(p, lx, ly)
        self.view = view
        self.cam = cam
        self.time = time
        self.depth = depth
        self.pidx = pidx
        self.world_x = wx
        self.world_y = wy
        self.image = np.clip(img, 0.0, 1.0)


def _direction_gt(scene: Scene, rig: CameraRig, caches: dict, i: int, j: int):
    src = caches[i]
    dst_cam, dst_time = VIEWS[j]
    dp = np.array([p.dp for p in scene.patches], np.float64)[src.pidx]
    dt = dst_time - src.time
    wx = src.world_x + dp[:, :, 0] * dt
    wy = src.world_y + dp[:, :, 1] * dt
    wz = src.depth + dp[:, :, 2] * dt
    cam_x = rig.baseline if dst_cam == 1 else 0.0
    px = rig.f_prime * (wx - cam_x) / wz + rig.cx
    py = rig.f_prime * wy / wz + rig.cy
    xs, ys = grid_coords(rig.height, rig.width)
    flow = np.stack([px - xs, py - ys], axis=-1)

    h, w = rig.height, rig.width
    inframe = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    pxc = np.clip(px, 0, w - 1)
    pyc = np.clip(py, 0, h - 1)
    _, hit = _ray_hits(scene, rig, dst_cam, dst_time, pxc, pyc)
    visible = hit == src.pidx
    # same-patch purity of the 2x2 interpolation stencil at the landing point
    lattice = caches[j].pidx
    x0 = np.clip(np.floor(pxc).astype(np.intp), 0, w - 2)
    y0 = np.clip(np.floor(pyc).astype(np.intp), 0, h - 2)
    pure = ((lattice[y0, x0] == src.pidx) & (lattice[y0, x0 + 1] == src.pidx)
            & (lattice[y0 + 1, x0] == src.pidx) & (lattice[y0 + 1, x0 + 1] == src.pidx))
    return FlowField(flow), Mask(inframe & visible & pure)


def render_quadset(scene: Scene, rig: CameraRig):
    """Render the four views and the full correspondence ground truth.

    Returns (QuadSet, GroundTruth). Disparities are for the left views:
    disparity_t from I1/I2 and disparity_t1 from I3/I4.
    """
    caches = {v: _ViewCache(scene, rig, v) for v in (1, 2, 3, 4)}
    images = tuple(Image(caches[v].image) for v in (1, 2, 3, 4))
    flows = {}
    masks = {}
    for (i, j) in DIRECTIONS:
        flow, mask = _direction_gt(scene, rig, caches, i, j)
        flows[(i, j)] = flow
        masks[(i, j)] = mask
    fb = rig.f_prime * rig.baseline
    gt = GroundTruth(
        flows=flows,
        masks=masks,
        disparity_t=DisparityField(fb / caches[1].depth),
        disparity_t1=DisparityField(fb / caches[3].depth),
    )
    return QuadSet(images, rig), gt


def gt_correspondence(scene: Scene, rig: CameraRig, p, i: int, j: int):
    """Exact corresponding point of pixel p = (x, y) from view i in view j.

    Returns the (x, y) landing point, or None when the material point is out
    of frame or occluded in view j.
    """
    x, y = float(p[0]), float(p[1])
    cam_i, t_i = VIEWS[i]
    cam_j, t_j = VIEWS[j]
    z, pidx = _ray_hits(scene, rig, cam_i, t_i, np.array([x]), np.array([y]))
    if pidx[0] < 0:
        raise ValueError(f"pixel {p} hits no patch in view {i}")
    patch = scene.patches[pidx[0]]
    cam_x_i = rig.baseline if cam_i == 1 else 0.0
    wx = cam_x_i + (x - rig.cx) / rig.f_prime * z[0]
    wy = (y - rig.cy) / rig.f_prime * z[0]
    dt = t_j - t_i
    wx += patch.dp[0] * dt
    wy += patch.dp[1] * dt
    wz = z[0] + patch.dp[2] * dt
    cam_x_j = rig.baseline if cam_j == 1 else 0.0
    px = rig.f_prime * (wx - cam_x_j) / wz + rig.cx
    py = rig.f_prime * wy / wz + rig.cy
    if not (0 <= px <= rig.width - 1 and 0 <= py <= rig.height - 1):
        return None
    _, hit = _ray_hits(scene, rig, cam_j, t_j, np.array([px]), np.array([py]))
    if hit[0] != pidx[0]:
        return None
    return (float(px), float(py))


# ---------------------------------------------------------------------------
# generation


def _frustum_half_extents(rig: CameraRig, z: float):
    half_w = max(rig.cx, rig.width - 1 - rig.cx) / rig.f_prime * z
    half_h = max(rig.cy, rig.height - 1 - rig.cy) / rig.f_prime * z
    return half_w, half_h


def generate_scene(cfg: SceneConfig, seed: int | None = None):
    """Build a random scene from the config; returns (Scene, CameraRig).

    Foreground patches get disjoint depth bands inside [depth_min, depth_max]
    so their depth intervals never cross even while moving; a static
    background patch at twice depth_max covers every view at both times.
    """
    if cfg.patches < 1:
        raise ConfigError("need at least one patch")
    if cfg.depth_min <= 0 or cfg.depth_max <= cfg.depth_min:
        raise ConfigError("need 0 < depth_min < depth_max")
    if cfg.dz_min > cfg.dz_max:
        raise ConfigError("dz_min must not exceed dz_max")
    if cfg.depth_min + min(cfg.dz_min, 0.0) <= 0:
        raise ConfigError("dz range allows non-positive depths")
    if cfg.texture_octaves < 1:
        raise ConfigError("texture_octaves must be >= 1")
    worst_stretch = 1.0 + max(cfg.dz_max, 0.0) / cfg.depth_min
    max_freq = cfg.texture_base_cycles * 2.0 ** (cfg.texture_octaves - 1) * worst_stretch
    if max_freq >= 0.25:
        raise ConfigError(
            f"texture too fine: max image frequency {max_freq:.3f} cycles/px "
            "must stay below 0.25")

    rig = cfg.rig()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    span = cfg.depth_max - cfg.depth_min
    bw = span / cfg.patches
    patches = []
    for k in range(cfg.patches):
        dz = float(rng.uniform(cfg.dz_min, cfg.dz_max))
        dx, dy = (float(v) for v in rng.uniform(-cfg.dxy_max, cfg.dxy_max, 2))
        band_lo = cfg.depth_min + k * bw
        margin = 0.05 * bw
        lo = band_lo + margin + max(0.0, -dz)
        hi = band_lo + bw - margin - max(0.0, dz)
        if hi <= lo:
            raise ConfigError(
                "dz range too large for the depth bands; reduce |dz| or patch count")
        z = float(rng.uniform(lo, hi))
        half_w_f, half_h_f = _frustum_half_extents(rig, z)
        half_w = float(rng.uniform(0.3, 0.55)) * half_w_f
        half_h = float(rng.uniform(0.3, 0.55)) * half_h_f
        cx_w = float(rng.uniform(-0.55, 0.55)) * half_w_f + rig.baseline / 2.0
        cy_w = float(rng.uniform(-0.55, 0.55)) * half_h_f
        patches.append(PlanarPatch(
            z=z,
            x0=cx_w - half_w, x1=cx_w + half_w,
            y0=cy_w - half_h, y1=cy_w + half_h,
            dp=(dx, dy, dz),
            tex_seed=int(rng.integers(2 ** 62)),
            tex_freq=cfg.texture_base_cycles * rig.f_prime / z,
            tex_octaves=cfg.texture_octaves,
            tex_contrast=cfg.texture_contrast,
        ))

    z_bg = cfg.depth_max * 2.0 + max(abs(cfg.dz_min), abs(cfg.dz_max))
    half_w_f, half_h_f = _frustum_half_extents(rig, z_bg)
    pad = 0.25 * half_w_f + rig.baseline + 2.0 * cfg.dxy_max
    pad_y = 0.25 * half_h_f + 2.0 * cfg.dxy_max
    patches.append(PlanarPatch(
        z=z_bg,
        x0=-half_w_f - pad, x1=rig.baseline + half_w_f + pad,
        y0=-half_h_f - pad_y, y1=half_h_f + pad_y,
        dp=(0.0, 0.0, 0.0),
        tex_seed=int(rng.integers(2 ** 62)),
        tex_freq=cfg.texture_base_cycles * rig.f_prime / z_bg,
        tex_octaves=cfg.texture_octaves,
        tex_contrast=cfg.texture_contrast,
    ))
    return Scene(tuple(patches)), rig


def translating_patch_scene(rig: CameraRig, n_patches: int = 3,
                            base_depth: float = 10.0, depth_gap: float = 0.25,
                            motion: tuple = (0.05, 0.02, 0.0),
                            jitter: float = 0.01,
                            texture_base_cycles: float = 1.0 / 32.0,
                            texture_octaves: int = 3,
                            texture_contrast: float = 0.8,
                            seed: int = 0) -> Scene:
    """Scene of translating patches with near-uniform flow across the frame.

    Every surface sits in a narrow depth band around base_depth and moves by
    a shared translation plus a per-patch jitter, so the flow fields are
    piecewise-near-constant with sub-pixel jumps at the silhouettes. This is
    the benign regime for a coarse-to-fine solver: the coarse initialization
    of every pixel lands inside its own matching basin, so recovery accuracy
    measures the optimizer rather than occlusion-boundary ambiguity.
    """
    if n_patches < 1:
        raise ConfigError("need at least one patch")
    if depth_gap <= 0:
        raise ConfigError("depth_gap must be positive")
    rng = np.random.default_rng(seed)
    mx, my, mz = (float(v) for v in motion)
    if mz != 0.0:
        raise ConfigError("translating-patch scenes keep depths fixed (dz = 0)")
    pad = rig.baseline + 2.0 * (abs(mx) + jitter) + 0.5
    pad_y = 2.0 * (abs(my) + jitter) + 0.5

    def _jit():
        if jitter == 0.0:
            return (mx, my, 0.0)
        jx, jy = (float(v) for v in rng.uniform(-jitter, jitter, 2))
        return (mx + jx, my + jy, 0.0)

    patches = []
    # background: the deepest surface, covering both cameras at both times
    z_bg = base_depth + depth_gap
    half_w, half_h = _frustum_half_extents(rig, z_bg)
    patches.append(PlanarPatch(
        z=z_bg,
        x0=-half_w - pad, x1=rig.baseline + half_w + pad,
        y0=-half_h - pad_y, y1=half_h + pad_y,
        dp=_jit(),
        tex_seed=int(rng.integers(2 ** 62)),
        tex_freq=texture_base_cycles * rig.f_prime / z_bg,
        tex_octaves=texture_octaves,
        tex_contrast=texture_contrast,
    ))
    # foreground: a row of slightly nearer rectangles
    for k in range(n_patches - 1):
        z = base_depth - k * depth_gap
        x_lo = rig.baseline + (0 - rig.cx) / rig.f_prime * z
        x_hi = (rig.width - 1 - rig.cx) / rig.f_prime * z
        y_lo = (0 - rig.cy) / rig.f_prime * z
        y_hi = (rig.height - 1 - rig.cy) / rig.f_prime * z
        slot = (x_hi - x_lo) / (n_patches - 1)
        cx_w = x_lo + (k + 0.5) * slot
        cy_w = 0.5 * (y_lo + y_hi) + float(rng.uniform(-0.15, 0.15)) * (y_hi - y_lo)
        half_x = 0.36 * slot
        half_y = 0.30 * (y_hi - y_lo)
        patches.append(PlanarPatch(
            z=z,
            x0=cx_w - half_x, x1=cx_w + half_x,
            y0=cy_w - half_y, y1=cy_w + half_y,
            dp=_jit(),
            tex_seed=int(rng.integers(2 ** 62)),
            tex_freq=texture_base_cycles * rig.f_prime / z,
            tex_octaves=texture_octaves,
            tex_contrast=texture_contrast,
        ))
    return Scene(tuple(patches))


def synth_quadset(cfg: SceneConfig, seed: int | None = None):
    """Convenience: generate a scene and render it in one call."""
    scene, rig = generate_scene(cfg, seed)
    quad, gt = render_quadset(scene, rig)
    return scene, rig, quad, gt
