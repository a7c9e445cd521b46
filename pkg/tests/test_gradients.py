"""Finite-difference verification of the analytic loss gradients.

The heavy lifting lives in flow2stereo.gradcheck; these tests run it on a
reduced budget and additionally re-derive a few derivatives by hand so the
checker itself is covered by an independent oracle.
"""
import numpy as np
import pytest

from flow2stereo.gradcheck import FAMILIES, run_gradcheck
from flow2stereo.losses import LossConfig, photometric_loss, quad_loss
from flow2stereo.optimize import smoothness_loss
from flow2stereo.scene_synth import DIRECTIONS


def central_diff(fn, flow, y, x, c, h=1e-5):
    """Plain two-sided difference, written out locally so the test does not
    lean on the helper it is meant to corroborate."""
    fp = np.array(flow, copy=True)
    fp[y, x, c] += h
    fm = np.array(flow, copy=True)
    fm[y, x, c] -= h
    return (fn(fp) - fn(fm)) / (2.0 * h)


def smooth_texture(h, w, phase=0.0):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = (0.5
           + 0.22 * np.sin(2 * np.pi * xs / 6.3 + phase)
           * np.cos(2 * np.pi * ys / 4.7)
           + 0.18 * np.sin(2 * np.pi * (xs + 2 * ys) / 9.1 + 0.4 * phase))
    return np.clip(img, 0.0, 1.0)


def top_interior_coords(grad, margin, n):
    """Coordinates of the n largest-magnitude gradient entries that sit at
    least `margin` pixels from every border."""
    g = np.abs(grad).copy()
    g[:margin], g[-margin:] = 0.0, 0.0
    g[:, :margin], g[:, -margin:] = 0.0, 0.0
    flat = np.argsort(g.ravel())[::-1][:n]
    return [np.unravel_index(i, grad.shape) for i in flat]


def test_photometric_gradient_manual_fd():
    h, w = 18, 20
    img_i = smooth_texture(h, w)
    img_j = smooth_texture(h, w, phase=0.9)
    rng = np.random.default_rng(3)
    flow = np.stack([0.3 + 0.1 * rng.standard_normal((h, w)),
                     -0.4 + 0.1 * rng.standard_normal((h, w))], axis=-1)
    mask = np.ones((h, w), dtype=np.uint8)
    cfg = LossConfig()

    val, grad = photometric_loss(img_i, img_j, flow, mask, cfg)
    assert np.isfinite(val)
    fn = lambda f: photometric_loss(img_i, img_j, f, mask, cfg,
                                    want_grad=False)[0]
    for (y, x, c) in top_interior_coords(grad, 5, 4):
        a = grad[y, x, c]
        f = central_diff(fn, flow, y, x, c)
        assert abs(a - f) / max(abs(a), abs(f)) < 1e-4


def test_quad_gradient_manual_fd():
    h, w = 16, 16
    rng = np.random.default_rng(11)
    bundle = {}
    for d in DIRECTIONS:
        base = rng.integers(-1, 2, (h, w, 2)).astype(np.float64)
        bundle[d] = base + rng.uniform(0.25, 0.75, (h, w, 2))
    masks = {d: np.ones((h, w), dtype=np.uint8) for d in DIRECTIONS}
    cfg = LossConfig()

    _, grads, _ = quad_loss(bundle, masks, cfg)
    d = (1, 3)

    def fn(f):
        b = dict(bundle)
        b[d] = f
        return quad_loss(b, masks, cfg, want_grad=False)[0]

    for (y, x, c) in top_interior_coords(grads[d], 5, 3):
        a = grads[d][y, x, c]
        f = central_diff(fn, bundle[d], y, x, c)
        assert abs(a - f) / max(abs(a), abs(f)) < 1e-4


def test_smoothness_gradient_manual_fd():
    rng = np.random.default_rng(17)
    field = rng.standard_normal((12, 14, 2))
    cfg = LossConfig()
    val, grad = smoothness_loss(field, cfg)
    assert val > 0.0
    fn = lambda f: smoothness_loss(f, cfg, want_grad=False)[0]
    for (y, x, c) in top_interior_coords(grad, 2, 4):
        a = grad[y, x, c]
        f = central_diff(fn, field, y, x, c)
        assert abs(a - f) / max(abs(a), abs(f)) < 1e-4


def test_gradcheck_small_budget_passes():
    res = run_gradcheck(n_instances=6, size=12, tol=1e-4, seed=0)
    assert set(res.families) == set(FAMILIES)
    for fam in FAMILIES:
        fr = res.families[fam]
        assert fr.n_probes > 0
        assert fr.max_rel_err < 1e-4
    assert res.ok
    assert res.max_rel_err < 1e-4


def test_gradcheck_deterministic():
    a = run_gradcheck(n_instances=3, size=12, tol=1e-4, seed=5)
    b = run_gradcheck(n_instances=3, size=12, tol=1e-4, seed=5)
    for fam in FAMILIES:
        assert a.families[fam].max_rel_err == b.families[fam].max_rel_err
        assert a.families[fam].n_probes == b.families[fam].n_probes
        assert a.families[fam].worst == b.families[fam].worst


def test_gradcheck_rows_report():
    res = run_gradcheck(n_instances=2, size=12, tol=1e-4, seed=1)
    rows = res.rows()
    assert len(rows) == len(FAMILIES)
    for name, n_probes, err, verdict in rows:
        assert name in FAMILIES
        assert n_probes > 0
        assert verdict == ("ok" if err < 1e-4 else "FAIL")
