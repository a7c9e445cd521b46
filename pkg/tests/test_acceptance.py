"""End-to-end acceptance checks for the full pipeline.

`pytest -v tests/test_acceptance.py` prints one pass/fail line per criterion.
Each test also prints its measured numbers (visible with -s, or on failure).
Criteria 4-6 solve many full flow bundles on one core; the whole file takes
roughly half an hour.
"""
import csv
import json
import os
import time

import numpy as np
import pytest

from flow2stereo.cli import main
from flow2stereo.geometry import (ANCHOR_LAYOUT, FlowBundle,
                                  disparity_change_exact,
                                  disparity_change_linearized,
                                  quad_residual_map, tri_residual_map)
from flow2stereo.gradcheck import run_gradcheck
from flow2stereo.kitti_io import (decode_disparity, decode_flow,
                                  encode_disparity, encode_flow,
                                  evaluate_disparity, evaluate_flow)
from flow2stereo.losses import LossConfig
from flow2stereo.optimize import (SolverConfig, bundle_epe, solve_teacher,
                                  toggled_loss_config)
from flow2stereo.scene_synth import (DIRECTIONS, CameraRig, SceneConfig,
                                     generate_scene, render_quadset,
                                     translating_patch_scene)
from flow2stereo.selfsup import (apply_proxy, proxy_rig, random_transform,
                                 run_selfsup, selfsup_variant)

# shared setup for the two trend criteria: ten seeded scenes with moving
# depth (flow varies within each surface, so the smoothness prior alone
# cannot explain the fields) solved once photometric-only and once with the
# loop terms on
TREND_SOLVER = SolverConfig(pyramid_levels=3, iterations=120)
PHOTO_ONLY = toggled_loss_config(LossConfig(), {"lp"})
FULL_LOSSES = toggled_loss_config(LossConfig(), {"lp", "lq", "lt"})
N_TREND_SCENES = 10


def trend_scene(k: int):
    cfg = SceneConfig(width=96, height=48, patches=2, depth_min=7.0,
                      depth_max=12.0, dz_min=-0.15, dz_max=0.15,
                      dxy_max=0.08, seed=100 + k)
    scene, rig = generate_scene(cfg)
    quad, gt = render_quadset(scene, rig)
    return scene, rig, quad, gt


@pytest.fixture(scope="module")
def trend_runs():
    runs = []
    for k in range(N_TREND_SCENES):
        scene, rig, quad, gt = trend_scene(k)
        photo = solve_teacher(quad, TREND_SOLVER, PHOTO_ONLY)
        full = solve_teacher(quad, TREND_SOLVER, FULL_LOSSES)
        runs.append((k, scene, rig, quad, gt, photo, full))
    return runs


def test_criterion_1_gt_loop_residuals():
    """Quadrilateral and triangle residuals vanish on ground-truth bundles."""
    t0 = time.time()
    worst = 0.0
    n_px = 0
    for k in range(20):
        scene, rig = generate_scene(SceneConfig(seed=k))
        quad, gt = render_quadset(scene, rig)
        bundle = FlowBundle({d: gt.flows[d] for d in DIRECTIONS})
        for a, (s, t, diag) in ANCHOR_LAYOUT.items():
            covis = (gt.masks[(a, s)].data & gt.masks[(a, t)].data
                     & gt.masks[(a, diag)].data).astype(bool)
            n_px += int(covis.sum())
            res = quad_residual_map(bundle, a)
            worst = max(worst, float(np.abs(res[covis]).max()))
            for route in ("stereo", "temporal"):
                res = tri_residual_map(bundle, a, route)
                worst = max(worst, float(np.abs(res[covis]).max()))
    elapsed = time.time() - t0
    print(f"\ncriterion 1: worst |residual| {worst:.3e} over {n_px} co-visible "
          f"pixels, 20 quadsets, {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 10.0


def test_criterion_2_linearization_order():
    """The linearized disparity-change gap shrinks ~4x per depth-step halving."""
    t0 = time.time()
    f_prime, baseline, z = 100.0, 0.5, 10.0
    dz = 1.0
    gaps = []
    for _ in range(4):
        gaps.append(abs(disparity_change_linearized(z, dz, f_prime, baseline)
                        - disparity_change_exact(z, dz, f_prime, baseline)))
        dz /= 2.0
    ratios = [gaps[i] / gaps[i + 1] for i in range(3)]
    elapsed = time.time() - t0
    print(f"\ncriterion 2: gap ratios {[f'{r:.4f}' for r in ratios]}, "
          f"{elapsed:.4f}s")
    for r in ratios:
        assert 3.8 <= r <= 4.2
    assert elapsed < 1.0


def test_criterion_3_gradient_oracle():
    """Analytic gradients of all five loss families match finite differences."""
    t0 = time.time()
    result = run_gradcheck(n_instances=50, size=16, tol=1e-4, seed=0)
    elapsed = time.time() - t0
    print(f"\ncriterion 3: {elapsed:.1f}s")
    for family, probes, err, status in result.rows():
        print(f"  {family:<12} probes {probes:>5}  max rel err {err:.3e}  {status}")
    assert result.max_rel_err < 1e-4
    assert result.ok
    assert elapsed < 120.0


def test_criterion_4_teacher_recovery():
    """Default-budget teacher reaches sub-half-pixel noc EPE on all 12 fields."""
    t0 = time.time()
    rig = CameraRig(180.0, 0.35, 128, 64, 63.5, 31.5)
    scene = translating_patch_scene(rig, n_patches=2, motion=(0.05, 0.02, 0.0),
                                    jitter=0.005, depth_gap=0.2, seed=4)
    quad, gt = render_quadset(scene, rig)
    result = solve_teacher(quad)
    metrics = bundle_epe(result.bundle, gt)
    elapsed = time.time() - t0
    per_dir = {d: metrics["per_direction"][d]["epe_noc"] for d in DIRECTIONS}
    worst = max(per_dir.values())
    print(f"\ncriterion 4: pooled noc {metrics['noc']:.4f}, worst direction "
          f"{worst:.4f}, {elapsed:.0f}s")
    for d in DIRECTIONS:
        print(f"  w{d[0]}->{d[1]}: epe_noc {per_dir[d]:.4f}")
        assert per_dir[d] < 0.5
    assert elapsed < 300.0


def test_criterion_5_constraint_trend(trend_runs):
    """The loop terms improve the median left temporal-flow EPE-noc."""
    photo_epe, full_epe = [], []
    for k, scene, rig, quad, gt, photo, full in trend_runs:
        covis = gt.masks[(1, 3)].data.astype(bool)
        for result, acc in ((photo, photo_epe), (full, full_epe)):
            e = result.bundle.fields[(1, 3)].data - gt.flows[(1, 3)].data
            acc.append(float(np.hypot(e[:, :, 0], e[:, :, 1])[covis].mean()))
    med_photo = float(np.median(photo_epe))
    med_full = float(np.median(full_epe))
    print(f"\ncriterion 5: median EPE-noc photometric-only {med_photo:.4f}, "
          f"with loop terms {med_full:.4f}")
    for k in range(N_TREND_SCENES):
        print(f"  scene {k}: photometric {photo_epe[k]:.4f}  "
              f"full {full_epe[k]:.4f}")
    assert med_full < med_photo


def test_criterion_6_selfsup_trend(trend_runs):
    """Self-supervision beats the teacher where the proxy crop occludes, and
    the full proxy schedule (v3) beats the single crop (v2) overall."""
    teacher_errs, student_errs = [], []
    v2_all, v3_all = [], []
    for k, scene, rig, quad, gt, photo, full in trend_runs:
        v2 = selfsup_variant("v2")
        t = random_transform(96, 48, (100 + k) * 1009, crop_frac=v2.crop_frac,
                             scales=v2.scales, noise_amp=v2.noise_amp)
        pquad = apply_proxy(quad, t)
        _, pgt = render_quadset(scene, proxy_rig(rig, t))
        proxy_teacher = solve_teacher(pquad, TREND_SOLVER, FULL_LOSSES)
        student = run_selfsup(quad, full, "v2", seed=100 + k, cfg=TREND_SOLVER)
        assert student.transforms[0] == t  # same schedule as drawn above

        x0, y0 = t.x0, t.y0
        h2, w2 = t.out_height, t.out_width
        for d in DIRECTIONS:
            proxy_vis = pgt.masks[d].data > 0.5
            full_vis = gt.masks[d].data[y0:y0 + h2, x0:x0 + w2] > 0.5
            crop_occ = (~proxy_vis) & full_vis
            if not crop_occ.any():
                continue
            gtf = pgt.flows[d].data
            dt = proxy_teacher.bundle.fields[d].data - gtf
            ds = student.bundle.fields[d].data[y0:y0 + h2, x0:x0 + w2] - gtf
            teacher_errs.append(np.hypot(dt[:, :, 0], dt[:, :, 1])[crop_occ])
            student_errs.append(np.hypot(ds[:, :, 0], ds[:, :, 1])[crop_occ])

        sv3 = run_selfsup(quad, full, "v3", seed=100 + k, cfg=TREND_SOLVER)
        v2_all.append(bundle_epe(student.bundle, gt)["all"])
        v3_all.append(bundle_epe(sv3.bundle, gt)["all"])
        print(f"  scene {k}: v2 EPE-all {v2_all[-1]:.4f}  "
              f"v3 EPE-all {v3_all[-1]:.4f}")

    teacher_occ = float(np.concatenate(teacher_errs).mean())
    student_occ = float(np.concatenate(student_errs).mean())
    med_v2 = float(np.median(v2_all))
    med_v3 = float(np.median(v3_all))
    print(f"\ncriterion 6: crop-occluded EPE teacher {teacher_occ:.4f} vs "
          f"student {student_occ:.4f}; median EPE-all v2 {med_v2:.4f} vs "
          f"v3 {med_v3:.4f}")
    assert student_occ < teacher_occ
    assert med_v3 <= med_v2


def test_criterion_7_codec_fidelity():
    """PNG codecs are exact on their quantization lattices; metric examples
    reproduce by hand."""
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        h, w = rng.integers(4, 16, 2)
        flow = rng.integers(-20000, 20001, (h, w, 2)).astype(np.float64) / 64.0
        valid = rng.random((h, w)) < 0.8
        dec, dvalid = decode_flow(encode_flow(flow, valid))
        assert np.array_equal(dvalid, valid)
        assert np.array_equal(dec[valid], flow[valid])

        disp = rng.integers(1, 65536, (h, w)).astype(np.float64) / 256.0
        ddec, ddvalid = decode_disparity(encode_disparity(disp, valid))
        assert np.array_equal(ddvalid, valid)
        assert np.array_equal(ddec[valid], disp[valid])

    gt = np.array([[[3.0, 4.0]]])
    pred = np.array([[[6.0, 8.0]]])
    rep = evaluate_flow(pred, gt, np.ones((1, 1), bool))
    assert rep.epe_all == 5.0 and rep.fl_all == 1.0  # err 5 >= max(3, 0.25)

    gt = np.array([[[100.0, 0.0]]])
    pred = np.array([[[104.0, 0.0]]])
    rep = evaluate_flow(pred, gt, np.ones((1, 1), bool))
    assert rep.epe_all == 4.0 and rep.fl_all == 0.0  # err 4 < 5% of 100

    rep = evaluate_disparity(np.array([[54.0]]), np.array([[50.0]]),
                             np.ones((1, 1), bool))
    assert rep.epe_all == 4.0 and rep.d1_all == 1.0  # 4 >= max(3, 2.5)
    rep = evaluate_disparity(np.array([[104.0]]), np.array([[100.0]]),
                             np.ones((1, 1), bool))
    assert rep.epe_all == 4.0 and rep.d1_all == 0.0
    print("\ncriterion 7: 1000 flow + 1000 disparity round trips exact; "
          "hand metric examples exact")


def _assert_trees_match(a, b, skip=("run_manifest.json",)):
    la, lb = sorted(os.listdir(a)), sorted(os.listdir(b))
    assert la == lb
    for name in la:
        pa, pb = os.path.join(a, name), os.path.join(b, name)
        if os.path.isdir(pa):
            _assert_trees_match(pa, pb, skip)
        elif name not in skip:
            with open(pa, "rb") as fa, open(pb, "rb") as fb:
                assert fa.read() == fb.read(), f"{name} differs between reruns"


def test_criterion_8_cli_determinism(tmp_path):
    """synth / teach / selfsup reruns are byte-identical, threads included."""
    t0 = time.time()
    cfg = tmp_path / "run.cfg"
    cfg.write_text("scene.width = 48\nscene.height = 32\nscene.patches = 2\n"
                   "scene.seed = 7\nsolver.pyramid_levels = 2\n"
                   "solver.iterations = 8\n")
    synth_a, synth_b = tmp_path / "synth_a", tmp_path / "synth_b"
    assert main(["synth", "--config", str(cfg), "--out", str(synth_a)]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(synth_b)]) == 0
    _assert_trees_match(synth_a, synth_b)

    teach_a, teach_b = tmp_path / "teach_a", tmp_path / "teach_b"
    assert main(["teach", "--config", str(cfg), str(synth_a),
                 "--out", str(teach_a)]) == 0
    assert main(["teach", "--config", str(cfg), str(synth_a),
                 "--out", str(teach_b), "--threads", "2"]) == 0
    _assert_trees_match(teach_a, teach_b)

    stud_a, stud_b = tmp_path / "student_a", tmp_path / "student_b"
    assert main(["selfsup", "--config", str(cfg), str(synth_a), str(teach_a),
                 "--out", str(stud_a), "--variant", "v3"]) == 0
    assert main(["selfsup", "--config", str(cfg), str(synth_a), str(teach_a),
                 "--out", str(stud_b), "--variant", "v3", "--threads", "2"]) == 0
    _assert_trees_match(stud_a, stud_b)
    print(f"\ncriterion 8: three pipelines byte-identical across reruns and "
          f"thread counts, {time.time() - t0:.1f}s")
