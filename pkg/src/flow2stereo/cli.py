"""Command-line pipelines wiring the modules into reproducible runs.

Subcommands: synth (render a quadset + ground truth), teach (stage-1 solve),
selfsup (stage-2 student), eval (metrics tables), viz (flow colorization),
checkgrad (finite-difference gradient audit). Every artifact-producing run
writes one run_manifest.json capturing command, configuration, seeds, paths,
code version, and wall time, so a run is reproducible from its manifest.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
Verbosity comes from the FLOW2STEREO_LOG environment variable (debug, info,
warning/quiet; default info).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .config import (AppConfig, SelfsupSettings, config_snapshot, load_config_file,
                     parse_kv)
from .field_core import Image, Mask, load_png, save_png
from .geometry import FlowBundle
from .gradcheck import run_gradcheck
from .kitti_io import (evaluate_disparity, evaluate_flow, flow_to_color,
                       read_disparity_png, read_flow_png, write_disparity_png,
                       write_flow_png)
from .losses import LossReport, UndefinedLossError
from .optimize import (SolverDivergenceError, TeacherResult, TraceRow,
                       bundle_epe, solve_teacher, toggled_loss_config)
from .scene_synth import (DIRECTIONS, CameraRig, ConfigError, QuadSet,
                          generate_scene, render_quadset,
                          translating_patch_scene)
from .selfsup import run_selfsup
from .warp_consistency import load_mask_png, save_mask_png

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("flow2stereo")


def _setup_logging():
    level_name = os.environ.get("FLOW2STEREO_LOG", "info").lower()
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warning": logging.WARNING, "quiet": logging.ERROR,
             "error": logging.ERROR}.get(level_name, logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# shared plumbing


def _load_app_config(args) -> AppConfig:
    cfg = AppConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            scene=dataclasses.replace(cfg.scene, seed=seed),
            patch_scene=dataclasses.replace(cfg.patch_scene, seed=seed),
            solver=dataclasses.replace(cfg.solver, seed=seed),
            selfsup=dataclasses.replace(cfg.selfsup, seed=seed),
        )
    return cfg


def _write_manifest(out_dir: str, command: str, args, cfg: AppConfig,
                    inputs: list, outputs: list, t0: float):
    manifest = {
        "command": command,
        "argv": list(sys.argv[1:]) if sys.argv else [],
        "config": config_snapshot(cfg),
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "code_version": __version__,
        "wall_time_s": round(time.time() - t0, 3),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_rig(path: str, rig: CameraRig):
    with open(path, "w", encoding="utf-8") as fh:
        for name in ("f_prime", "baseline", "width", "height", "cx", "cy"):
            fh.write(f"{name} = {getattr(rig, name)!r}\n")


def _read_rig(path: str) -> CameraRig:
    with open(path, "r", encoding="utf-8") as fh:
        kv = parse_kv(fh.read())
    try:
        return CameraRig(float(kv["f_prime"]), float(kv["baseline"]),
                         int(kv["width"]), int(kv["height"]),
                         float(kv["cx"]), float(kv["cy"]))
    except KeyError as exc:
        raise ConfigError(f"rig file {path} is missing {exc}") from None


def _read_quadset(dir_path: str) -> QuadSet:
    rig = _read_rig(os.path.join(dir_path, "rig.txt"))
    images = []
    for v in (1, 2, 3, 4):
        p = os.path.join(dir_path, f"I{v}.png")
        images.append(load_png(p))
    return QuadSet(tuple(images), rig)


def _flow_name(d: tuple) -> str:
    return f"flow_{d[0]}_{d[1]}.png"


def _write_trace_csv(path: str, trace: list):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TraceRow.HEADER)
        for row in trace:
            writer.writerow(row.as_row())


def _print_metrics_table(rows: list):
    """rows: list of (name, MetricsReport)."""
    cols = ("epe_all", "epe_noc", "epe_occ", "fl_all", "fl_noc", "fl_occ",
            "d1_all", "d1_noc", "d1_occ")
    used = [c for c in cols if any(getattr(r, c) is not None for _, r in rows)]
    header = ["name", "n_all", "n_noc", "n_occ"] + used
    widths = [max(len(h), 10) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for name, rep in rows:
        vals = [name, str(rep.n_all), str(rep.n_noc), str(rep.n_occ)]
        for c in used:
            v = getattr(rep, c)
            vals.append("-" if v is None else f"{v:.4f}")
        print("  ".join(v.ljust(w) for v, w in zip(vals, widths)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    t0 = time.time()
    cfg = _load_app_config(args)
    out = _ensure_out(args.out)
    gt_dir = _ensure_out(os.path.join(out, "gt"))
    if cfg.scene_kind == "translating_patch":
        p = cfg.patch_scene
        rig = CameraRig(p.f_prime, p.baseline, p.width, p.height,
                        (p.width - 1) / 2.0, (p.height - 1) / 2.0)
        scene = translating_patch_scene(
            rig, n_patches=p.n_patches, base_depth=p.base_depth,
            depth_gap=p.depth_gap, motion=(p.motion_x, p.motion_y, 0.0),
            jitter=p.jitter, texture_base_cycles=p.texture_base_cycles,
            texture_octaves=p.texture_octaves,
            texture_contrast=p.texture_contrast, seed=p.seed)
    else:
        scene, rig = generate_scene(cfg.scene)
    quad, gt = render_quadset(scene, rig)

    outputs = []
    for v in (1, 2, 3, 4):
        path = os.path.join(out, f"I{v}.png")
        save_png(path, quad.image(v))
        outputs.append(path)
    rig_path = os.path.join(out, "rig.txt")
    _write_rig(rig_path, rig)
    outputs.append(rig_path)
    for d in DIRECTIONS:
        fp = os.path.join(gt_dir, _flow_name(d))
        write_flow_png(fp, gt.flows[d].data)
        mp = os.path.join(gt_dir, f"mask_{d[0]}_{d[1]}.png")
        save_mask_png(mp, gt.masks[d])
        outputs += [fp, mp]
    d0 = os.path.join(gt_dir, "disp_0.png")
    d1 = os.path.join(gt_dir, "disp_1.png")
    write_disparity_png(d0, gt.disparity_t.data)
    write_disparity_png(d1, gt.disparity_t1.data)
    outputs += [d0, d1]
    _write_manifest(out, "synth", args, cfg, [], outputs, t0)
    log.info("synth: wrote %d files to %s", len(outputs) + 1, out)
    return EXIT_OK


def cmd_teach(args) -> int:
    t0 = time.time()
    cfg = _load_app_config(args)
    quad = _read_quadset(args.input)
    out = _ensure_out(args.out)
    toggles = frozenset(args.toggle) if args.toggle else frozenset({"lp", "lq", "lt"})
    loss_cfg = toggled_loss_config(cfg.loss, toggles)
    result = solve_teacher(quad, cfg.solver, loss_cfg, cfg.consistency,
                           threads=args.threads)

    outputs = []
    for d in DIRECTIONS:
        fp = os.path.join(out, _flow_name(d))
        write_flow_png(fp, result.bundle.field(*d).data)
        cp = os.path.join(out, f"conf_{d[0]}_{d[1]}.png")
        save_mask_png(cp, result.confidences[d])
        outputs += [fp, cp]
    trace_path = os.path.join(out, "trace.csv")
    _write_trace_csv(trace_path, result.trace)
    outputs.append(trace_path)
    report_path = os.path.join(out, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        payload = result.report.to_json()
        payload["objective"] = result.objective
        payload["toggles"] = sorted(toggles)
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(report_path)
    _write_manifest(out, "teach", args, cfg, [args.input], outputs, t0)
    log.info("teach: objective %.6f, outputs in %s", result.objective, out)
    return EXIT_OK


def _read_teacher(dir_path: str) -> TeacherResult:
    flows = {}
    confs = {}
    for d in DIRECTIONS:
        fp = os.path.join(dir_path, _flow_name(d))
        flow, _ = read_flow_png(fp)
        flows[d] = flow
        confs[d] = load_mask_png(os.path.join(dir_path, f"conf_{d[0]}_{d[1]}.png"))
    return TeacherResult(bundle=FlowBundle(flows), confidences=confs,
                         trace=[], report=LossReport(), objective=0.0)


def cmd_selfsup(args) -> int:
    t0 = time.time()
    cfg = _load_app_config(args)
    if args.variant:
        cfg = dataclasses.replace(
            cfg, selfsup=dataclasses.replace(cfg.selfsup, variant=args.variant))
    quad = _read_quadset(args.input)
    teacher = _read_teacher(args.teacher)
    out = _ensure_out(args.out)
    proxy_solver = None
    if cfg.selfsup.proxy_iterations > 0:
        proxy_solver = dataclasses.replace(
            cfg.solver, iterations=cfg.selfsup.proxy_iterations)
    result = run_selfsup(quad, teacher, cfg.selfsup.variant,
                         seed=cfg.selfsup.seed, cfg=cfg.solver,
                         loss_cfg=cfg.loss, consistency=cfg.consistency,
                         proxy_solver=proxy_solver, threads=args.threads)

    outputs = []
    for d in DIRECTIONS:
        fp = os.path.join(out, f"student_{_flow_name(d)}")
        write_flow_png(fp, result.bundle.field(*d).data)
        outputs.append(fp)
    csv_path = os.path.join(out, "variant_metrics.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "direction", "selfsup_loss", "objective",
                         "n_proxies"])
        for d in DIRECTIONS:
            writer.writerow([result.variant.tag, f"{d[0]}->{d[1]}",
                             f"{result.report.selfsup.get(d, float('nan')):.9g}",
                             f"{result.objective:.9g}",
                             len(result.transforms)])
    outputs.append(csv_path)
    trace_path = os.path.join(out, "trace.csv")
    _write_trace_csv(trace_path, result.trace)
    outputs.append(trace_path)
    _write_manifest(out, "selfsup", args, cfg, [args.input, args.teacher],
                    outputs, t0)
    log.info("selfsup %s: objective %.6f, outputs in %s",
             result.variant.tag, result.objective, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    gt_dir = args.gt
    rows = []
    for d in DIRECTIONS:
        gp = os.path.join(gt_dir, _flow_name(d))
        if not os.path.exists(gp):
            continue
        pred_path = None
        for prefix in ("", "student_"):
            cand = os.path.join(args.pred, prefix + _flow_name(d))
            if os.path.exists(cand):
                pred_path = cand
                break
        if pred_path is None:
            continue
        pred, pvalid = read_flow_png(pred_path)
        gt, gvalid = read_flow_png(gp)
        if pred.shape != gt.shape:
            raise ConfigError(
                f"dimension mismatch: {pred_path} is {pred.shape[:2]}, "
                f"{gp} is {gt.shape[:2]}")
        noc_path = os.path.join(gt_dir, f"mask_{d[0]}_{d[1]}.png")
        noc = load_mask_png(noc_path).data if os.path.exists(noc_path) else None
        rows.append((f"flow_{d[0]}->{d[1]}",
                     evaluate_flow(pred, gt, gvalid & pvalid, noc)))
    for t, name in ((0, "disp_0"), (1, "disp_1")):
        gp = os.path.join(gt_dir, f"{name}.png")
        pp = os.path.join(args.pred, f"{name}.png")
        if os.path.exists(gp) and os.path.exists(pp):
            pred, pvalid = read_disparity_png(pp)
            gt, gvalid = read_disparity_png(gp)
            if pred.shape != gt.shape:
                raise ConfigError(f"dimension mismatch on {name}")
            rows.append((name, evaluate_disparity(pred, gt, gvalid & pvalid)))
    if not rows:
        raise ConfigError(
            f"nothing to evaluate: no matching files under {args.pred} / {gt_dir}")
    _print_metrics_table(rows)
    if args.out:
        out = _ensure_out(args.out)
        csv_path = os.path.join(out, "metrics.csv")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            first = rows[0][1].as_row()
            writer.writerow(["name"] + list(first.keys()))
            agg = {}
            for name, rep in rows:
                row = rep.as_row()
                writer.writerow([name] + [row[k] for k in row])
                for k, v in row.items():
                    if isinstance(v, (int, float)) and v is not None:
                        agg.setdefault(k, []).append(v)
            writer.writerow(["aggregate_mean"] +
                            [(sum(agg[k]) / len(agg[k]) if k in agg else "")
                             for k in first])
        cfg = _load_app_config(args)
        _write_manifest(out, "eval", args, cfg, [args.pred, gt_dir],
                        [csv_path], t0)
    return EXIT_OK


def cmd_viz(args) -> int:
    t0 = time.time()
    out = _ensure_out(args.out)
    outputs = []
    for path in args.flows:
        flow, valid = read_flow_png(path)
        rgb = flow_to_color(flow, max_mag=args.max_mag)
        rgb[~valid.astype(bool)] = 0
        stem = os.path.splitext(os.path.basename(path))[0]
        dst = os.path.join(out, f"{stem}_color.png")
        save_png(dst, Image(rgb.astype(np.float64) / 255.0))
        outputs.append(dst)
    cfg = _load_app_config(args)
    _write_manifest(out, "viz", args, cfg, list(args.flows), outputs, t0)
    log.info("viz: wrote %d colorizations to %s", len(outputs), out)
    return EXIT_OK


def cmd_checkgrad(args) -> int:
    result = run_gradcheck(n_instances=args.instances, seed=args.seed or 0)
    print(f"{'family':<12} {'probes':>7} {'max rel err':>13}  status")
    for family, probes, err, status in result.rows():
        print(f"{family:<12} {probes:>7} {err:>13.3e}  {status}")
    print(f"overall: max {result.max_rel_err:.3e} "
          f"({'ok' if result.ok else 'FAIL'} at tol {result.tol:g})")
    return EXIT_OK if result.ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flow2stereo",
        description="Synthetic stereo-video flow pipelines: synthesize "
                    "quadsets, solve teacher/student flow bundles, evaluate, "
                    "and visualize.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=seed_default,
                       help="master seed overriding every config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (results are thread-count "
                            "independent)")

    p = sub.add_parser("synth", help="render a quadset with ground truth")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("teach", help="stage-1 solve on a synthesized quadset")
    common(p)
    p.add_argument("input", help="directory produced by synth")
    p.add_argument("--out", required=True)
    p.add_argument("--toggle", action="append", choices=("lp", "lq", "lt"),
                   help="loss terms to enable (repeatable; default all)")
    p.set_defaults(func=cmd_teach)

    p = sub.add_parser("selfsup", help="stage-2 student from teacher outputs")
    common(p)
    p.add_argument("input", help="directory produced by synth")
    p.add_argument("teacher", help="directory produced by teach")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("v1", "v2", "v3", "v4"),
                   help="self-supervision variant (default from config)")
    p.set_defaults(func=cmd_selfsup)

    p = sub.add_parser("eval", help="metrics of predictions vs ground truth")
    common(p)
    p.add_argument("pred", help="directory with predicted flow/disparity PNGs")
    p.add_argument("gt", help="directory with ground-truth PNGs (synth's gt/)")
    p.add_argument("--out", help="also write metrics.csv here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="colorize flow PNGs")
    common(p)
    p.add_argument("flows", nargs="+", help="KITTI flow PNG files")
    p.add_argument("--out", required=True)
    p.add_argument("--max-mag", type=float, default=None,
                   help="saturation magnitude (default: per-field max)")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("checkgrad",
                       help="verify analytic gradients against finite "
                            "differences")
    common(p)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_checkgrad)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SolverDivergenceError, UndefinedLossError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
