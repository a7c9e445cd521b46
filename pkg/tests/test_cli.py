"""End-to-end runs of the command-line pipelines on a small scene."""
import csv
import json
import os

import pytest

from flow2stereo.cli import main
from flow2stereo.optimize import TraceRow

CONFIG_TEXT = """
scene.width = 48
scene.height = 32
scene.patches = 2
scene.seed = 7
solver.pyramid_levels = 2
solver.iterations = 8
"""


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One synth + teach pipeline shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG_TEXT)
    synth_dir = root / "synth"
    assert main(["synth", "--config", str(cfg), "--out", str(synth_dir)]) == 0
    teach_dir = root / "teach"
    assert main(["teach", "--config", str(cfg), str(synth_dir),
                 "--out", str(teach_dir)]) == 0
    return root, cfg, synth_dir, teach_dir


def assert_trees_match(a, b, skip=("run_manifest.json",)):
    """Byte-identical directory trees, manifests excluded (they record
    wall time and the literal argv)."""
    la, lb = sorted(os.listdir(a)), sorted(os.listdir(b))
    assert la == lb
    for name in la:
        pa, pb = os.path.join(a, name), os.path.join(b, name)
        if os.path.isdir(pa):
            assert_trees_match(pa, pb, skip)
        elif name not in skip:
            with open(pa, "rb") as fa, open(pb, "rb") as fb:
                assert fa.read() == fb.read(), f"{name} differs"


def test_synth_file_inventory(cli_run):
    _, _, synth_dir, _ = cli_run
    top = sorted(os.listdir(synth_dir))
    assert top == ["I1.png", "I2.png", "I3.png", "I4.png", "gt",
                   "rig.txt", "run_manifest.json"]
    gt = sorted(os.listdir(synth_dir / "gt"))
    flows = [n for n in gt if n.startswith("flow_")]
    masks = [n for n in gt if n.startswith("mask_")]
    assert len(flows) == 12 and len(masks) == 12
    assert "disp_0.png" in gt and "disp_1.png" in gt
    manifest = json.loads((synth_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["config"]["scene"]["width"] == 48
    assert "wall_time_s" in manifest and "code_version" in manifest


def test_synth_translating_patch_kind(tmp_path):
    cfg = tmp_path / "patch.cfg"
    cfg.write_text("scene.kind = translating_patch\n"
                   "patch_scene.width = 48\n"
                   "patch_scene.height = 32\n"
                   "patch_scene.f_prime = 100.0\n"
                   "patch_scene.n_patches = 1\n"
                   "patch_scene.seed = 3\n")
    out = tmp_path / "patch"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "I1.png").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["scene_kind"] == "translating_patch"


def test_synth_rerun_byte_identical(cli_run, tmp_path):
    _, cfg, synth_dir, _ = cli_run
    again = tmp_path / "again"
    assert main(["synth", "--config", str(cfg), "--out", str(again)]) == 0
    assert_trees_match(synth_dir, again)


def test_teach_outputs(cli_run):
    _, _, _, teach_dir = cli_run
    names = sorted(os.listdir(teach_dir))
    assert len([n for n in names if n.startswith("flow_")]) == 12
    assert len([n for n in names if n.startswith("conf_")]) == 12
    assert "trace.csv" in names and "report.json" in names
    assert "run_manifest.json" in names

    with open(teach_dir / "trace.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TraceRow.HEADER
    assert len(rows) > 2

    report = json.loads((teach_dir / "report.json").read_text())
    assert report["toggles"] == ["lp", "lq", "lt"]
    assert "objective" in report


def test_teach_threads_do_not_change_results(cli_run, tmp_path):
    _, cfg, synth_dir, teach_dir = cli_run
    threaded = tmp_path / "threaded"
    assert main(["teach", "--config", str(cfg), str(synth_dir),
                 "--out", str(threaded), "--threads", "2"]) == 0
    assert_trees_match(teach_dir, threaded)


def test_teach_toggle_subset(cli_run, tmp_path):
    _, cfg, synth_dir, _ = cli_run
    out = tmp_path / "lponly"
    assert main(["teach", "--config", str(cfg), str(synth_dir),
                 "--out", str(out), "--toggle", "lp"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["toggles"] == ["lp"]


def test_selfsup_outputs(cli_run, tmp_path):
    _, cfg, synth_dir, teach_dir = cli_run
    out = tmp_path / "student"
    assert main(["selfsup", "--config", str(cfg), str(synth_dir),
                 str(teach_dir), "--out", str(out), "--variant", "v2"]) == 0
    names = sorted(os.listdir(out))
    assert len([n for n in names if n.startswith("student_flow_")]) == 12
    assert "variant_metrics.csv" in names and "trace.csv" in names
    with open(out / "variant_metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["variant", "direction", "selfsup_loss", "objective",
                       "n_proxies"]
    assert len(rows) == 13
    assert all(r[0] == "v2" and r[4] == "1" for r in rows[1:])


def test_eval_teacher_against_gt(cli_run, tmp_path, capsys):
    _, _, synth_dir, teach_dir = cli_run
    out = tmp_path / "metrics"
    assert main(["eval", str(teach_dir), str(synth_dir / "gt"),
                 "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert "flow_1->2" in table and "epe_all" in table
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "name"
    assert rows[-1][0] == "aggregate_mean"
    assert len(rows) == 2 + 12  # header + 12 flow rows + aggregate


def test_eval_gt_against_itself_is_zero(cli_run, capsys):
    _, _, synth_dir, _ = cli_run
    gt = synth_dir / "gt"
    assert main(["eval", str(gt), str(gt)]) == 0
    out = capsys.readouterr().out
    # 12 flow rows and both disparities, every EPE exactly zero
    assert out.count("0.0000") >= 14


def test_viz_writes_colorization(cli_run, tmp_path):
    _, _, synth_dir, _ = cli_run
    out = tmp_path / "viz"
    flow_png = synth_dir / "gt" / "flow_1_2.png"
    assert main(["viz", str(flow_png), "--out", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["flow_1_2_color.png",
                                       "run_manifest.json"]


def test_checkgrad_command(capsys):
    assert main(["checkgrad", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "photometric" in out and "overall: max" in out and "ok" in out


def test_config_and_input_errors(tmp_path):
    # missing config file
    assert main(["synth", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "x")]) == 2
    # unknown config key
    bad = tmp_path / "bad.cfg"
    bad.write_text("solver.iterationz = 3\n")
    assert main(["synth", "--config", str(bad),
                 "--out", str(tmp_path / "y")]) == 2
    # teach on a directory that is not a synth output
    assert main(["teach", str(tmp_path), "--out", str(tmp_path / "z")]) == 2
    # eval with nothing to compare
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", str(empty), str(empty)]) == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
