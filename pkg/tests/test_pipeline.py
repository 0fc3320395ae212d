import json

import numpy as np
import pytest

from margincut import cli, io
from margincut.metrics import margin_error
from margincut.pipeline import (ConfigError, StageError, bundled_configs, load_config, read_scene,
                                run_batch, run_pipeline)

FAST = """
[experiment]
seed = {seed}
name = fast

[camera]
width = 480
height = 360
nir_width = 512
nir_height = 270
{camera}

[planner]
margin = 5
"""


def fast_config(tmp_path, seed=0, camera="", name="fast.ini"):
    p = tmp_path / name
    p.write_text(FAST.format(seed=seed, camera=camera))
    return p


def test_bundled_configs_load():
    paths = bundled_configs()
    assert [p.stem for p in paths] == ["phantom1", "phantom2", "phantom3", "phantom4"]
    radii = [load_config(p).phantom.tumor_radius for p in paths]
    assert radii == [8.5, 17.5, 10.0, 15.0]


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[phantom]\ntumor_diameter = 80\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[planner]\nmargn = 5\n")
    with pytest.raises(ConfigError, match="margn"):
        load_config(bad)
    bad.write_text("[planner]\nspeed = fast\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_overrides_and_environment(tmp_path, monkeypatch):
    p = fast_config(tmp_path)
    cfg = load_config(p, {"seed": 9, "margin": 4.0, "speed": 3.0})
    assert (cfg.seed, cfg.phantom.seed, cfg.planner.margin, cfg.planner.speed) == (9, 9, 4.0, 3.0)
    monkeypatch.setenv("MARGINCUT_OUTPUT_DIR", str(tmp_path / "env"))
    assert load_config(p).output_dir == str(tmp_path / "env")
    assert load_config(p, {"out": tmp_path / "cli"}).output_dir == str(tmp_path / "cli")


def test_invalid_margin_rejected_before_any_stage(tmp_path):
    cfg = load_config(fast_config(tmp_path), {"margin": 0.0, "out": tmp_path / "o"})
    with pytest.raises(ConfigError):
        run_pipeline(cfg)
    assert not (tmp_path / "o").exists()


@pytest.fixture(scope="module")
def fast_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = load_config(fast_config(tmp), {"out": tmp / "out"})
    return tmp, run_pipeline(cfg)


def test_run_outputs_and_report(fast_run):
    tmp, report = fast_run
    out = tmp / "out"
    doc = io.read_json(out / "report.json")
    assert doc == json.loads(json.dumps(report.to_dict()))
    m = report.metrics
    assert m["dsc_2d"] >= 0.99 and m["dsc_3d"] >= 0.95
    assert 40 <= report.planner["estimated_time_s"] <= 120
    assert abs(m["margin_error"]["mean"]) <= 1.5
    for f in report.files.values():
        assert (out / f).is_file()


def test_report_recomputable_from_exports(fast_run):
    tmp, report = fast_run
    out = tmp / "out"
    scene = read_scene(out)
    path = io.read_path_csv(out / "path.csv")
    eps = margin_error(path.positions, scene.tumor_points, 5.0, 0.0)
    m = report.metrics["margin_error"]
    assert abs(eps.mean - m["mean"]) <= 1e-9 and abs(eps.std - m["std"]) <= 1e-9
    assert abs(eps.mae - m["mae"]) <= 1e-9


def test_overwrite_protection(fast_run):
    tmp, report = fast_run
    cfg = load_config(fast_config(tmp), {"out": tmp / "out"})
    with pytest.raises(ConfigError, match="overwrite"):
        run_pipeline(cfg)


def test_stage_error_carries_hint(tmp_path):
    cfg = load_config(fast_config(tmp_path, camera="standoff = 400\nvfov_deg = 0.01"),
                      {"out": tmp_path / "o"})
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "plan"  # the narrow view sees tumor only
    assert "hint" in str(err.value)


def test_external_mask(tmp_path, fast_run):
    tmp, _ = fast_run
    cfg = load_config(fast_config(tmp_path), {"out": tmp_path / "ext", "mask": tmp / "out" / "mask_gt.pgm"})
    rep = run_pipeline(cfg)
    assert rep.metrics["dsc_2d"] == 1.0
    cfg = load_config(fast_config(tmp_path), {"out": tmp_path / "x", "mask": tmp_path / "nope.pgm"})
    with pytest.raises(ConfigError):
        run_pipeline(cfg)


def test_batch_partial_failure(tmp_path):
    good = fast_config(tmp_path, name="good.ini")
    broken = tmp_path / "broken.ini"
    broken.write_text("[planner]\nmargin = -1\n")
    res = run_batch([good, broken], tmp_path / "batch")
    assert list(res.reports) == ["good"] and list(res.failures) == ["broken"]
    rows = res.table_path.read_text().splitlines()
    assert rows[0] == "run_id,hausdorff_mm,dsc_2d,dsc_3d,mean_abs_error_mm,time_estimate_s"
    assert len(rows) == 2
    assert (tmp_path / "batch" / "failures.json").is_file()
    eps = np.loadtxt(res.errors_path, delimiter=",", skiprows=1, usecols=4)
    mae = float(rows[1].split(",")[4])
    assert abs(np.abs(eps).mean() - mae) <= 1e-9
    with pytest.raises(ConfigError):
        run_batch([], tmp_path / "empty")


# -- command line ---------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[planner]\nmargin = 0\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "a")]) == 1
    fail = fast_config(tmp_path, camera="vfov_deg = 0.01", name="fail.ini")
    assert cli.main(["run", "--config", str(fail), "--out", str(tmp_path / "b")]) == 2
    good = fast_config(tmp_path, name="good.ini")
    assert cli.main(["batch", str(good), str(bad), "--out", str(tmp_path / "c")]) == 3
    err = capsys.readouterr().err
    assert "FAILED bad" in err


def test_cli_stage_by_stage(tmp_path):
    cfg = str(fast_config(tmp_path))
    d = tmp_path / "s"
    assert cli.main(["generate", "--config", cfg, "--out", str(d)]) == 0
    assert cli.main(["render", "--config", cfg, "--out", str(d), "--scene", str(d)]) == 0
    assert cli.main(["segment", "--image", str(d / "nir.pgm"), "--out", str(d)]) == 0
    assert io.read_mask(d / "mask.pgm") == io.read_mask(d / "mask_gt.pgm")
    assert cli.main(["plan", "--config", cfg, "--cloud", str(d / "cloud_gt.ply"), "--mask",
                     str(d / "mask.pgm"), "--calibration", str(d / "calibration.ini"),
                     "--out", str(d)]) == 0
    assert cli.main(["evaluate", "--path", str(d / "path.csv"), "--scene", str(d),
                     "--mask", str(d / "mask.pgm"), "--reference-mask", str(d / "mask_gt.pgm"),
                     "--cloud", str(d / "cloud_labeled.ply"), "--out", str(d)]) == 0
    ev = io.read_json(d / "evaluation.json")
    assert ev["dsc_2d"]["mean"] == 1.0
    assert ev["dsc_3d"]["mean"] >= 0.95
    assert abs(ev["margin_error"]["mean"]) <= 1.5
    # existing outputs are protected
    assert cli.main(["segment", "--image", str(d / "nir.pgm"), "--out", str(d)]) == 1
    assert cli.main(["segment", "--image", str(d / "nir.pgm"), "--out", str(d), "--overwrite"]) == 0


def test_cli_plan_needs_calibration_with_mask(tmp_path):
    assert cli.main(["plan", "--cloud", "x.ply", "--mask", "m.pgm", "--out", str(tmp_path)]) == 1


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
