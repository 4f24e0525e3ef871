import csv
import dataclasses
import json

import numpy as np
import pytest

from cvflow import cli
from cvflow.config import (
    AbfSection,
    CirclesConfig,
    ConfigError,
    CvConfig,
    EvaluationSection,
    FlowSection,
    GenerationSection,
    LangevinSection,
    ReferenceSection,
    default_config,
    from_dict,
    load_config,
)
from cvflow.data import make_circles, read_csv


def small_circles(tmp_path, **over):
    cfg = default_config("circles2d")
    cfg = dataclasses.replace(
        cfg,
        output_dir=str(tmp_path / "run"),
        circles=CirclesConfig(n_samples=400),
        flow=FlowSection(hidden=[16], epochs=3, batch_size=100, patience=None),
        generation=GenerationSection(n_samples=20, n_time_steps=4, z_values=[0.6], snapshot_times=[0.0, 1.0],
                                     snapshot_samples=10),
        evaluation=EvaluationSection(n_z=3, n_samples=20, n_time_steps=4),
        **over,
    )
    path = tmp_path / "circles.json"
    path.write_text(cfg.validate().dumps())
    return path


def small_mb(tmp_path):
    cfg = default_config("mueller_brown")
    cfg = dataclasses.replace(
        cfg,
        output_dir=str(tmp_path / "mb"),
        langevin=LangevinSection(n_steps=20_000, record_every=50),
        cv=CvConfig(kind="encoder", encoder_hidden=[8], decoder_hidden=[8], epochs=2, batch_size=64,
                    calibrate_range=[-2.6, 3.5]),
        abf=AbfSection(n_steps=2000, equilibration_steps=500, record_every=5, activation_threshold=20),
        flow=FlowSection(hidden=[16], epochs=2, batch_size=64, weight_decay=0.0, patience=None),
        generation=GenerationSection(n_samples=10, n_time_steps=4, z_values=[0.0], snapshot_times=[]),
        evaluation=EvaluationSection(n_z=4, z_range=[-2.9, 3.6], n_samples=20, n_time_steps=4,
                                     density_z_values=[-2.0],
                                     reference=ReferenceSection(n_steps=20, n_chains=4, burn_in=10, record_every=2)),
    )
    path = tmp_path / "mb.json"
    path.write_text(cfg.validate().dumps())
    return path


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr().err


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("name", ["circles2d", "mueller_brown"])
def test_config_roundtrip(name):
    cfg = default_config(name)
    assert from_dict(json.loads(cfg.dumps())) == cfg


def test_config_rejects_unknown_and_bad_values():
    doc = default_config("circles2d").to_dict()
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({**doc, "colour": 1})
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({**doc, "flow": {**doc["flow"], "depth": 3}})
    with pytest.raises(ConfigError):
        from_dict({**doc, "flow": {**doc["flow"], "epochs": 1.5}})
    with pytest.raises(ConfigError):
        from_dict({**doc, "schema_version": 2})
    with pytest.raises(ConfigError):
        from_dict({**doc, "circles": {**doc["circles"], "r_inner": 2.0}})


def test_load_config_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


# -- circles ---------------------------------------------------------------------


def test_circles_noise_free_radii():
    ds = make_circles(200, noise=0.0, seed=1)
    r = np.sort(np.linalg.norm(ds.points, axis=1))
    assert np.allclose(r[:100], 0.5) and np.allclose(r[100:], 1.0)


def test_circles_pipeline_steps(tmp_path, capsys):
    cfg = small_circles(tmp_path)
    run = tmp_path / "run"
    for argv in (["make-dataset"], ["train-flow"], ["generate"], ["evaluate"]):
        code, err = run_cli(capsys, "--config", cfg, *argv)
        assert code == 0, err
    for rel in ("config.json", "manifest.json", "data/circles.csv", "models/flow_flow.json",
                "samples/flow_z+0.600.csv", "metrics/deviation.csv", "metrics/conditional_metrics.csv"):
        assert (run / rel).is_file(), rel
    manifest = json.loads((run / "manifest.json").read_text())
    assert "models/flow_flow.json" in manifest["files"]
    head = open(run / "metrics" / "conditional_metrics.csv").readline().strip()
    assert head == "z,mean_cv,deviation,proportion,data_proportion,n"


def test_generate_with_z_file_and_projection(tmp_path, capsys):
    cfg = small_circles(tmp_path)
    assert run_cli(capsys, "--config", cfg, "make-dataset")[0] == 0
    assert run_cli(capsys, "--config", cfg, "train-flow")[0] == 0
    zf = tmp_path / "z.csv"
    zf.write_text("z\n0.5\n1.0\n")
    code, err = run_cli(capsys, "--config", cfg, "generate", "--z-file", zf, "--project")
    assert code == 0, err
    proj = read_csv(tmp_path / "run" / "samples" / "flow_z+1.000_projected.csv").points
    assert np.all(np.abs(np.sum(proj**2, axis=1) - 1.0) < 1e-3)
    report = list(csv.reader(open(tmp_path / "run" / "samples" / "flow_z+0.500_projection_report.csv")))
    assert report[0] == ["index", "residual", "steps", "converged"] and len(report) == 21


def test_project_command(tmp_path, capsys):
    cfg = small_circles(tmp_path)
    assert run_cli(capsys, "--config", cfg, "make-dataset")[0] == 0
    code, err = run_cli(capsys, "--config", cfg, "project", "--input", tmp_path / "run" / "data" / "circles.csv",
                        "--z", "0.25")
    assert code == 0, err
    out = read_csv(tmp_path / "run" / "samples" / "circles_projected.csv").points
    assert np.all(np.abs(np.sum(out**2, axis=1) - 0.25) < 1e-3)


def test_global_flags_after_subcommand(tmp_path, capsys):
    cfg = small_circles(tmp_path)
    code, err = run_cli(capsys, "make-dataset", "--config", cfg, "--seed", "5", "--out", tmp_path / "other")
    assert code == 0, err
    saved = json.loads((tmp_path / "other" / "config.json").read_text())
    assert saved["seed"] == 5


# -- failures --------------------------------------------------------------------


def test_missing_input_is_io_error_without_outputs(tmp_path, capsys):
    cfg = small_circles(tmp_path)
    code, err = run_cli(capsys, "--config", cfg, "train-flow")
    assert code == cli.EXIT_CODES["io"]
    assert err.startswith("error: io: ")
    assert not (tmp_path / "run").exists()


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": "circles2d", "bogus": 1}))
    code, err = run_cli(capsys, "--config", bad, "make-dataset")
    assert code == cli.EXIT_CODES["config"] and err.startswith("error: config: ")
    assert len(err.strip().splitlines()) == 1


def test_corrupt_checkpoint_is_reported(tmp_path, capsys):
    cfg = small_circles(tmp_path)
    assert run_cli(capsys, "--config", cfg, "make-dataset")[0] == 0
    (tmp_path / "run" / "models").mkdir()
    (tmp_path / "run" / "models" / "flow_flow.json").write_text("{}")
    code, err = run_cli(capsys, "--config", cfg, "generate")
    assert code != 0 and err.startswith("error: ")


def test_experiment_mismatch(tmp_path, capsys):
    cfg = small_circles(tmp_path)
    code, err = run_cli(capsys, "--config", cfg, "reproduce", "mueller_brown")
    assert code == cli.EXIT_CODES["config"]


def test_category_mapping():
    from cvflow.nn import DivergenceError
    from cvflow.projection import ProjectionError

    assert cli._category(ProjectionError("x", 1.0)) == "projection"
    assert cli._category(DivergenceError("x")) == "numerical"
    assert cli._category(FileNotFoundError("x")) == "io"
    assert cli._category(RuntimeError("x")) == "internal"


# -- mueller-brown, miniature --------------------------------------------------------


def test_mueller_brown_reproduce_small(tmp_path, capsys):
    cfg = small_mb(tmp_path)
    code, err = run_cli(capsys, "--config", cfg, "reproduce", "mueller_brown")
    assert code == 0, err
    run = tmp_path / "mb"
    for rel in ("data/unbiased.csv", "data/abf.csv", "data/abf_mean_force.csv", "models/cv.json",
                "models/flow_unbiased.json", "models/flow_abf.json", "metrics/deviation_abf.csv",
                "metrics/comparison.csv", "data/reference_z-2.000.csv"):
        assert (run / rel).is_file(), rel
    rows = list(csv.DictReader(open(run / "metrics" / "comparison.csv")))
    assert any(r["metric"].startswith("tv_vs_reference") for r in rows)


def test_train_cv_zero_epochs(tmp_path, capsys):
    cfg_path = small_mb(tmp_path)
    doc = json.loads(cfg_path.read_text())
    doc["cv"]["epochs"] = 0
    doc["langevin"]["n_steps"] = 2000
    cfg_path.write_text(json.dumps(doc))
    assert run_cli(capsys, "--config", cfg_path, "make-dataset")[0] == 0
    code, err = run_cli(capsys, "--config", cfg_path, "train-cv")
    assert code == 0, err
    assert (tmp_path / "mb" / "models" / "cv.json").is_file()
