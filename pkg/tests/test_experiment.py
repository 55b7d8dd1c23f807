import json
import math

import numpy as np
import pytest

from koopreach.boundprop import ReachTube
from koopreach.experiment import (ConfigError, ExperimentConfig, PipelineError, RunReport, avg_log_volume, load_config,
                                  run_pipeline)

SMOKE = dict(system="unicycle", horizon=20, K_cal=20, N_test=50, n_train=40, epochs=5, hidden=(32, 32),
             multistep_horizon=5, seed=3)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = ExperimentConfig(**SMOKE, output_dir=str(out / "a"))
    report = run_pipeline(cfg)
    return cfg, report


# -- config -------------------------------------------------------------------

def test_config_defaults_follow_system():
    assert ExperimentConfig(system="unicycle").latent_dim == 10
    assert ExperimentConfig(system="planar_quad").latent_dim == 24
    assert ExperimentConfig(K_cal=100).M_lambda == 50


def test_config_hash_ignores_output_dir():
    a = ExperimentConfig(output_dir="x")
    b = ExperimentConfig(output_dir="y")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ExperimentConfig(seed=1).config_hash()


def test_config_json_roundtrip():
    cfg = ExperimentConfig(**SMOKE)
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.config_hash() == cfg.config_hash()


@pytest.mark.parametrize("bad", [dict(delta=1.5), dict(system="pendulum"), dict(horizon=0), dict(eps=0.0),
                                 dict(calibration_mode="online"), dict(multistep_horizon=50, horizon=10)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sytem": "unicycle"})


def test_load_config_seed_fallback(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"system": "unicycle"}))
    monkeypatch.setenv("KRO_SEED", "17")
    assert load_config(p).seed == 17
    assert load_config(p, seed=4).seed == 4
    p.write_text(json.dumps({"system": "unicycle", "seed": 2}))
    assert load_config(p).seed == 2


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="c.json"):
        load_config(tmp_path / "c.json")


# -- log-volume ---------------------------------------------------------------

def test_log_volume_unit_boxes():
    assert avg_log_volume(ReachTube(np.zeros((7, 3)), np.ones((7, 3)))) == 0.0


def test_log_volume_width_e():
    assert avg_log_volume(ReachTube(np.zeros((4, 5)), np.full((4, 5), math.e))) == pytest.approx(5.0)


def test_log_volume_hand_tube():
    tube = ReachTube(np.zeros((2, 2)), np.array([[2.0, 4.0], [0.5, 1.0]]))
    expected = ((math.log(2) + math.log(4)) + (math.log(0.5) + 0.0)) / 2
    assert avg_log_volume(tube) == pytest.approx(expected, rel=1e-15)


def test_log_volume_floors_degenerate_widths():
    tube = ReachTube(np.zeros((1, 1)), np.zeros((1, 1)))
    assert avg_log_volume(tube) == pytest.approx(math.log(1e-12))


def test_log_volume_unbounded():
    tube = ReachTube(np.zeros((2, 1)), np.array([[1.0], [np.inf]]))
    assert avg_log_volume(tube) == math.inf


# -- pipeline -----------------------------------------------------------------

def test_pipeline_writes_artifacts(smoke_run):
    cfg, report = smoke_run
    for key in ("model", "reference", "plan", "bounds", "krs", "ckrs", "report"):
        assert (cfg.out / report.artifacts[key].split("/")[-1]).exists()
    assert len(report.artifacts["plots"]) == 3
    assert ReachTube.load_json(cfg.out / "krs.json").kind == "KRS"
    assert ReachTube.load_json(cfg.out / "ckrs.json").kind == "CKRS"


def test_pipeline_timing_attribution(smoke_run):
    _, report = smoke_run
    t = report.timings
    assert t["cp"] + t["krs"] <= t["total"]
    assert abs(t["total"] - (t["plan"] + t["cp"] + t["krs"] + t["inflate"])) <= 1e-3


def test_pipeline_coverage_ordering(smoke_run):
    _, report = smoke_run
    assert 0.0 <= report.coverage["krs"] <= report.coverage["ckrs"] <= 1.0
    assert report.avg_log_volume["krs"] <= report.avg_log_volume["ckrs"]
    assert "repo convention" in report.log_volume_note


def test_pipeline_rerun_is_byte_identical(smoke_run, tmp_path):
    cfg, _ = smoke_run
    again = ExperimentConfig(**SMOKE, output_dir=str(tmp_path / "b"))
    run_pipeline(again)
    for name in ("model.json", "krs.json", "ckrs.json", "bounds.json", "plan.json", "krs.csv", "ckrs.csv"):
        assert (cfg.out / name).read_bytes() == (again.out / name).read_bytes(), name
    for name in ("tube_x0.svg", "tube_x1.svg", "tube_x2.svg"):
        assert (cfg.out / "plots" / name).read_bytes() == (again.out / "plots" / name).read_bytes()


def test_report_json_roundtrip(smoke_run, tmp_path):
    cfg, report = smoke_run
    loaded = RunReport.load_json(cfg.out / "report.json")
    assert loaded == report
    loaded.save_json(tmp_path / "r.json")
    assert RunReport.load_json(tmp_path / "r.json") == report


def test_pipeline_labels_failing_stage(smoke_run, tmp_path):
    cfg, _ = smoke_run
    broken = ExperimentConfig(**SMOKE, output_dir=str(tmp_path / "c"))
    broken.out.mkdir()
    (broken.out / "model.json").write_text("{not json")
    with pytest.raises(PipelineError, match=r"\[load-model\]"):
        run_pipeline(broken)


def test_pipeline_insufficient_calibration_is_unbounded(tmp_path, smoke_run):
    cfg0, _ = smoke_run
    cfg = ExperimentConfig(**{**SMOKE, "K_cal": 5, "delta": 0.01}, output_dir=str(tmp_path / "d"))
    cfg.out.mkdir()
    (cfg.out / "model.json").write_bytes((cfg0.out / "model.json").read_bytes())
    report = run_pipeline(cfg, plots=False)
    assert report.unbounded and math.isinf(report.C)
    assert report.coverage["ckrs"] == 1.0
    assert report.avg_log_volume["ckrs"] == math.inf
