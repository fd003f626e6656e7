import json

import numpy as np
import pytest

from models.errors import ConfigError
from models.experiment import (
    OUTPUT_ROOT_ENV,
    ExperimentConfig,
    Report,
    RunResult,
    aggregate_metrics,
    resolve_output_dir,
    run_experiment,
)

SMOKE_TRAIN = {
    "iterations": 10,
    "batch": 32,
    "n_steps": 5,
    "eval_every": 5,
    "eval_batch": 64,
    "hidden": [8],
}


def smoke(**overrides):
    data = {"preset": {"name": "lq"}, "method": "mfc", "train": dict(SMOKE_TRAIN), "seeds": [0]}
    data.update(overrides)
    return data


# -- configuration ---------------------------------------------------------------


def test_config_round_trips_through_dict():
    config = ExperimentConfig.from_dict(
        smoke(compare=["riccati"], thresholds={"cost_gap_rel": 0.5}, seeds=[0, 1])
    )
    assert ExperimentConfig.from_dict(config.to_dict()) == config
    assert config.train.hidden == (8,)


def test_preset_may_be_given_as_plain_name():
    config = ExperimentConfig.from_dict(smoke(preset="minlqg", method="fbsde"))
    assert config.preset == "minlqg"
    assert config.params == {}


def test_numeric_strings_from_yaml_are_accepted():
    data = smoke()
    data["train"]["optimizer"] = {"kind": "adam", "lr": "1e-3"}
    assert ExperimentConfig.from_dict(data).train.optimizer.lr == pytest.approx(1e-3)


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"train": {**SMOKE_TRAIN, "optimizer": {"lr": -1.0}}}, "train.optimizer.lr"),
        ({"train": {**SMOKE_TRAIN, "iterations": 0}}, "train.iterations"),
        ({"train": {**SMOKE_TRAIN, "layers": 3}}, "train.layers"),
        ({"train": {**SMOKE_TRAIN, "activation": "gelu"}}, "train.activation"),
        ({"preset": {"name": "lq", "params": {"R": "abc"}}}, "preset.params.R"),
        ({"preset": {"name": "lq", "params": {"R": -1.0}}}, "preset.params"),
        ({"preset": {"name": "heston"}}, "preset.name"),
        ({"method": "newton"}, "method"),
        ({"seeds": [0, 0]}, "seeds"),
        ({"compare": ["monte-carlo"]}, "compare[0]"),
        ({"compare": ["closed-form"]}, "compare"),
        ({"rho_list": [0.1]}, "rho_list"),
        ({"pde": {"damping": 2.0}}, "pde.damping"),
        ({"extra": 1}, "extra"),
    ],
)
def test_config_errors_name_the_offending_field(patch, field):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(smoke(**patch))
    assert exc.value.field == field
    assert str(exc.value).startswith(f"{field}: ")


def test_mfc_on_a_mean_field_game_is_rejected():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(smoke(preset="systemic-risk"))
    assert "mean field game" in str(exc.value)


def test_from_yaml_reads_a_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("preset: lq\nmethod: bench-riccati\nseeds: [3]\n", encoding="utf-8")
    config = ExperimentConfig.from_yaml(path)
    assert config.method == "bench-riccati"
    assert config.seeds == [3]


def test_invalid_yaml_is_a_config_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("preset: [lq\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(path)


def test_output_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    config = ExperimentConfig.from_dict(smoke())
    assert resolve_output_dir(config) == tmp_path / "root" / "lq-mfc"
    explicit = ExperimentConfig.from_dict(smoke(output_dir=str(tmp_path / "cfg")))
    assert resolve_output_dir(explicit) == tmp_path / "cfg"
    assert resolve_output_dir(explicit, str(tmp_path / "cli")) == tmp_path / "cli"


# -- report ----------------------------------------------------------------------


def test_aggregate_uses_sample_standard_deviation_of_successful_runs():
    runs = [
        RunResult(0, {"cost": 1.0}),
        RunResult(1, {"cost": 3.0}),
        RunResult(2, {"cost": 100.0}, error="DivergenceError: boom"),
    ]
    stats = aggregate_metrics(runs)["cost"]
    assert stats == {"mean": 2.0, "std": pytest.approx(np.sqrt(2.0)), "n": 2}


def test_report_json_replaces_non_finite_values(tmp_path):
    report = Report(config={}, runs=[RunResult(0, {"gap": float("nan")})], output_dir="x")
    data = json.loads(report.write(tmp_path / "r.json").read_text(encoding="utf-8"))
    assert data["runs"][0]["metrics"]["gap"] is None
    assert data["aggregate"]["gap"]["mean"] is None
    assert data["success"] is True


# -- runs ------------------------------------------------------------------------


def test_smoke_run_writes_report_and_files(tmp_path):
    report = run_experiment(ExperimentConfig.from_dict(smoke()), out=str(tmp_path))
    assert report.success
    data = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert data["success"] is True
    assert data["implementer_defaults"] is True
    assert data["runs"][0]["files"] == [
        "seed_0000/trace.csv",
        "seed_0000/control.bin",
        "seed_0000/trajectories.csv",
    ]
    assert data["aggregate"]["iterations"]["mean"] == 10.0


def test_repeated_runs_produce_identical_files(tmp_path):
    config = ExperimentConfig.from_dict(smoke(compare=["riccati"]))
    run_experiment(config, out=str(tmp_path / "a"))
    run_experiment(config, out=str(tmp_path / "b"))
    for name in ("trace.csv", "trajectories.csv", "control.bin", "riccati.csv"):
        first = (tmp_path / "a" / "seed_0000" / name).read_bytes()
        assert first == (tmp_path / "b" / "seed_0000" / name).read_bytes()


def test_riccati_comparison_metrics(tmp_path):
    report = run_experiment(ExperimentConfig.from_dict(smoke(compare=["riccati"])), str(tmp_path))
    metrics = report.runs[0].metrics
    for name in ("riccati_cost", "optimal_cost", "cost_gap_rel", "l2_error_gap", "l2_error_ratio"):
        assert name in metrics
    assert "cost_gap_rel" in report.oracle_gaps


def test_aggregate_is_recomputable_from_runs(tmp_path):
    report = run_experiment(ExperimentConfig.from_dict(smoke(seeds=[0, 1])), str(tmp_path))
    values = [run.metrics["eval_cost"] for run in report.runs]
    stats = report.aggregate["eval_cost"]
    assert stats["mean"] == pytest.approx(np.mean(values))
    assert stats["std"] == pytest.approx(np.std(values, ddof=1))
    assert (tmp_path / "seed_0001" / "trace.csv").exists()


def test_threaded_seeds_match_serial_seeds(tmp_path):
    config = ExperimentConfig.from_dict(smoke(seeds=[0, 1]))
    serial = run_experiment(config, str(tmp_path / "serial"))
    threaded = run_experiment(config, str(tmp_path / "threaded"), threads=2)
    assert [r.metrics for r in serial.runs] == [r.metrics for r in threaded.runs]


def test_seed_override(tmp_path):
    report = run_experiment(ExperimentConfig.from_dict(smoke()), str(tmp_path), seeds=[7])
    assert [run.seed for run in report.runs] == [7]
    assert (tmp_path / "seed_0007").is_dir()


def test_threshold_breach_fails_the_report(tmp_path):
    config = ExperimentConfig.from_dict(smoke(thresholds={"eval_cost": 0.0, "missing": 1.0}))
    report = run_experiment(config, str(tmp_path))
    assert not report.success
    assert any(b.startswith("eval_cost:") for b in report.breaches)
    assert "missing: metric not produced" in report.breaches


def test_diverging_seed_is_reported_not_raised(tmp_path):
    config = ExperimentConfig.from_dict(smoke(preset={"name": "lq", "params": {"A": 1e9}}))
    report = run_experiment(config, str(tmp_path))
    assert not report.success
    assert report.runs[0].error.startswith("TrainingDivergedError")
    assert (tmp_path / "report.json").exists()


def test_common_noise_run_writes_scenario_histograms(tmp_path):
    config = ExperimentConfig.from_dict(smoke(preset="cn-lq"))
    report = run_experiment(config, str(tmp_path))
    metrics = report.runs[0].metrics
    assert {"cond_mean_plus", "cond_mean_minus", "pre_jump_mean_gap"} <= set(metrics)
    assert (tmp_path / "seed_0000" / "histogram_terminal.csv").exists()
    assert (tmp_path / "seed_0000" / "histogram_prejump.csv").exists()


def test_fbsde_run_with_closed_form(tmp_path):
    config = ExperimentConfig.from_dict(
        smoke(preset={"name": "sincos", "params": {"rho": 0.0}}, method="fbsde",
              compare=["closed-form"])
    )
    report = run_experiment(config, str(tmp_path))
    metrics = report.runs[0].metrics
    assert metrics["y0_closed_form"] == pytest.approx(np.sin(1.0) * np.exp(-0.5))
    assert "y0_closed_form_gap" in metrics
    assert (tmp_path / "seed_0000" / "paths.csv").exists()


def test_rho_curve_run_writes_curve(tmp_path):
    config = ExperimentConfig.from_dict(
        smoke(preset="atan-mfg", method="fbsde", rho_list=[0.0, 0.5])
    )
    report = run_experiment(config, str(tmp_path))
    assert report.success
    assert "max_adjacent_y0_gap" in report.runs[0].metrics
    lines = (tmp_path / "seed_0000" / "curve.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "rho,y0_estimate,eval_loss,seed"
    assert len(lines) == 3


def test_bench_methods_run_a_single_seed(tmp_path):
    config = ExperimentConfig.from_dict(
        {"preset": "lq", "method": "bench-riccati", "seeds": [0, 1], "pde": {"n_steps": 50}}
    )
    report = run_experiment(config, str(tmp_path))
    assert len(report.runs) == 1
    assert report.runs[0].metrics["riccati_residual"] < 1e-6


def test_bench_pde_reports_mass_and_feedback_gap(tmp_path):
    config = ExperimentConfig.from_dict(
        {
            "preset": "lq",
            "method": "bench-pde",
            "compare": ["riccati"],
            "pde": {"n_x": 80, "n_steps": 40},
            "dump": {"pde_stride": 20},
        }
    )
    metrics = run_experiment(config, str(tmp_path)).runs[0].metrics
    assert metrics["mass_error"] < 1e-8
    assert metrics["min_density"] >= 0.0
    assert "feedback_sup_gap" in metrics
    lines = (tmp_path / "seed_0000" / "pde.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1 + 3 * 80


def test_zero_cost_model_reports_absolute_cost_gap(tmp_path):
    params = {"Q": 0.0, "Qbar": 0.0, "QT": 0.0, "QbarT": 0.0}
    config = ExperimentConfig.from_dict(
        smoke(preset={"name": "lq", "params": params}, compare=["riccati"])
    )
    report = run_experiment(config, str(tmp_path))
    metrics = report.runs[0].metrics
    assert report.runs[0].ok
    assert metrics["riccati_cost"] == 0.0
    assert metrics["cost_gap_rel"] == metrics["cost_gap"]
    assert metrics["cost_gap"] == pytest.approx(metrics["eval_cost"])


def test_fbsde_run_compares_y_profiles_with_pde(tmp_path):
    config = ExperimentConfig.from_dict(
        smoke(preset="minlqg", method="fbsde", compare=["pde"],
              pde={"n_x": 60, "n_steps": 20})
    )
    report = run_experiment(config, str(tmp_path))
    metrics = report.runs[0].metrics
    for label in ("t0", "tT"):
        l2 = metrics[f"y_profile_{label}_l2_gap"]
        sup = metrics[f"y_profile_{label}_sup_gap"]
        assert np.isfinite(l2)
        assert 0.0 <= l2 <= sup
    assert "y_profile_tT_sup_gap" in report.oracle_gaps
    lines = (tmp_path / "seed_0000" / "y_profile.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "time,x,y_solver,y_pde"
    final_rows = [line for line in lines[1:] if float(line.split(",")[0]) > 0.0]
    assert len(final_rows) == SMOKE_TRAIN["eval_batch"]
    assert "seed_0000/y_profile.csv" in report.runs[0].files
