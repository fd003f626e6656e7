import argparse
import sys
from pathlib import Path

import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.append(str(ROOT_DIR))

from cli import (  # noqa: E402
    apply_profile,
    build_config,
    build_parser,
    load_profile,
    load_profiles,
)
from models.errors import ConfigError  # noqa: E402
from models.experiment import ExperimentConfig  # noqa: E402


def run_args(**values):
    defaults = dict(config=None, profile=None, out=None, seeds=None, threads=1)
    defaults.update(values)
    return argparse.Namespace(**defaults)


def test_apply_profile_respects_user_overrides():
    data = {"method": "fbsde", "train": {"iterations": 5}}
    profile = {"method": "mfc", "train": {"iterations": 100, "batch": 64}, "seeds": [0, 1]}

    merged = apply_profile(data, profile)

    assert merged["method"] == "fbsde"
    assert merged["train"] == {"iterations": 5, "batch": 64}
    assert merged["seeds"] == [0, 1]
    assert data == {"method": "fbsde", "train": {"iterations": 5}}


def test_every_shipped_profile_is_a_valid_configuration():
    profiles = load_profiles()
    assert {"lq", "minlqg", "sincos", "atan-mfg", "cn-lq", "systemic-risk", "smoke"} <= set(profiles)
    for name, profile in profiles.items():
        config = ExperimentConfig.from_dict(profile)
        assert config.preset == profile["preset"]["name"], name


def test_unknown_profile_returns_none():
    assert load_profile("does-not-exist") is None


def test_build_config_file_wins_over_profile(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("preset: lq\ntrain:\n  iterations: 3\n", encoding="utf-8")
    config = build_config(run_args(config=str(path), profile="smoke"))
    assert config.train.iterations == 3
    assert config.train.batch == 32


def test_build_config_needs_a_source():
    with pytest.raises(ConfigError):
        build_config(run_args())
    with pytest.raises(ConfigError):
        build_config(run_args(profile="does-not-exist"))


def test_parser_reads_run_options():
    args = build_parser().parse_args(
        ["run", "--profile", "lq", "--seeds", "0", "1", "--threads", "2", "--out", "x"]
    )
    assert args.seeds == [0, 1]
    assert args.threads == 2
    assert args.out == "x"


def test_parser_compare_tolerance():
    args = build_parser().parse_args(["compare", "a.json", "b.json", "--tolerance", "0.1"])
    assert (args.first, args.second, args.tolerance) == ("a.json", "b.json", 0.1)
