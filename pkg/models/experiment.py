"""
Experiment runner: configuration schema, seeded execution of a method on a
preset, CSV emission, oracle comparisons and the aggregated report.

Separated from the CLI so the same runner can be driven from tests or other
front-ends.
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from models import __version__
from models import autodiff as ad
from models import bench, nn
from models.errors import ConfigError, MeanFieldError, ModelValidationError
from models.model import (
    FbsdeSpec,
    ModelSpec,
    PRESETS,
    build_preset,
    hat_alpha_lq,
    lq_to_fbsde,
)
from models.simulate import (
    TimeGrid,
    draw_sample,
    rollout,
    sample_initial,
    sample_noise,
    seed_words,
)
from models.solver_fbsde import (
    evaluate_fbsde,
    train_fbsde,
    y0_estimate,
    y0_vs_rho_curve,
)
from models.solver_mfc import (
    SCHEDULES,
    OptimizerConfig,
    TrainConfig,
    make_control,
    train,
)
from utils import csv_io
from utils.compare import gaps

LOGGER = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MFC_SOLVER_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "results"
# cells below this fraction of the peak initial density are left out of Y_0 profiles
PROFILE_DENSITY_FLOOR = 1e-3

METHODS = ("mfc", "fbsde", "bench-riccati", "bench-pde")
COMPARE_TARGETS = ("riccati", "pde", "closed-form")
BENCH_METHODS = ("bench-riccati", "bench-pde")


# -- configuration ---------------------------------------------------------------


@dataclass
class PdeConfig:
    n_x: int = 400
    n_steps: int = 200
    max_iters: int = 200
    damping: float = 0.5
    tol: float = 1e-5

    def picard(self) -> bench.PicardConfig:
        return bench.PicardConfig(self.max_iters, self.damping, self.tol)


@dataclass
class DumpConfig:
    """How much of each run goes to disk."""

    particles: int = 20
    histogram_bins: int = 50
    pde_stride: int = 10
    checkpoints: bool = False


@dataclass
class ExperimentConfig:
    preset: str
    params: Dict[str, Any] = field(default_factory=dict)
    method: str = "mfc"
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: Optional[str] = None
    compare: List[str] = field(default_factory=list)
    thresholds: Dict[str, float] = field(default_factory=dict)
    rho_list: List[float] = field(default_factory=list)
    pde: PdeConfig = field(default_factory=PdeConfig)
    dump: DumpConfig = field(default_factory=DumpConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Parse and validate a configuration tree; errors name the field path."""
        if not isinstance(data, dict):
            raise ConfigError(None, "the configuration must be a mapping")
        _reject_unknown(data, {f.name for f in fields(cls)}, "")
        preset, params = _parse_preset(data.get("preset"))
        method = data.get("method", "mfc")
        if method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}, got {method!r}")
        seeds = _int_list(data.get("seeds", [0]), "seeds")
        if not seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds", "seeds must be distinct")
        compare = list(data.get("compare") or [])
        for i, target in enumerate(compare):
            if target not in COMPARE_TARGETS:
                raise ConfigError(
                    f"compare[{i}]", f"unknown oracle {target!r} ({', '.join(COMPARE_TARGETS)})"
                )
        thresholds = data.get("thresholds") or {}
        if not isinstance(thresholds, dict):
            raise ConfigError("thresholds", "must be a mapping metric -> maximum")
        thresholds = {
            str(k): _number(v, f"thresholds.{k}", minimum=0.0) for k, v in thresholds.items()
        }
        rho_list = [
            _number(v, f"rho_list[{i}]", minimum=0.0)
            for i, v in enumerate(data.get("rho_list") or [])
        ]
        output_dir = data.get("output_dir")
        config = cls(
            preset=preset,
            params=params,
            method=method,
            train=_parse_train(data.get("train") or {}),
            seeds=seeds,
            output_dir=None if output_dir is None else str(output_dir),
            compare=compare,
            thresholds=thresholds,
            rho_list=rho_list,
            pde=_parse_pde(data.get("pde") or {}),
            dump=_parse_simple(DumpConfig, data.get("dump") or {}, "dump"),
        )
        config.validate()
        return config

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise ConfigError(None, f"{path}: invalid YAML ({exc})") from exc
        return cls.from_dict(data or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "preset": {"name": self.preset, "params": dict(self.params)},
            "method": self.method,
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "compare": list(self.compare),
            "thresholds": dict(self.thresholds),
            "rho_list": list(self.rho_list),
            "pde": asdict(self.pde),
            "dump": asdict(self.dump),
        }

    def build_spec(self):
        try:
            return build_preset(self.preset, self.params)
        except ModelValidationError as exc:
            raise ConfigError("preset.params", str(exc)) from exc

    def validate(self) -> None:
        """Preset/method compatibility (the preset is built once to check it)."""
        spec = self.build_spec()
        if self.method == "mfc" and not isinstance(spec, ModelSpec):
            kind = "a mean field game" if spec.mean_field_game else "an FBSDE"
            raise ConfigError(
                "method", f"'{self.preset}' is {kind}; the mfc solver does not apply, use fbsde"
            )
        if self.method == "fbsde" and isinstance(spec, ModelSpec):
            if spec.lq is None or spec.terminal_grad is None or spec.common_noise.kind != "none":
                raise ConfigError("method", f"'{self.preset}' has no FBSDE form")
        if self.method == "bench-riccati" and not _has_riccati(spec):
            raise ConfigError("method", f"no Riccati oracle for '{self.preset}'")
        if self.method == "bench-pde" and not _has_pde(spec):
            raise ConfigError("method", f"no PDE oracle for '{self.preset}'")
        if self.rho_list:
            if self.method != "fbsde":
                raise ConfigError("rho_list", "only used by the fbsde method")
            if not isinstance(spec, FbsdeSpec) or "rho" not in spec.params or spec.x0 is None:
                raise ConfigError("rho_list", f"'{self.preset}' has no rho family with fixed x0")
            for i, rho in enumerate(self.rho_list):
                try:
                    build_preset(self.preset, {**self.params, "rho": rho})
                except ModelValidationError as exc:
                    raise ConfigError(f"rho_list[{i}]", str(exc)) from exc
        if "riccati" in self.compare and not _has_riccati(spec):
            raise ConfigError("compare", f"no Riccati oracle for '{self.preset}'")
        if "riccati" in self.compare and self.method == "bench-pde" and not isinstance(spec, ModelSpec):
            raise ConfigError("compare", "the PDE/Riccati feedback check needs an LQ control problem")
        if "pde" in self.compare and not _has_pde(spec):
            raise ConfigError("compare", f"no PDE oracle for '{self.preset}'")
        if "closed-form" in self.compare and self.preset != "sincos":
            raise ConfigError("compare", "the closed form is only known for 'sincos'")


def _has_riccati(spec) -> bool:
    if isinstance(spec, ModelSpec):
        return spec.lq is not None and spec.lq.quadratic_terminal
    return spec.name == "systemic-risk"


def _has_pde(spec) -> bool:
    if spec.dim_x != 1:
        return False
    if isinstance(spec, ModelSpec):
        return spec.pde_terms is not None
    return spec.sigma is not None and not (
        spec.common_noise.is_brownian and spec.common_noise.rho > 0.0
    )


def _reject_unknown(data: Dict, allowed, prefix: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown field")


def _number(value, path: str, minimum: Optional[float] = None, strict: bool = False) -> float:
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(path, f"must be a number, got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(path, f"must be {'>' if strict else '>='} {minimum:g}")
    return value


def _integer(value, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def _int_list(values, path: str) -> List[int]:
    if not isinstance(values, (list, tuple)):
        raise ConfigError(path, "must be a list")
    return [_integer(v, f"{path}[{i}]") for i, v in enumerate(values)]


def _parse_preset(value) -> Tuple[str, Dict[str, Any]]:
    if isinstance(value, str):
        value = {"name": value}
    if not isinstance(value, dict) or "name" not in value:
        raise ConfigError("preset", "must be a mapping with 'name' (and optional 'params')")
    _reject_unknown(value, {"name", "params"}, "preset.")
    name = value["name"]
    if name not in PRESETS:
        raise ConfigError(
            "preset.name", f"unknown preset {name!r} (available: {', '.join(sorted(PRESETS))})"
        )
    params = value.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("preset.params", "must be a mapping")
    for key, param in params.items():
        _number(param, f"preset.params.{key}")
    return name, dict(params)


def _parse_simple(cls, data: Dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "must be a mapping")
    defaults = cls()
    _reject_unknown(data, {f.name for f in fields(cls)}, f"{prefix}.")
    values = {}
    for key, value in data.items():
        path = f"{prefix}.{key}"
        current = getattr(defaults, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(path, "must be true or false")
            values[key] = value
        elif isinstance(current, int):
            values[key] = _integer(value, path, minimum=1)
        else:
            values[key] = _number(value, path)
    return cls(**values)


def _parse_pde(data: Dict) -> PdeConfig:
    config = _parse_simple(PdeConfig, data, "pde")
    if config.n_x < 3:
        raise ConfigError("pde.n_x", "must be >= 3")
    if not 0.0 < config.damping <= 1.0:
        raise ConfigError("pde.damping", "must lie in (0, 1]")
    if config.tol <= 0.0:
        raise ConfigError("pde.tol", "must be > 0")
    return config


def _parse_optimizer(data: Dict) -> OptimizerConfig:
    if not isinstance(data, dict):
        raise ConfigError("train.optimizer", "must be a mapping")
    _reject_unknown(data, {f.name for f in fields(OptimizerConfig)}, "train.optimizer.")
    values = dict(data)
    kind = values.get("kind", "adam")
    if kind not in SCHEDULES:
        raise ConfigError("train.optimizer.kind", f"must be one of {', '.join(SCHEDULES)}")
    for key in ("lr", "factor", "beta1", "beta2", "eps"):
        if key in values:
            values[key] = _number(values[key], f"train.optimizer.{key}")
    if values.get("lr", 1.0) <= 0.0:
        raise ConfigError("train.optimizer.lr", "must be > 0")
    if "every" in values:
        values["every"] = _integer(values["every"], "train.optimizer.every", minimum=1)
    for key in ("beta1", "beta2"):
        if key in values and not 0.0 <= values[key] < 1.0:
            raise ConfigError(f"train.optimizer.{key}", "must lie in [0, 1)")
    return OptimizerConfig(**values)


_TRAIN_INTS = ("iterations", "batch", "n_steps", "eval_every", "eval_batch", "ma_window")


def _parse_train(data: Dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("train", "must be a mapping")
    _reject_unknown(data, {f.name for f in fields(TrainConfig)}, "train.")
    values = dict(data)
    for key in _TRAIN_INTS:
        if key in values:
            values[key] = _integer(values[key], f"train.{key}", minimum=1)
    for key in ("seed", "eval_seed"):
        if key in values:
            values[key] = _integer(values[key], f"train.{key}", minimum=0)
    if values.get("horizon") is not None:
        values["horizon"] = _number(values["horizon"], "train.horizon", minimum=0.0, strict=True)
    if values.get("grad_tol") is not None:
        values["grad_tol"] = _number(values["grad_tol"], "train.grad_tol", minimum=0.0)
    if "hidden" in values:
        values["hidden"] = tuple(_int_list(values["hidden"], "train.hidden"))
        if any(h < 1 for h in values["hidden"]):
            raise ConfigError("train.hidden", "layer widths must be >= 1")
    if values.get("activation", "relu") not in nn.ACTIVATIONS:
        raise ConfigError("train.activation", f"must be one of {', '.join(nn.ACTIVATIONS)}")
    if values.get("init_scheme", "uniform_scaled") not in nn.INIT_SCHEMES:
        raise ConfigError("train.init_scheme", f"must be one of {', '.join(nn.INIT_SCHEMES)}")
    if values.get("clamp") is not None:
        clamp = values["clamp"]
        if not isinstance(clamp, (list, tuple)) or len(clamp) != 2:
            raise ConfigError("train.clamp", "must be [lo, hi]")
        lo = _number(clamp[0], "train.clamp[0]")
        hi = _number(clamp[1], "train.clamp[1]")
        if lo > hi:
            raise ConfigError("train.clamp", f"lo={lo} > hi={hi}")
        values["clamp"] = (lo, hi)
    values["optimizer"] = _parse_optimizer(values.get("optimizer") or {})
    return TrainConfig(**values)


# -- report ----------------------------------------------------------------------


@dataclass
class RunResult:
    seed: int
    metrics: Dict[str, float] = field(default_factory=dict)
    files: List[str] = field(default_factory=list)
    runtime: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def aggregate_metrics(runs: Sequence[RunResult]) -> Dict[str, Dict[str, float]]:
    """Mean and sample standard deviation (ddof=1) of every metric over the successful runs."""
    table: Dict[str, List[float]] = {}
    for run in runs:
        if not run.ok:
            continue
        for name, value in run.metrics.items():
            table.setdefault(name, []).append(float(value))
    out = {}
    for name, values in sorted(table.items()):
        data = np.asarray(values)
        out[name] = {
            "mean": float(np.mean(data)),
            "std": float(np.std(data, ddof=1)) if data.size > 1 else 0.0,
            "n": int(data.size),
        }
    return out


@dataclass
class Report:
    config: Dict[str, Any]
    runs: List[RunResult]
    output_dir: str
    runtime: float = 0.0
    breaches: List[str] = field(default_factory=list)
    version: str = __version__
    implementer_defaults: bool = False

    @property
    def aggregate(self) -> Dict[str, Dict[str, float]]:
        return aggregate_metrics(self.runs)

    @property
    def oracle_gaps(self) -> Dict[str, float]:
        return {
            name: stats["mean"] for name, stats in self.aggregate.items() if "gap" in name
        }

    @property
    def success(self) -> bool:
        return all(run.ok for run in self.runs) and not self.breaches

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "config": self.config,
            "implementer_defaults": self.implementer_defaults,
            "runs": [asdict(run) for run in self.runs],
            "aggregate": self.aggregate,
            "oracle_gaps": self.oracle_gaps,
            "breaches": list(self.breaches),
            "success": self.success,
            "runtime": self.runtime,
            "output_dir": self.output_dir,
        }

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(_jsonable(self.to_dict()), handle, indent=2, sort_keys=True)
            handle.write("\n")
        return path


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


# -- runner ----------------------------------------------------------------------


def resolve_output_dir(config: ExperimentConfig, out: Optional[str] = None) -> Path:
    """--out, then ``output_dir`` of the config, then $MFC_SOLVER_OUTPUT_ROOT/<preset>-<method>."""
    if out:
        return Path(out)
    if config.output_dir:
        return Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)
    return Path(root) / f"{config.preset}-{config.method}"


class ExperimentRunner:
    """Runs one configured experiment across its seeds."""

    def __init__(self, config: ExperimentConfig, output_dir: Union[str, Path], threads: int = 1):
        if threads < 1:
            raise ValueError("threads must be >= 1")
        self.config = config
        self.output_dir = Path(output_dir)
        self.threads = threads
        self.spec = config.build_spec()

    def run(self) -> Report:
        started = time.perf_counter()
        seeds = self.config.seeds[:1] if self.config.method in BENCH_METHODS else self.config.seeds
        LOGGER.info(
            f"Ejecutando {self.config.method} sobre '{self.config.preset}' "
            f"({len(seeds)} semilla(s)) -> {self.output_dir}"
        )
        if self.threads > 1 and len(seeds) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                runs = list(pool.map(self.run_seed, seeds))
        else:
            runs = [self.run_seed(seed) for seed in seeds]

        report = Report(
            config=self.config.to_dict(),
            runs=runs,
            output_dir=str(self.output_dir),
            implementer_defaults=bool(getattr(self.spec, "implementer_defaults", False)),
        )
        report.breaches = self.check_thresholds(report)
        report.runtime = time.perf_counter() - started
        report.write(self.output_dir / "report.json")
        if report.success:
            LOGGER.info(f"✓ Experimento completado en {report.runtime:.1f} s")
        else:
            LOGGER.error("✗ Experimento con fallos o umbrales superados")
        return report

    def check_thresholds(self, report: Report) -> List[str]:
        breaches = []
        aggregate = report.aggregate
        for name, limit in self.config.thresholds.items():
            if name not in aggregate:
                breaches.append(f"{name}: metric not produced")
                LOGGER.warning(f"⚠ Umbral '{name}' sin métrica asociada")
                continue
            value = aggregate[name]["mean"]
            if not value <= limit:
                breaches.append(f"{name}: {value:.6g} > {limit:.6g}")
                LOGGER.error(f"✗ {name} = {value:.6g} supera el umbral {limit:.6g}")
        return breaches

    def run_seed(self, seed: int) -> RunResult:
        directory = self.output_dir / f"seed_{seed:04d}"
        directory.mkdir(parents=True, exist_ok=True)
        result = RunResult(seed=seed)
        started = time.perf_counter()
        handlers: Dict[str, Callable] = {
            "mfc": self._run_mfc,
            "fbsde": self._run_fbsde,
            "bench-riccati": self._run_bench_riccati,
            "bench-pde": self._run_bench_pde,
        }
        try:
            handlers[self.config.method](seed, directory, result)
            LOGGER.info(f"✓ Semilla {seed} completada")
        except MeanFieldError as exc:
            result.error = f"{type(exc).__name__}: {exc}"
            LOGGER.error(f"✗ Semilla {seed}: {exc}")
            trace = getattr(exc, "trace", None)
            if trace is not None and len(trace):
                self._emit(result, csv_io.write_trace(directory / "trace.csv", trace))
        result.runtime = time.perf_counter() - started
        return result

    # -- helpers -----------------------------------------------------------------

    def _emit(self, result: RunResult, path: Path) -> None:
        result.files.append(str(path.relative_to(self.output_dir)))

    def _train_config(self, seed: int, directory: Path) -> TrainConfig:
        checkpoints = str(directory / "checkpoints") if self.config.dump.checkpoints else None
        return replace(self.config.train, seed=seed, checkpoint_dir=checkpoints)

    def _pde_grid(self, horizon: float) -> TimeGrid:
        return TimeGrid(horizon, self.config.pde.n_steps)

    def _eval_seed(self, *extra: int) -> List[int]:
        return seed_words(self.config.train.eval_seed) + list(extra)

    # -- mfc -----------------------------------------------------------------------

    def _run_mfc(self, seed: int, directory: Path, result: RunResult) -> None:
        model: ModelSpec = self.spec
        config = self._train_config(seed, directory)
        grid = config.grid(model.horizon)
        compare = self.config.compare
        riccati = bench.riccati_lq_solve(model, grid) if "riccati" in compare else None
        pde = None
        if "pde" in compare and not model.common_noise.is_jump:
            pde = bench.pde_solve_hjb_fp(
                model, n_x=self.config.pde.n_x, grid=self._pde_grid(model.horizon),
                picard=self.config.pde.picard(),
            )

        oracle = None
        if riccati is not None:
            oracle = lambda t, x: riccati.feedback(t, x)  # noqa: E731
        elif pde is not None:
            oracle = lambda t, x: hat_alpha_lq(model, t, x, None, pde.y(t, x))  # noqa: E731

        params, trace = train(model, config, oracle)
        self._emit(result, csv_io.write_trace(directory / "trace.csv", trace))
        self._emit(result, nn.save(params, directory / "control.bin"))
        self._trace_metrics(trace, result)

        ensemble, noise = draw_sample(model, grid, config.eval_batch, self._eval_seed())
        evaluation = rollout(model, make_control(params, model), ensemble, noise, grid)
        self._emit(
            result,
            csv_io.write_trajectories(
                directory / "trajectories.csv", grid.times, evaluation.trajectories,
                self.config.dump.particles,
            ),
        )
        result.metrics["eval_cost"] = evaluation.total_cost

        if riccati is not None:
            self._emit(result, csv_io.write_riccati(directory / "riccati.csv", riccati))

            def riccati_control(t, x, mu, cn):
                return riccati.feedback(t, ad.value_of(x), float(ad.value_of(mu.mean)[0]))

            reference = rollout(model, riccati_control, ensemble, noise, grid).total_cost
            result.metrics["riccati_cost"] = reference
            result.metrics["optimal_cost"] = riccati.optimal_cost
            cost_gap = abs(evaluation.total_cost - reference)
            result.metrics["cost_gap"] = cost_gap
            # a zero optimal cost leaves only the absolute gap
            result.metrics["cost_gap_rel"] = cost_gap / abs(reference) if reference != 0.0 else cost_gap
        if model.common_noise.is_jump:
            self._common_noise_outputs(model, params, grid, directory, result)

    def _trace_metrics(self, trace, result: RunResult) -> None:
        last = trace.last
        result.metrics.update(
            iterations=float(last.iteration),
            final_loss=last.loss,
            ma_loss=last.ma_loss,
            eval_loss=last.eval_loss,
            grad_norm=last.grad_norm,
        )
        if last.l2_error is not None:
            result.metrics["l2_error_gap"] = last.l2_error
            first = trace.records[0]
            result.metrics["l2_error_first"] = first.l2_error
            result.metrics["l2_error_ratio"] = last.l2_error / max(first.l2_error, 1e-300)

    def _scenario_noise(self, model: ModelSpec, grid: TimeGrid, n: int, seed, scenario: float):
        noise = sample_noise(grid, n, model.dim_w, model.common_noise, seed)
        levels = np.array([model.common_noise.value_at(t, scenario) for t in grid.times])
        return replace(noise, common_path=levels, common_levels=levels, scenario=scenario)

    def _common_noise_outputs(self, model, params, grid, directory, result) -> None:
        c = model.common_noise.magnitude
        n = self.config.train.eval_batch
        jump_step = int(round(model.common_noise.jump_time / grid.dt))
        control = make_control(params, model)
        terminal, pre_jump = {}, {}
        for index, (label, scenario) in enumerate((("plus", c), ("minus", -c))):
            ensemble = sample_initial(model.init_sampler, n, self._eval_seed(2 + index, 0))
            noise = self._scenario_noise(model, grid, n, self._eval_seed(2 + index, 1), scenario)
            paths = rollout(model, control, ensemble, noise, grid).trajectories
            terminal[label] = paths[-1, :, 0]
            pre_jump[label] = paths[jump_step, :, 0]
            result.metrics[f"cond_mean_{label}"] = float(np.mean(terminal[label]))
        result.metrics["pre_jump_mean_gap"] = abs(
            float(np.mean(pre_jump["plus"]) - np.mean(pre_jump["minus"]))
        )
        bins = self.config.dump.histogram_bins
        edges, counts = csv_io.histogram_table(terminal, bins)
        self._emit(result, csv_io.write_histogram(directory / "histogram_terminal.csv", edges, counts))
        edges, counts = csv_io.histogram_table(pre_jump, bins)
        self._emit(result, csv_io.write_histogram(directory / "histogram_prejump.csv", edges, counts))

        if "pde" in self.config.compare:
            solution = bench.pde_solve_common_noise(
                model, n_x=self.config.pde.n_x, grid=self._pde_grid(model.horizon),
                picard=self.config.pde.picard(),
            )
            for label, scenario in (("plus", c), ("minus", -c)):
                oracle_mean = solution.conditional_mean(scenario)
                result.metrics[f"pde_cond_mean_{label}"] = oracle_mean
                result.metrics[f"cond_mean_{label}_gap"] = abs(
                    result.metrics[f"cond_mean_{label}"] - oracle_mean
                )

    # -- fbsde ---------------------------------------------------------------------

    def _fbsde_spec(self, spec=None) -> FbsdeSpec:
        spec = spec or self.spec
        return spec if isinstance(spec, FbsdeSpec) else lq_to_fbsde(spec)

    def _pde_solution(self, spec: FbsdeSpec) -> bench.PdeSolution:
        mode = "hjb" if spec.pde_terms is not None and not spec.mean_field_game else None
        return bench.pde_solve_hjb_fp(
            spec, n_x=self.config.pde.n_x, grid=self._pde_grid(spec.horizon),
            picard=self.config.pde.picard(), mode=mode,
        )

    def _pde_y0(self, spec: FbsdeSpec, points: np.ndarray, solution=None) -> float:
        if solution is None:
            solution = self._pde_solution(spec)
        return float(np.mean(solution.y(0.0, points)))

    def _y_profile_gaps(self, spec, y0_net, evaluation, solution, directory, result) -> None:
        """Y_0 = y0(x) on the occupied PDE cells and simulated Y_T against the PDE gradient."""
        m0 = solution.m[0]
        cells = solution.x[m0 >= PROFILE_DENSITY_FLOOR * np.max(m0)]
        y0_solver = nn.forward(y0_net, cells[:, None])[:, 0]
        y0_pde = solution.y(0.0, cells)
        x_T = evaluation.X[-1, :, 0]
        y_T_solver = evaluation.Y[-1, :, 0]
        y_T_pde = solution.y(spec.horizon, x_T)
        for label, (a, b) in (("t0", (y0_solver, y0_pde)), ("tT", (y_T_solver, y_T_pde))):
            distances = gaps(a, b)
            result.metrics[f"y_profile_{label}_l2_gap"] = distances["l2"]
            result.metrics[f"y_profile_{label}_sup_gap"] = distances["sup"]
        profiles = [(0.0, cells, y0_solver, y0_pde), (spec.horizon, x_T, y_T_solver, y_T_pde)]
        self._emit(result, csv_io.write_y_profiles(directory / "y_profile.csv", profiles))

    def _run_fbsde(self, seed: int, directory: Path, result: RunResult) -> None:
        if self.config.rho_list:
            self._run_rho_curve(seed, directory, result)
            return
        spec = self._fbsde_spec()
        config = self._train_config(seed, directory)
        grid = config.grid(spec.horizon)
        y0_net, z_net, trace = train_fbsde(spec, config)
        self._emit(result, csv_io.write_trace(directory / "trace.csv", trace))
        self._emit(result, nn.save(y0_net, directory / "y0_net.bin"))
        self._emit(result, nn.save(z_net, directory / "z_net.bin"))
        self._trace_metrics(trace, result)

        y0 = y0_estimate(y0_net, spec, config.eval_batch, self._eval_seed(0))
        result.metrics["y0"] = y0
        evaluation = evaluate_fbsde(
            y0_net, z_net, spec, grid, config.eval_batch, self._eval_seed()
        )
        result.metrics["eval_mismatch"] = evaluation.loss
        if spec.dim_x == 1 and spec.dim_y == 1:
            self._emit(
                result,
                csv_io.write_paths_xy(
                    directory / "paths.csv", grid.times, evaluation.X, evaluation.Y,
                    self.config.dump.particles,
                ),
            )
        compare = self.config.compare
        if "closed-form" in compare:
            exact = bench.analytic_y0_decoupled(spec.x0, spec.sigma, spec.horizon)
            result.metrics["y0_closed_form"] = exact
            result.metrics["y0_closed_form_gap"] = abs(y0 - exact)
        if "pde" in compare:
            if spec.x0 is not None:
                points = np.array([spec.x0])
            else:
                points = sample_initial(spec.x0_sampler, config.eval_batch, self._eval_seed(0))
                points = points.states[:, 0]
            solution = self._pde_solution(spec)
            oracle = self._pde_y0(spec, points, solution)
            result.metrics["y0_pde"] = oracle
            result.metrics["y0_pde_gap"] = abs(y0 - oracle)
            if spec.dim_x == 1 and spec.dim_y == 1:
                self._y_profile_gaps(spec, y0_net, evaluation, solution, directory, result)
        if "riccati" in compare:
            self._riccati_path_gaps(spec, evaluation, grid, directory, result)

    def _riccati_path_gaps(self, spec, evaluation, grid, directory, result) -> None:
        if spec.name == "systemic-risk":
            p = spec.params
            solution = bench.riccati_systemic_solve(p["a"], p["q"], p["eps"], p["c"], spec.horizon, grid)
            ensemble, noise = draw_sample(spec, grid, self.config.train.eval_batch, self._eval_seed())
            X, Y = bench.systemic_oracle_paths(spec, solution, ensemble, noise, grid)
            self._emit(
                result,
                csv_io.write_paths_xy(
                    directory / "oracle_paths.csv", grid.times, X, Y, self.config.dump.particles
                ),
            )
        else:
            solution = bench.riccati_lq_solve(self.spec, grid)
            X = evaluation.X
            Y = np.stack(
                [
                    solution.y(t, evaluation.X[n], float(np.mean(evaluation.X[n])))
                    for n, t in enumerate(grid.times)
                ]
            )
        self._emit(result, csv_io.write_riccati(directory / "riccati.csv", solution))
        result.metrics["x_path_gap"] = _time_averaged_l2(evaluation.X, X)
        result.metrics["y_path_gap"] = _time_averaged_l2(evaluation.Y, Y)

    def _run_rho_curve(self, seed: int, directory: Path, result: RunResult) -> None:
        config = self._train_config(seed, directory)
        config = replace(config, checkpoint_dir=None)

        def family(rho: float) -> FbsdeSpec:
            return build_preset(self.config.preset, {**self.config.params, "rho": rho})

        points = y0_vs_rho_curve(family, self.config.rho_list, config)
        self._emit(result, csv_io.write_curve(directory / "curve.csv", points))
        failed = [p for p in points if p.error]
        if failed:
            raise MeanFieldError(
                f"{len(failed)} rho value(s) failed: {', '.join(str(p.rho) for p in failed)}"
            )
        estimates = np.array([p.y0 for p in points])
        if estimates.size > 1:
            result.metrics["max_adjacent_y0_gap"] = float(np.max(np.abs(np.diff(estimates))))
        if "pde" in self.config.compare:
            oracle = np.array([self._pde_y0(family(p.rho), np.array([family(p.rho).x0])) for p in points])
            rows = ((p.rho, y) for p, y in zip(points, oracle))
            self._emit(
                result,
                csv_io.write_csv(directory / "curve_pde.csv", ("rho", "y0_estimate"), rows),
            )
            result.metrics["y0_curve_pde_gap"] = float(np.max(np.abs(estimates - oracle)))
        if "closed-form" in self.config.compare:
            gaps = [
                abs(p.y0 - bench.analytic_y0_decoupled(family(p.rho).x0, family(p.rho).sigma,
                                                         family(p.rho).horizon))
                for p in points
                if p.rho == 0.0
            ]
            if gaps:
                result.metrics["y0_closed_form_gap"] = gaps[0]

    # -- oracles only ----------------------------------------------------------------

    def _run_bench_riccati(self, seed: int, directory: Path, result: RunResult) -> None:
        spec = self.spec
        grid = self._pde_grid(spec.horizon)
        if isinstance(spec, ModelSpec):
            solution = bench.riccati_lq_solve(spec, grid)
            result.metrics["optimal_cost"] = solution.optimal_cost
        else:
            p = spec.params
            solution = bench.riccati_systemic_solve(p["a"], p["q"], p["eps"], p["c"], spec.horizon, grid)
        result.metrics["eta0"] = solution.coefficient("eta", 0.0)
        result.metrics["riccati_residual"] = solution.residual()
        self._emit(result, csv_io.write_riccati(directory / "riccati.csv", solution))

    def _run_bench_pde(self, seed: int, directory: Path, result: RunResult) -> None:
        spec = self.spec
        grid = self._pde_grid(spec.horizon)
        stride = self.config.dump.pde_stride
        picard = self.config.pde.picard()
        if isinstance(spec, ModelSpec) and spec.common_noise.is_jump:
            solution = bench.pde_solve_common_noise(spec, self.config.pde.n_x, grid, picard)
            self._emit(result, csv_io.write_pde_solution(directory / "pde_prejump.csv", solution.pre, stride))
            c = spec.common_noise.magnitude
            for label, scenario in (("plus", c), ("minus", -c)):
                post = solution.post[scenario]
                self._emit(
                    result,
                    csv_io.write_pde_solution(directory / f"pde_{label}.csv", post, stride),
                )
                result.metrics[f"pde_cond_mean_{label}"] = solution.conditional_mean(scenario)
            result.metrics["outer_iterations"] = float(len(solution.residuals))
            parts = [solution.pre, *solution.post.values()]
        else:
            solution = bench.pde_solve_hjb_fp(spec, n_x=self.config.pde.n_x, grid=grid, picard=picard)
            self._emit(result, csv_io.write_pde_solution(directory / "pde.csv", solution, stride))
            result.metrics["picard_iterations"] = float(len(solution.residuals))
            if getattr(spec, "x0", None) is not None:
                result.metrics["y0"] = float(solution.y(0.0, [spec.x0])[0])
            if "riccati" in self.config.compare and isinstance(spec, ModelSpec):
                result.metrics["feedback_sup_gap"] = lq_feedback_gap(spec, solution, grid)
            parts = [solution]
        result.metrics["mass_error"] = max(float(np.max(np.abs(s.mass() - 1.0))) for s in parts)
        result.metrics["min_density"] = min(float(np.min(s.m)) for s in parts)


def _time_averaged_l2(a: np.ndarray, b: np.ndarray) -> float:
    """mean_n sqrt(mean_i |a_n^i - b_n^i|^2)."""
    diff = np.asarray(a) - np.asarray(b)
    per_step = np.sqrt(np.mean(np.sum(diff * diff, axis=-1), axis=-1))
    return float(np.mean(per_step))


def lq_feedback_gap(model: ModelSpec, solution: bench.PdeSolution, grid: TimeGrid) -> float:
    """sup over [x0 -+ 2 sigma sqrt(T)] and the grid times of |PDE feedback - Riccati feedback|."""
    riccati = bench.riccati_lq_solve(model, grid)
    lq = model.lq
    half = 2.0 * lq.sigma * math.sqrt(model.horizon)
    inside = np.abs(solution.x - lq.mu0_mean) <= half
    window = solution.x[inside]
    worst = 0.0
    for n, t in enumerate(solution.times):
        pde_alpha = hat_alpha_lq(model, t, window, None, solution.y_profile(n)[inside])
        mean = float(solution.mean_path()[n])
        gap = np.abs(pde_alpha - riccati.feedback(t, window, mean))
        worst = max(worst, float(np.max(gap)))
    return worst


def run_experiment(
    config: Union[str, Path, ExperimentConfig],
    out: Optional[str] = None,
    seeds: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> Report:
    """Load (if needed), override seeds, run and write the report."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_yaml(config)
    if seeds:
        config = replace(config, seeds=[int(s) for s in seeds])
    return ExperimentRunner(config, resolve_output_dir(config, out), threads).run()
