"""
Euler-Maruyama simulation of the N-particle controlled McKean-Vlasov system.

The empirical measure entering step n is computed from the states at t_n.
With common noise, one realization is drawn per rollout, so the conditional
mean given the common noise is the population mean of that rollout.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from models import autodiff as ad
from models import nn
from models.errors import DivergenceError, GridMismatchError
from models.model import CommonNoiseSpec, MeasureStats, ModelSpec

LOGGER = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e8

Seed = Union[int, Sequence[int]]
Control = Callable[[float, object, MeasureStats, float], object]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_n = n dt on [0, T]."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def time(self, n: int) -> float:
        return n * self.dt

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


@dataclass(frozen=True)
class Ensemble:
    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.shape[0] < 1:
            raise ValueError("an ensemble needs at least one particle")
        if not np.all(np.isfinite(states)):
            raise ValueError("ensemble states must be finite")
        object.__setattr__(self, "states", states)

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class NoiseBundle:
    """
    Gaussian increments (N_T, N, dim_w) with variance dt plus the common noise.

    ``common_path`` holds the epsilon0 levels on the grid for jump noise, the
    W0 increments for Brownian common noise (also copied into the last noise
    column of every particle) and is empty otherwise. ``common_levels`` is
    the value handed to coefficient functions at each grid time.
    """

    increments: np.ndarray
    common_path: np.ndarray
    common_levels: np.ndarray
    scenario: Optional[float] = None
    seed: Optional[Seed] = None

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_particles(self) -> int:
        return self.increments.shape[1]

    @property
    def dim_w(self) -> int:
        return self.increments.shape[2]

    def coarsen(self, factor: int, common_spec: CommonNoiseSpec) -> "NoiseBundle":
        """Increments of a grid ``factor`` times coarser driven by the same paths."""
        if self.n_steps % factor:
            raise ValueError(f"{self.n_steps} steps not divisible by {factor}")
        n = self.n_steps // factor
        inc = self.increments.reshape(n, factor, self.n_particles, self.dim_w).sum(axis=1)
        levels = self.common_levels[::factor]
        if common_spec.is_brownian:
            path = self.common_path.reshape(n, factor).sum(axis=1)
        elif common_spec.is_jump:
            path = levels
        else:
            path = self.common_path
        return NoiseBundle(inc, path, levels, self.scenario, self.seed)


@dataclass
class RolloutResult:
    trajectories: np.ndarray
    controls: np.ndarray
    running_cost_sum: float
    terminal_cost: float
    total_cost: float
    common_levels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scenario: Optional[float] = None
    # taped objective, set when the rollout was recorded
    loss: Optional[ad.Var] = None


def seed_words(seed: Seed) -> List[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def sample_noise(
    grid: TimeGrid,
    n_particles: int,
    dim_w: int,
    common_spec: Optional[CommonNoiseSpec] = None,
    seed: Seed = 0,
) -> NoiseBundle:
    """Deterministic per ``seed``; increments have variance dt."""
    if n_particles < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    common_spec = common_spec or CommonNoiseSpec.none()
    rng = np.random.default_rng(seed_words(seed))
    sqrt_dt = np.sqrt(grid.dt)
    increments = rng.standard_normal((grid.n_steps, n_particles, dim_w)) * sqrt_dt
    scenario = None
    if common_spec.is_jump:
        common_spec.check_horizon(grid.horizon)
        scenario = common_spec.magnitude if rng.random() < 0.5 else -common_spec.magnitude
        levels = np.array([common_spec.value_at(t, scenario) for t in grid.times])
        path = levels
    elif common_spec.is_brownian:
        if dim_w < 2:
            raise ValueError("Brownian common noise needs dim_w >= 2")
        path = rng.standard_normal(grid.n_steps) * sqrt_dt
        increments[:, :, -1] = path[:, None]
        levels = np.concatenate([[0.0], np.cumsum(path)])
    else:
        path = np.zeros(0)
        levels = np.zeros(grid.n_steps + 1)
    return NoiseBundle(increments, path, levels, scenario, seed)


def sample_initial(sampler, n_particles: int, seed: Seed) -> Ensemble:
    rng = np.random.default_rng(seed_words(seed))
    return Ensemble(sampler(rng, n_particles))


def draw_sample(spec, grid: TimeGrid, n_particles: int, seed: Seed):
    """Initial states and noise of one population sample S."""
    words = seed_words(seed)
    sampler = getattr(spec, "init_sampler", None) or spec.x0_sampler
    ensemble = sample_initial(sampler, n_particles, words + [0])
    noise = sample_noise(grid, n_particles, spec.dim_w, spec.common_noise, words + [1])
    return ensemble, noise


def empirical_stats(ensemble, conditioning: Optional[np.ndarray] = None) -> MeasureStats:
    """
    Mean and second moment over particles.

    ``conditioning`` is an optional boolean mask selecting the particles of one
    common-noise scenario; within a rollout every particle shares the same
    scenario, so it is only needed when pooling rollouts.
    """
    points = ensemble.states if isinstance(ensemble, Ensemble) else ensemble
    if conditioning is not None:
        mask = np.asarray(conditioning, dtype=bool)
        if not mask.any():
            raise ValueError("conditioning mask selects no particle")
        points = ad.getitem(points, mask)
    return MeasureStats(
        mean=ad.mean(points, axis=0),
        second_moment=ad.mean(ad.sum_(points * points, axis=-1)),
        raw_points=points,
    )


def check_finite(values: np.ndarray, step: int, what: str = "X") -> None:
    """Raise DivergenceError naming the first particle outside the bound."""
    bad = ~np.isfinite(values) | (np.abs(values) > DIVERGENCE_BOUND)
    if bad.any():
        rows = bad.reshape(values.shape[0], -1)
        particle = int(np.argwhere(rows.any(axis=1))[0, 0])
        entry = int(np.argmax(rows[particle]))
        value = float(values.reshape(values.shape[0], -1)[particle, entry])
        raise DivergenceError(step, particle, value, what)


def diffusion_step(sig, dw: np.ndarray):
    """sigma(x) dW per particle: (N, dim_x, dim_w) x (N, dim_w) -> (N, dim_x)."""
    return ad.sum_(sig * dw[:, None, :], axis=-1)


def rollout(
    model: ModelSpec,
    control: Control,
    ensemble0: Ensemble,
    noise: NoiseBundle,
    grid: TimeGrid,
    tape: Optional[ad.Tape] = None,
) -> RolloutResult:
    """
    Explicit Euler scheme for every particle; accumulates
    dt * sum_n mean_i f + mean_i g.

    ``control(t, x, mu, cn)`` returns the (N, dim_alpha) controls; when it
    evaluates taped parameters the whole rollout is differentiable.
    """
    n = ensemble0.n_particles
    if noise.n_particles != n:
        raise ValueError(f"ensemble has {n} particles, noise bundle {noise.n_particles}")
    if noise.n_steps != grid.n_steps:
        raise ValueError(f"noise has {noise.n_steps} steps, grid {grid.n_steps}")
    if noise.dim_w != model.dim_w:
        raise ValueError(f"noise dim_w={noise.dim_w}, model dim_w={model.dim_w}")

    dt = grid.dt
    x = ensemble0.states
    trajectories = np.empty((grid.n_steps + 1, n, model.dim_x))
    controls = np.empty((grid.n_steps, n, model.dim_alpha))
    trajectories[0] = x
    running = 0.0
    for step in range(grid.n_steps):
        t = grid.time(step)
        cn = float(noise.common_levels[step])
        mu = empirical_stats(x)
        alpha = nn.clamp_output(control(t, x, mu, cn), model.clamp)
        controls[step] = ad.value_of(alpha)
        drift = model.drift(t, x, mu, alpha, cn)
        running = running + dt * ad.mean(model.running_cost(t, x, mu, alpha, cn))
        x = x + drift * dt + diffusion_step(model.vol(t, x, mu, cn), noise.increments[step])
        values = ad.value_of(x)
        check_finite(values, step + 1)
        trajectories[step + 1] = values

    cn_T = float(noise.common_levels[grid.n_steps])
    terminal = ad.mean(model.terminal_cost(x, empirical_stats(x), cn_T))
    total = running + terminal
    running_value = float(ad.value_of(running))
    terminal_value = float(ad.value_of(terminal))
    return RolloutResult(
        trajectories=trajectories,
        controls=controls,
        running_cost_sum=running_value,
        terminal_cost=terminal_value,
        total_cost=float(ad.value_of(total)),
        common_levels=noise.common_levels,
        scenario=noise.scenario,
        loss=total if isinstance(total, ad.Var) else None,
    )


def w2_upper_bound(ensemble_a, ensemble_b) -> float:
    """sqrt(mean_i |x_i - y_i|^2) for index-aligned ensembles (>= empirical W2)."""
    a = _points(ensemble_a)
    b = _points(ensemble_b)
    if a.shape != b.shape:
        raise GridMismatchError(f"ensemble shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1))))


def exact_w2_1d(ensemble_a, ensemble_b) -> float:
    """Exact W2 between two 1-d empirical measures of equal size (sorted matching)."""
    a = _points(ensemble_a)
    b = _points(ensemble_b)
    if a.shape != b.shape or a.shape[1] != 1:
        raise GridMismatchError("exact_w2_1d needs 1-d ensembles of equal size")
    return float(np.sqrt(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2)))


def _points(ensemble) -> np.ndarray:
    if isinstance(ensemble, Ensemble):
        return ensemble.states
    points = np.asarray(ensemble, dtype=float)
    return points[:, None] if points.ndim == 1 else points


@dataclass
class StrongErrorResult:
    dts: List[float]
    mse: List[float]
    slope: float


def strong_error_experiment(
    model: ModelSpec,
    control: Control,
    grid_coarse: TimeGrid,
    refinement_factor: int,
    n_particles: int,
    seed: Seed = 0,
    levels: int = 4,
    reference_refinement: int = 8,
) -> StrongErrorResult:
    """
    Mean-square terminal gap between Euler paths on successively refined
    grids and a much finer reference grid, all driven by the same Brownian
    paths (coarse increments are sums of fine ones).
    """
    if refinement_factor < 2:
        raise ValueError(f"refinement_factor must be >= 2, got {refinement_factor}")
    if levels < 2:
        raise ValueError("at least two grid levels are needed to fit a rate")
    finest = refinement_factor ** (levels - 1)
    reference_grid = grid_coarse.refine(finest * reference_refinement)
    ensemble0, fine_noise = draw_sample(model, reference_grid, n_particles, seed)
    reference = rollout(model, control, ensemble0, fine_noise, reference_grid)
    x_ref = reference.trajectories[-1]

    dts, mse = [], []
    for level in range(levels):
        factor = finest * reference_refinement // refinement_factor**level
        grid = reference_grid if factor == 1 else TimeGrid(
            grid_coarse.horizon, reference_grid.n_steps // factor
        )
        noise = fine_noise.coarsen(factor, model.common_noise)
        result = rollout(model, control, ensemble0, noise, grid)
        gap = result.trajectories[-1] - x_ref
        dts.append(grid.dt)
        mse.append(float(np.mean(np.sum(gap * gap, axis=-1))))
        LOGGER.debug(f"dt={grid.dt:.4g} mse={mse[-1]:.4g}")
    slope = float(np.polyfit(np.log(dts), np.log(mse), 1)[0])
    return StrongErrorResult(dts, mse, slope)
