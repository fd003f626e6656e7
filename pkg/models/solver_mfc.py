"""
Direct minimization of the sampled mean field control objective over neural
feedback controls (stochastic gradient descent on particle rollouts).
"""

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from models import autodiff as ad
from models import nn
from models.errors import (
    MeanFieldError,
    NonFiniteError,
    TrainingDivergedError,
    UnsupportedModelError,
)
from models.model import ModelSpec
from models.simulate import TimeGrid, draw_sample, rollout, seed_words

LOGGER = logging.getLogger(__name__)

SCHEDULES = ("constant", "step_decay", "adam")

Oracle = Callable[[float, np.ndarray], np.ndarray]


@dataclass
class OptimizerConfig:
    """Learning-rate schedule: constant, step_decay or adam."""

    kind: str = "adam"
    lr: float = 1e-2
    # step_decay: lr * factor ** (step // every)
    factor: float = 0.5
    every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown optimizer '{self.kind}'")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.every < 1:
            raise ValueError("every must be >= 1")


@dataclass
class TrainConfig:
    """Options shared by both solvers."""

    iterations: int = 1000
    batch: int = 256
    horizon: Optional[float] = None
    n_steps: int = 20
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    eval_every: int = 100
    eval_seed: int = 10_000
    eval_batch: int = 1000
    hidden: Tuple[int, ...] = (20, 20)
    activation: str = "relu"
    init_scheme: str = "uniform_scaled"
    clamp: Optional[Tuple[float, float]] = None
    # stop when the gradient norm falls below this value (off when None)
    grad_tol: Optional[float] = None
    ma_window: int = 50
    checkpoint_dir: Optional[str] = None
    verbose: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.clamp is not None and self.clamp[0] > self.clamp[1]:
            raise ValueError(f"invalid clamp box {self.clamp}")

    def grid(self, default_horizon: float) -> TimeGrid:
        return TimeGrid(self.horizon or default_horizon, self.n_steps)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["hidden"] = list(self.hidden)
        if self.clamp is not None:
            data["clamp"] = list(self.clamp)
        return data


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    ma_loss: float
    eval_loss: float
    l2_error: Optional[float] = None
    grad_norm: float = 0.0
    wall_time: float = 0.0


@dataclass
class TrainTrace:
    records: List[TrainRecord] = field(default_factory=list)
    stopped_early: bool = False

    def append(self, record: TrainRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> Optional[TrainRecord]:
        return self.records[-1] if self.records else None

    def record_at(self, iteration: int) -> Optional[TrainRecord]:
        for record in self.records:
            if record.iteration == iteration:
                return record
        return None


class FeedbackControl:
    """phi_theta(t, x[, eps0]) evaluated for every particle."""

    def __init__(self, net: nn.BoundNet, with_common_noise: bool = False):
        self.net = net
        self.with_common_noise = with_common_noise

    def inputs(self, t: float, x, cn: float = 0.0):
        n = len(x)
        parts = [np.full((n, 1), t), x]
        if self.with_common_noise:
            parts.append(np.full((n, 1), cn))
        return ad.concat(parts, axis=-1)

    def __call__(self, t: float, x, mu=None, cn: float = 0.0):
        return self.net(self.inputs(t, x, cn))


def control_architecture(model: ModelSpec, config: TrainConfig) -> nn.Architecture:
    return nn.Architecture.mlp(
        model.control_input_dim, config.hidden, model.dim_alpha, config.activation
    )


def make_control(
    params: nn.NetParams, model: ModelSpec, tape: Optional[ad.Tape] = None
) -> FeedbackControl:
    if params.arch.d_in != model.control_input_dim:
        raise ValueError(
            f"control network takes {params.arch.d_in} inputs, "
            f"model needs {model.control_input_dim}"
        )
    return FeedbackControl(nn.bind(params, tape), model.common_noise.is_jump)


def _with_clamp(model: ModelSpec, config: TrainConfig) -> ModelSpec:
    if config.clamp is None:
        return model
    lo, hi = config.clamp
    box = (np.full(model.dim_alpha, lo), np.full(model.dim_alpha, hi))
    return replace(model, clamp=box)


def loss_mfc(
    params: nn.NetParams,
    model: ModelSpec,
    sample_seed,
    config: TrainConfig,
    tape: Optional[ad.Tape] = None,
) -> Tuple[float, np.ndarray]:
    """Sampled objective J_S(theta) and its exact gradient."""
    tape = tape if tape is not None else ad.Tape()
    grid = config.grid(model.horizon)
    ensemble, noise = draw_sample(model, grid, config.batch, sample_seed)
    control = make_control(params, model, tape)
    result = rollout(model, control, ensemble, noise, grid, tape=tape)
    if result.loss is None:
        return result.total_cost, np.zeros(params.arch.n_params)
    return result.total_cost, ad.backward(tape, result.loss)


def evaluate_cost(
    params: nn.NetParams, model: ModelSpec, grid: TimeGrid, n_particles: int, seed
) -> float:
    """Untaped sampled objective on a fixed population sample."""
    ensemble, noise = draw_sample(model, grid, n_particles, seed)
    return rollout(model, make_control(params, model), ensemble, noise, grid).total_cost


@dataclass
class OptimizerState:
    config: OptimizerConfig
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def learning_rate(self) -> float:
        if self.config.kind == "step_decay":
            return self.config.lr * self.config.factor ** (self.step // self.config.every)
        return self.config.lr


def sgd_step(
    params: Union[nn.NetParams, np.ndarray], gradient: np.ndarray, state: OptimizerState
):
    """One descent step theta - lr * g (or the Adam update); mutates ``state``."""
    gradient = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(gradient)):
        bad = int(np.argwhere(~np.isfinite(gradient))[0, 0])
        raise NonFiniteError("gradient", f"entry {bad} is {gradient[bad]}")
    theta = params.theta if isinstance(params, nn.NetParams) else np.asarray(params)
    lr = state.learning_rate()
    state.step += 1
    cfg = state.config
    if cfg.kind == "adam":
        if state.m is None:
            state.m = np.zeros_like(theta)
            state.v = np.zeros_like(theta)
        state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * gradient
        state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * gradient * gradient
        m_hat = state.m / (1.0 - cfg.beta1**state.step)
        v_hat = state.v / (1.0 - cfg.beta2**state.step)
        updated = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    else:
        updated = theta - lr * gradient
    if isinstance(params, nn.NetParams):
        return params.with_theta(updated)
    return updated


def l2_control_error(
    params: nn.NetParams,
    oracle: Oracle,
    model: ModelSpec,
    grid: TimeGrid,
    n_eval: int,
    seed,
) -> float:
    """
    sqrt(dt * sum_n mean_i |phi(t_n, X_n^i) - alpha*(t_n, X_n^i)|^2) along
    trajectories driven by the learned control.
    """
    learned = make_control(params, model)
    squared = []

    def recording(t, x, mu, cn):
        alpha = learned(t, x, mu, cn)
        gap = alpha - np.asarray(oracle(t, x), dtype=float)
        squared.append(np.mean(np.sum(gap * gap, axis=-1)))
        return alpha

    ensemble, noise = draw_sample(model, grid, n_eval, seed)
    rollout(model, recording, ensemble, noise, grid)
    return float(np.sqrt(grid.dt * np.sum(squared)))


def moving_average(values: Sequence[float], window: int) -> float:
    tail = list(values)[-window:]
    return float(np.mean(tail)) if tail else float("nan")


def train(
    model: ModelSpec,
    config: TrainConfig,
    oracle: Optional[Oracle] = None,
    initial: Optional[nn.NetParams] = None,
) -> Tuple[nn.NetParams, TrainTrace]:
    """
    SGD over a fresh population sample (initial states and noise) per
    iteration; evaluation on a held-out seed every ``eval_every`` iterations
    and at the end.
    """
    if not isinstance(model, ModelSpec):
        raise UnsupportedModelError(
            f"'{getattr(model, 'name', model)}' is not a mean field control problem"
        )
    model = _with_clamp(model, config)
    arch = control_architecture(model, config)
    params = initial or nn.init(arch, config.seed, config.init_scheme)
    grid = config.grid(model.horizon)
    eval_grid = grid
    state = OptimizerState(config.optimizer)
    trace = TrainTrace()
    losses: List[float] = []
    started = time.perf_counter()

    iterations = tqdm(
        range(1, config.iterations + 1),
        desc=f"mfc {model.name}",
        disable=not config.verbose,
        leave=False,
    )
    for iteration in iterations:
        try:
            loss, grad = loss_mfc(params, model, [config.seed, iteration], config)
            grad_norm = float(np.linalg.norm(grad))
            params = sgd_step(params, grad, state)
            losses.append(loss)
            stop = config.grad_tol is not None and grad_norm < config.grad_tol
            record = None
            if iteration % config.eval_every == 0 or iteration == config.iterations or stop:
                record = TrainRecord(
                    iteration=iteration,
                    loss=loss,
                    ma_loss=moving_average(losses, config.ma_window),
                    eval_loss=evaluate_cost(
                        params, model, eval_grid, config.eval_batch, seed_words(config.eval_seed)
                    ),
                    l2_error=(
                        l2_control_error(
                            params, oracle, model, eval_grid, config.eval_batch,
                            [config.eval_seed, 1],
                        )
                        if oracle is not None
                        else None
                    ),
                    grad_norm=grad_norm,
                    wall_time=time.perf_counter() - started,
                )
        except MeanFieldError as exc:
            LOGGER.error(f"✗ Divergencia en la iteración {iteration}: {exc}")
            raise TrainingDivergedError(iteration, exc, trace) from exc
        if record is not None:
            trace.append(record)
            iterations.set_postfix(loss=f"{record.eval_loss:.4g}")
            if config.checkpoint_dir:
                nn.save(params, Path(config.checkpoint_dir) / f"control_{iteration:06d}.bin")
        if stop:
            LOGGER.info(f"✓ Norma del gradiente {grad_norm:.3e} < {config.grad_tol}: parada")
            trace.stopped_early = True
            break
    return params, trace
