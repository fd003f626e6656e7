"""
Shooting solver for McKean-Vlasov FBSDEs.

The backward equation is run forward from a learned initial value
Y_0 = y0(X_0) with a learned volatility z(t, X_t); both networks are trained
by SGD on the mean squared terminal mismatch |Y_T - G(X_T, mu_T)|^2.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from models import autodiff as ad
from models import nn
from models.errors import MeanFieldError, TrainingDivergedError, UnsupportedModelError
from models.model import FbsdeSpec
from models.simulate import (
    Ensemble,
    NoiseBundle,
    TimeGrid,
    check_finite,
    diffusion_step,
    draw_sample,
    empirical_stats,
    seed_words,
)
from models.solver_mfc import (
    OptimizerState,
    TrainConfig,
    TrainRecord,
    TrainTrace,
    moving_average,
    sgd_step,
)

__all__ = [
    "CurvePoint",
    "FbsdeRollout",
    "FbsdeSpec",
    "evaluate_fbsde",
    "fbsde_rollout",
    "loss_fbsde",
    "train_fbsde",
    "y0_estimate",
    "y0_vs_rho_curve",
]

LOGGER = logging.getLogger(__name__)


@dataclass
class FbsdeRollout:
    X: np.ndarray
    Y: np.ndarray
    mismatch: np.ndarray
    loss: float
    common_levels: np.ndarray
    scenario: Optional[float] = None
    loss_var: Optional[ad.Var] = None


def network_architectures(
    spec: FbsdeSpec, config: TrainConfig
) -> Tuple[nn.Architecture, nn.Architecture]:
    y0_arch = nn.Architecture.mlp(spec.dim_x, config.hidden, spec.dim_y, config.activation)
    z_arch = nn.Architecture.mlp(
        1 + spec.dim_x, config.hidden, spec.dim_y * spec.dim_w, config.activation
    )
    return y0_arch, z_arch


def fbsde_rollout(
    spec: FbsdeSpec,
    y0_net: nn.NetParams,
    z_net: nn.NetParams,
    ensemble0: Ensemble,
    noise: NoiseBundle,
    grid: TimeGrid,
    tape: Optional[ad.Tape] = None,
) -> FbsdeRollout:
    """
    Euler steps for the forward-forward system
    X' = X + B dt + sigma dW, Y' = Y - F dt + z dW, with Y_0 = y0(X_0).
    """
    if y0_net.arch.d_in != spec.dim_x or y0_net.arch.d_out != spec.dim_y:
        raise ValueError("y0 network must map dim_x -> dim_y")
    if z_net.arch.d_in != 1 + spec.dim_x or z_net.arch.d_out != spec.dim_y * spec.dim_w:
        raise ValueError("z network must map 1 + dim_x -> dim_y * dim_w")
    n = ensemble0.n_particles
    if noise.n_particles != n or noise.n_steps != grid.n_steps:
        raise ValueError("noise bundle does not match ensemble and grid")

    y0 = nn.bind(y0_net, tape)
    z_map = nn.bind(z_net, tape)
    dt = grid.dt
    x = ensemble0.states
    y = y0(x)
    X = np.empty((grid.n_steps + 1, n, spec.dim_x))
    Y = np.empty((grid.n_steps + 1, n, spec.dim_y))
    X[0] = x
    Y[0] = ad.value_of(y)
    check_finite(Y[0], 0, "Y")
    for step in range(grid.n_steps):
        t = grid.time(step)
        cn = float(noise.common_levels[step])
        mu = replace(empirical_stats(x), y_mean=ad.mean(y, axis=0))
        z = ad.reshape(
            z_map(ad.concat([np.full((n, 1), t), x], axis=-1)),
            (n, spec.dim_y, spec.dim_w),
        )
        sig = spec.vol(t, x, mu, cn)
        sz = ad.matmul(z, ad.transpose(sig))
        drift = spec.drift(t, x, mu, y, cn)
        driver = spec.driver(t, x, mu, y, sz, cn)
        dw = noise.increments[step]
        x = x + drift * dt + diffusion_step(sig, dw)
        y = y - driver * dt + diffusion_step(z, dw)
        X[step + 1] = ad.value_of(x)
        Y[step + 1] = ad.value_of(y)
        check_finite(X[step + 1], step + 1, "X")
        check_finite(Y[step + 1], step + 1, "Y")

    cn_T = float(noise.common_levels[grid.n_steps])
    gap = y - spec.terminal(x, empirical_stats(x), cn_T)
    mismatch = ad.sum_(gap * gap, axis=-1)
    loss = ad.mean(mismatch)
    return FbsdeRollout(
        X=X,
        Y=Y,
        mismatch=np.asarray(ad.value_of(mismatch)),
        loss=float(ad.value_of(loss)),
        common_levels=noise.common_levels,
        scenario=noise.scenario,
        loss_var=loss if isinstance(loss, ad.Var) else None,
    )


def loss_fbsde(
    y0_net: nn.NetParams,
    z_net: nn.NetParams,
    spec: FbsdeSpec,
    sample_seed,
    config: TrainConfig,
) -> Tuple[float, np.ndarray]:
    """Shooting loss and its gradient over the concatenation (theta_y0, theta_z)."""
    tape = ad.Tape()
    grid = config.grid(spec.horizon)
    ensemble, noise = draw_sample(spec, grid, config.batch, sample_seed)
    result = fbsde_rollout(spec, y0_net, z_net, ensemble, noise, grid, tape=tape)
    if result.loss_var is None:
        return result.loss, np.zeros(y0_net.arch.n_params + z_net.arch.n_params)
    return result.loss, ad.backward(tape, result.loss_var)


def evaluate_fbsde(
    y0_net: nn.NetParams,
    z_net: nn.NetParams,
    spec: FbsdeSpec,
    grid: TimeGrid,
    n_particles: int,
    seed,
) -> FbsdeRollout:
    ensemble, noise = draw_sample(spec, grid, n_particles, seed)
    return fbsde_rollout(spec, y0_net, z_net, ensemble, noise, grid)


def y0_estimate(y0_net: nn.NetParams, spec: FbsdeSpec, n_particles: int = 1000, seed=0) -> float:
    """y0(x0) for a deterministic start, otherwise E[y0(X_0)] on a sample."""
    if spec.x0 is not None:
        return float(nn.forward(y0_net, np.full(spec.dim_x, spec.x0))[0])
    rng = np.random.default_rng(seed_words(seed))
    return float(np.mean(nn.forward(y0_net, spec.x0_sampler(rng, n_particles))[:, 0]))


def train_fbsde(
    spec: FbsdeSpec,
    config: TrainConfig,
    initial: Optional[Tuple[nn.NetParams, nn.NetParams]] = None,
) -> Tuple[nn.NetParams, nn.NetParams, TrainTrace]:
    """Joint SGD / Adam over (theta_y0, theta_z) with a fresh sample per iteration."""
    if not isinstance(spec, FbsdeSpec):
        raise UnsupportedModelError(
            f"'{getattr(spec, 'name', spec)}' is not an FBSDE; convert it first"
        )
    if initial is None:
        y0_arch, z_arch = network_architectures(spec, config)
        y0_net = nn.init(y0_arch, config.seed, config.init_scheme)
        z_net = nn.init(z_arch, config.seed + 1, config.init_scheme)
    else:
        y0_net, z_net = initial
    split = y0_net.arch.n_params
    theta = np.concatenate([y0_net.theta, z_net.theta])
    grid = config.grid(spec.horizon)
    state = OptimizerState(config.optimizer)
    trace = TrainTrace()
    losses: List[float] = []
    started = time.perf_counter()

    iterations = tqdm(
        range(1, config.iterations + 1),
        desc=f"fbsde {spec.name}",
        disable=not config.verbose,
        leave=False,
    )
    for iteration in iterations:
        try:
            loss, grad = loss_fbsde(y0_net, z_net, spec, [config.seed, iteration], config)
            grad_norm = float(np.linalg.norm(grad))
            theta = sgd_step(theta, grad, state)
            y0_net = y0_net.with_theta(theta[:split])
            z_net = z_net.with_theta(theta[split:])
            losses.append(loss)
            stop = config.grad_tol is not None and grad_norm < config.grad_tol
            evaluation = None
            if iteration % config.eval_every == 0 or iteration == config.iterations or stop:
                evaluation = evaluate_fbsde(
                    y0_net, z_net, spec, grid, config.eval_batch, seed_words(config.eval_seed)
                )
        except MeanFieldError as exc:
            LOGGER.error(f"✗ Divergencia en la iteración {iteration}: {exc}")
            raise TrainingDivergedError(iteration, exc, trace) from exc
        if evaluation is not None:
            trace.append(
                TrainRecord(
                    iteration=iteration,
                    loss=loss,
                    ma_loss=moving_average(losses, config.ma_window),
                    eval_loss=evaluation.loss,
                    grad_norm=grad_norm,
                    wall_time=time.perf_counter() - started,
                )
            )
            iterations.set_postfix(loss=f"{evaluation.loss:.4g}")
        if stop:
            LOGGER.info(f"✓ Norma del gradiente {grad_norm:.3e} < {config.grad_tol}: parada")
            trace.stopped_early = True
            break
    return y0_net, z_net, trace


@dataclass
class CurvePoint:
    rho: float
    y0: float
    eval_loss: float
    seed: int
    error: Optional[str] = None


def y0_vs_rho_curve(
    spec_family: Callable[[float], FbsdeSpec],
    rho_list: Sequence[float],
    config: TrainConfig,
    workers: int = 1,
) -> List[CurvePoint]:
    """
    Train one solver per rho and report y0(x0). A failing rho is logged and
    kept in the curve with ``error`` set and a NaN estimate.
    """

    def solve(rho: float) -> CurvePoint:
        spec = spec_family(rho)
        if spec.x0 is None:
            raise ValueError("y0_vs_rho_curve needs a deterministic initial state x0")
        try:
            y0_net, _, trace = train_fbsde(spec, config)
        except MeanFieldError as exc:
            LOGGER.error(f"✗ rho={rho}: {exc}")
            return CurvePoint(rho, float("nan"), float("nan"), config.seed, str(exc))
        point = CurvePoint(rho, y0_estimate(y0_net, spec), trace.last.eval_loss, config.seed)
        LOGGER.info(f"✓ rho={rho:.4g}: Y0={point.y0:.6f}")
        return point

    rhos = [float(r) for r in rho_list]
    if workers > 1 and len(rhos) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(solve, rhos))
    return [solve(rho) for rho in rhos]
