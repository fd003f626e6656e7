"""
Benchmark oracles: Riccati ODEs for the linear-quadratic cases, a finite
difference solver for the coupled HJB / Fokker-Planck system and closed-form
values for decoupled cases.

The PDE solver discretizes both equations with the same monotone Markov-chain
generator on a cell-centered grid with reflecting (no-flux) walls: central
fluxes where the cell Peclet number is at most one, upwind fluxes elsewhere.
Each time step is implicit in that generator and explicit in the policy and
the measure, which keeps the density nonnegative and its mass exact up to
round-off.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import solve_banded
from tqdm import tqdm

from models.errors import (
    PicardNotConvergedError,
    RiccatiBlowUpError,
    UnsupportedModelError,
)
from models.model import FbsdeSpec, LqParams, MeasureStats, ModelSpec, PdeTerms
from models.simulate import (
    Ensemble,
    NoiseBundle,
    TimeGrid,
    check_finite,
    diffusion_step,
)

LOGGER = logging.getLogger(__name__)

RICCATI_BOUND = 1e8


# -- Riccati oracles -------------------------------------------------------------


@dataclass
class RiccatiSolution:
    """
    Coefficient trajectories of a Riccati system on ``times``.

    ``kind == "lq"``: eta (fluctuation), pi (mean) and chi (constant) with
    d_x u(t, x) = 2 eta (x - xbar) + 2 pi xbar. ``kind == "systemic"``: eta
    with Y = eta (x - mbar).
    """

    kind: str
    times: np.ndarray
    names: Tuple[str, ...]
    coefficients: Dict[str, np.ndarray]
    params: Dict[str, float]
    dense: Callable = field(repr=False)
    rhs: Callable = field(repr=False)
    mean_path: Optional[np.ndarray] = None
    mean_dense: Optional[Callable] = field(default=None, repr=False)
    optimal_cost: Optional[float] = None

    def coefficient(self, name: str, t) -> Union[float, np.ndarray]:
        values = self.dense(t)[self.names.index(name)]
        return float(values) if np.ndim(values) == 0 else values

    def mean(self, t: float) -> float:
        if self.mean_dense is None:
            raise UnsupportedModelError("this Riccati solution carries no mean path")
        return float(self.mean_dense(t)[0])

    def y(self, t: float, x, mbar: Optional[float] = None) -> np.ndarray:
        """Adjoint (decoupling field) at (t, x)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "lq":
            xbar = self.mean(t) if mbar is None else mbar
            return 2.0 * self.coefficient("eta", t) * (x - xbar) + (
                2.0 * self.coefficient("pi", t) * xbar
            )
        if mbar is None:
            raise ValueError("the systemic-risk field needs the current mean")
        return self.coefficient("eta", t) * (x - mbar)

    def feedback(self, t: float, x, mbar: Optional[float] = None) -> np.ndarray:
        """Optimal control at (t, x), along the oracle mean unless ``mbar`` is given."""
        x = np.asarray(x, dtype=float)
        if self.kind == "lq":
            B, R = self.params["B"], self.params["R"]
            return -B * self.y(t, x, mbar) / (2.0 * R)
        if mbar is None:
            raise ValueError("the systemic-risk control needs the current mean")
        q = self.params["q"]
        return (q + self.coefficient("eta", t)) * (mbar - x)

    def residual(self, h: float = 1e-4) -> float:
        """Max |dc/dt - rhs(c)| at grid midpoints (central difference of the dense output)."""
        mids = 0.5 * (self.times[:-1] + self.times[1:])
        worst = 0.0
        for t in mids:
            lo, hi = max(t - h, self.times[0]), min(t + h, self.times[-1])
            derivative = (self.dense(hi) - self.dense(lo)) / (hi - lo)
            worst = max(worst, float(np.max(np.abs(derivative - self.rhs(t, self.dense(t))))))
        return worst


def _integrate_backward(rhs, terminal: np.ndarray, horizon: float, dt: float, name: str):
    def blowup(t, y):
        return RICCATI_BOUND - float(np.max(np.abs(y)))

    blowup.terminal = True
    sol = solve_ivp(
        rhs,
        (horizon, 0.0),
        terminal,
        method="RK45",
        max_step=dt / 10.0,
        rtol=1e-10,
        atol=1e-12,
        dense_output=True,
        events=blowup,
    )
    if sol.status == 1 and len(sol.t_events[0]):
        raise RiccatiBlowUpError(float(sol.t_events[0][0]), name)
    if not sol.success:
        raise RiccatiBlowUpError(float(sol.t[-1]), name)
    return sol.sol


def riccati_lq_solve(lq: Union[LqParams, ModelSpec], grid: TimeGrid) -> RiccatiSolution:
    """
    Backward Riccati system of the scalar LQ mean field control problem:

        eta' = -2 A eta + (B^2/R) eta^2 - (Q + Qbar S^2),          eta(T) = QT + QbarT ST^2
        pi'  = -2 (A + Abar) pi + (B^2/R) pi^2 - (Q + Qbar (1-S)^2), pi(T) = QT + QbarT (1-ST)^2
        chi' = -sigma^2 eta,                                          chi(T) = 0

    plus the forward mean path xbar' = (A + Abar - (B^2/R) pi) xbar.
    """
    if isinstance(lq, ModelSpec):
        if lq.lq is None:
            raise UnsupportedModelError(f"'{lq.name}' is not an LQ model")
        lq = lq.lq
    if not lq.quadratic_terminal:
        raise UnsupportedModelError("the Riccati oracle needs a quadratic terminal cost")
    if lq.R <= 0.0:
        raise UnsupportedModelError(f"R must be > 0, got {lq.R}")
    k = lq.B * lq.B / lq.R
    q1 = lq.Q + lq.Qbar * lq.S**2
    q2 = lq.Q + lq.Qbar * (1.0 - lq.S) ** 2

    def rhs(t, c):
        eta, pi, _ = c
        return np.array(
            [
                -2.0 * lq.A * eta + k * eta * eta - q1,
                -2.0 * (lq.A + lq.Abar) * pi + k * pi * pi - q2,
                -lq.sigma**2 * eta,
            ]
        )

    terminal = np.array(
        [lq.QT + lq.QbarT * lq.ST**2, lq.QT + lq.QbarT * (1.0 - lq.ST) ** 2, 0.0]
    )
    dense = _integrate_backward(rhs, terminal, grid.horizon, grid.dt, "lq")
    mean_sol = solve_ivp(
        lambda t, z: (lq.A + lq.Abar - k * dense(t)[1]) * z,
        (0.0, grid.horizon),
        [lq.mu0_mean],
        method="RK45",
        max_step=grid.dt / 10.0,
        rtol=1e-10,
        atol=1e-12,
        dense_output=True,
    )
    times = grid.times
    values = dense(times)
    eta0, pi0, chi0 = dense(0.0)
    return RiccatiSolution(
        kind="lq",
        times=times,
        names=("eta", "pi", "chi"),
        coefficients={"eta": values[0], "pi": values[1], "chi": values[2]},
        params=dict(B=lq.B, R=lq.R, A=lq.A, Abar=lq.Abar),
        dense=dense,
        rhs=rhs,
        mean_path=mean_sol.sol(times)[0],
        mean_dense=mean_sol.sol,
        optimal_cost=float(eta0 * lq.mu0_std**2 + pi0 * lq.mu0_mean**2 + chi0),
    )


def riccati_systemic_solve(
    a: float, q: float, eps: float, c: float, T: float, grid: Optional[TimeGrid] = None
) -> RiccatiSolution:
    """eta' = 2 (a + q) eta + eta^2 + q^2 - eps, eta(T) = c."""
    grid = grid or TimeGrid(T, 100)
    k = a + q

    def rhs(t, y):
        return np.array([2.0 * k * y[0] + y[0] * y[0] + q * q - eps])

    dense = _integrate_backward(rhs, np.array([c]), T, grid.dt, "systemic")
    times = np.arange(grid.n_steps + 1) * (T / grid.n_steps)
    return RiccatiSolution(
        kind="systemic",
        times=times,
        names=("eta",),
        coefficients={"eta": dense(times)[0]},
        params=dict(a=a, q=q, eps=eps, c=c),
        dense=dense,
        rhs=rhs,
    )


def systemic_eta_closed_form(eps: float, c: float, T: float, t) -> np.ndarray:
    """eta for a = q = 0: k (c + k tanh(k s)) / (k + c tanh(k s)), s = T - t, k = sqrt(eps)."""
    s = T - np.asarray(t, dtype=float)
    if eps == 0.0:
        return c / (1.0 + c * s)
    k = math.sqrt(eps)
    th = np.tanh(k * s)
    return k * (c + k * th) / (k + c * th)


def systemic_oracle_paths(
    spec: FbsdeSpec,
    solution: RiccatiSolution,
    ensemble0: Ensemble,
    noise: NoiseBundle,
    grid: TimeGrid,
) -> Tuple[np.ndarray, np.ndarray]:
    """Particle paths (X, Y) under the Riccati feedback, driven by ``noise``."""
    a = spec.params["a"]
    n = ensemble0.n_particles
    x = ensemble0.states
    X = np.empty((grid.n_steps + 1, n, 1))
    Y = np.empty((grid.n_steps + 1, n, 1))
    for step in range(grid.n_steps):
        t = grid.time(step)
        mbar = float(np.mean(x))
        X[step] = x
        Y[step] = solution.y(t, x, mbar)
        alpha = solution.feedback(t, x, mbar)
        sig = spec.vol(t, x, None, noise.common_levels[step])
        x = x + (a * (mbar - x) + alpha) * grid.dt + diffusion_step(sig, noise.increments[step])
        check_finite(x, step + 1)
    X[-1] = x
    Y[-1] = solution.y(grid.horizon, x, float(np.mean(x)))
    return X, Y


def analytic_y0_decoupled(x0: float, sigma: float, T: float) -> float:
    """E[sin(x0 + sigma W_T)] = sin(x0) exp(-sigma^2 T / 2)."""
    return math.sin(x0) * math.exp(-0.5 * sigma * sigma * T)


# -- HJB / Fokker-Planck solver ----------------------------------------------------


@dataclass
class PicardConfig:
    max_iters: int = 200
    damping: float = 0.5
    tol: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class PdeSolution:
    """
    Density ``m`` and value ``u`` on (times x cells). ``kind`` is "hjb"
    (u is the value function, Y = d_x u) or "decoupling" (u is Y itself).
    """

    x: np.ndarray
    times: np.ndarray
    m: np.ndarray
    u: np.ndarray
    residuals: List[float]
    kind: str = "hjb"

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def mass(self) -> np.ndarray:
        return self.m.sum(axis=1) * self.dx

    def mean_path(self) -> np.ndarray:
        return (self.m * self.x).sum(axis=1) * self.dx

    def time_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def y_profile(self, index: int) -> np.ndarray:
        if self.kind == "decoupling":
            return self.u[index]
        return _central_gradient(self.u[index], self.dx)

    def y(self, t: float, points) -> np.ndarray:
        """Y = d_x u (or the decoupling field) interpolated at ``points``."""
        profile = self.y_profile(self.time_index(t))
        return np.interp(np.asarray(points, dtype=float), self.x, profile)


def _central_gradient(u: np.ndarray, dx: float) -> np.ndarray:
    padded = np.concatenate([[u[0]], u, [u[-1]]])
    return (padded[2:] - padded[:-2]) / (2.0 * dx)


def _interface_rates(b: np.ndarray, diffusion: float, dx: float):
    """Jump rates (times dx) right (alpha) and left (beta) across each interface."""
    b_if = 0.5 * (b[:-1] + b[1:])
    d = diffusion / dx
    if diffusion > 0.0:
        central = np.abs(b_if) * dx <= 2.0 * diffusion
    else:
        central = np.zeros_like(b_if, dtype=bool)
    alpha = np.where(central, 0.5 * b_if + d, np.maximum(b_if, 0.0) + d)
    beta = np.where(central, d - 0.5 * b_if, np.maximum(-b_if, 0.0) + d)
    return alpha, beta


def _implicit_bands(alpha, beta, dt: float, dx: float, transpose: bool) -> np.ndarray:
    n = alpha.size + 1
    bands = np.zeros((3, n))
    bands[1] = 1.0 + dt / dx * (np.append(alpha, 0.0) + np.insert(beta, 0, 0.0))
    upper, lower = (beta, alpha) if transpose else (alpha, beta)
    bands[0, 1:] = -dt / dx * upper
    bands[2, :-1] = -dt / dx * lower
    return bands


class _HjbCoefficients:
    """Policy, source and terminal data of the HJB form."""

    kind = "hjb"

    def __init__(self, terms: PdeTerms, cn: float = 0.0):
        self.terms = terms
        self.cn = cn
        self.sigma = terms.sigma

    def backward(self, x, m, mbar, u_next, dx):
        p = _central_gradient(u_next, dx)
        b = self.terms.optimal_drift(x, mbar, p)
        source = self.terms.hamiltonian(x, mbar, p) - b * p
        if not self.terms.mean_field_game:
            source = source + x * np.sum(self.terms.dh_dmbar(x, mbar, p) * m) * dx
        return b, source

    def forward_drift(self, x, mbar, u, m, dx):
        return self.terms.optimal_drift(x, mbar, _central_gradient(u, dx))

    def terminal(self, x, m, mbar, dx):
        u = self.terms.terminal(x, mbar, self.cn)
        if not self.terms.mean_field_game:
            u = u + x * np.sum(self.terms.dg_dmbar(x, mbar, self.cn) * m) * dx
        return u


class _DecouplingCoefficients:
    """V_t + sigma^2/2 V_xx + B V_x + F = 0, V(T) = G, FP drift B(x, mu, V)."""

    kind = "decoupling"

    def __init__(self, spec: FbsdeSpec):
        self.spec = spec
        self.sigma = spec.sigma

    def _stats(self, x, m, mbar, v, dx):
        return MeasureStats(
            mean=np.array([mbar]),
            second_moment=float(np.sum(x * x * m) * dx),
            y_mean=np.array([np.sum(v * m) * dx]),
        )

    def backward(self, x, m, mbar, v_next, dx):
        mu = self._stats(x, m, mbar, v_next, dx)
        col, vcol = x[:, None], v_next[:, None]
        sz = np.zeros((x.size, 1, 1))
        b = np.asarray(self.spec.drift(0.0, col, mu, vcol, 0.0), dtype=float)
        source = np.asarray(self.spec.driver(0.0, col, mu, vcol, sz, 0.0), dtype=float)
        return np.broadcast_to(b, col.shape)[:, 0], np.broadcast_to(source, col.shape)[:, 0]

    def forward_drift(self, x, mbar, v, m, dx):
        mu = self._stats(x, m, mbar, v, dx)
        b = self.spec.drift(0.0, x[:, None], mu, v[:, None], 0.0)
        return np.broadcast_to(np.asarray(b, dtype=float), (x.size, 1))[:, 0]

    def terminal(self, x, m, mbar, dx):
        mu = MeasureStats(mean=np.array([mbar]), second_moment=float(np.sum(x * x * m) * dx))
        g = self.spec.terminal(x[:, None], mu, 0.0)
        return np.broadcast_to(np.asarray(g, dtype=float), (x.size, 1))[:, 0].copy()


def _initial_law(model) -> Tuple[float, float]:
    terms = getattr(model, "pde_terms", None)
    if isinstance(model, FbsdeSpec):
        if model.x0 is not None:
            return float(model.x0), 0.0
        if "mu0_mean" in model.params:
            return float(model.params["mu0_mean"]), float(model.params.get("mu0_std", 0.0))
    if terms is not None:
        return terms.init_mean, terms.init_std
    raise UnsupportedModelError(f"no closed-form initial law for '{model.name}'")


def default_domain(
    mean: float, std: float, sigma: float, horizon: float, margin: float = 1.0
) -> Tuple[float, float]:
    """mean +- 6 std of the freely diffusing state, widened by ``margin``."""
    half = 6.0 * math.sqrt(std * std + sigma * sigma * horizon) + margin
    return mean - half, mean + half


def initial_density(x: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Normalized Gaussian cell values; a point mass is smoothed over a few cells."""
    dx = float(x[1] - x[0])
    width = max(std, 2.0 * dx)
    m0 = np.exp(-0.5 * ((x - mean) / width) ** 2)
    return m0 / (m0.sum() * dx)


def _coefficients_for(model, mode: Optional[str], cn: float = 0.0):
    if mode not in (None, "hjb", "decoupling"):
        raise ValueError(f"unknown PDE mode '{mode}'")
    if isinstance(model, FbsdeSpec):
        if model.dim_x != 1 or model.sigma is None:
            raise UnsupportedModelError("the PDE oracle needs a 1-d model with constant sigma")
        if model.common_noise.is_jump or (
            model.common_noise.is_brownian and model.common_noise.rho > 0.0
        ):
            raise UnsupportedModelError("the PDE oracle does not handle this common noise")
        if mode == "hjb":
            if model.pde_terms is None:
                raise UnsupportedModelError(f"'{model.name}' has no HJB form")
            return _HjbCoefficients(model.pde_terms, cn)
        return _DecouplingCoefficients(model)
    if getattr(model, "pde_terms", None) is None:
        raise UnsupportedModelError(
            f"'{getattr(model, 'name', model)}' provides no mean-field derivative terms"
        )
    if model.dim_x != 1:
        raise UnsupportedModelError("the PDE oracle is 1-d only")
    if mode == "decoupling":
        raise UnsupportedModelError("decoupling mode needs an FBSDE")
    return _HjbCoefficients(model.pde_terms, cn)


def _hjb_sweep(coeffs, x, times, m, terminal_override=None) -> np.ndarray:
    dx = float(x[1] - x[0])
    diffusion = 0.5 * coeffs.sigma**2
    n_t = len(times) - 1
    mbar = (m * x).sum(axis=1) * dx
    u = np.empty_like(m)
    if terminal_override is None:
        u[-1] = coeffs.terminal(x, m[-1], mbar[-1], dx)
    else:
        u[-1] = terminal_override
    for n in range(n_t - 1, -1, -1):
        dt = times[n + 1] - times[n]
        b, source = coeffs.backward(x, m[n + 1], mbar[n + 1], u[n + 1], dx)
        alpha, beta = _interface_rates(b, diffusion, dx)
        bands = _implicit_bands(alpha, beta, dt, dx, transpose=False)
        u[n] = solve_banded((1, 1), bands, u[n + 1] + dt * source)
    return u


def _fp_sweep(coeffs, x, times, m0, u) -> np.ndarray:
    dx = float(x[1] - x[0])
    diffusion = 0.5 * coeffs.sigma**2
    m = np.empty_like(u)
    m[0] = m0
    for n in range(len(times) - 1):
        dt = times[n + 1] - times[n]
        mbar = float(np.sum(m[n] * x) * dx)
        b = coeffs.forward_drift(x, mbar, u[n], m[n], dx)
        alpha, beta = _interface_rates(b, diffusion, dx)
        bands = _implicit_bands(alpha, beta, dt, dx, transpose=True)
        m[n + 1] = np.maximum(solve_banded((1, 1), bands, m[n]), 0.0)
    return m


def _picard(coeffs, x, times, m0, picard: PicardConfig, terminal_override=None, label=""):
    m = np.tile(m0, (len(times), 1))
    u = None
    residuals: List[float] = []
    for _ in range(picard.max_iters):
        u_new = _hjb_sweep(coeffs, x, times, m, terminal_override)
        m_new = _fp_sweep(coeffs, x, times, m0, u_new)
        change = float(np.max(np.abs(m_new - m)))
        if u is not None:
            change = max(change, float(np.max(np.abs(u_new - u))))
        residuals.append(change)
        m = picard.damping * m_new + (1.0 - picard.damping) * m
        u = u_new
        if change < picard.tol:
            break
    else:
        raise PicardNotConvergedError(residuals)
    # final pass so that u matches the returned density exactly
    u = _hjb_sweep(coeffs, x, times, m, terminal_override)
    LOGGER.debug(f"Picard {label}: {len(residuals)} iteraciones, residuo {residuals[-1]:.2e}")
    return PdeSolution(x, np.asarray(times), m, u, residuals, coeffs.kind)


def pde_solve_hjb_fp(
    model: Union[ModelSpec, FbsdeSpec],
    space_domain: Optional[Tuple[float, float]] = None,
    n_x: int = 400,
    grid: Optional[TimeGrid] = None,
    picard: Optional[PicardConfig] = None,
    mode: Optional[str] = None,
    margin: float = 1.0,
) -> PdeSolution:
    """
    Damped Picard iteration between a backward HJB sweep and a forward
    Fokker-Planck sweep. A ModelSpec is solved in HJB form (with the
    mean-field derivative terms); an FbsdeSpec is solved for its decoupling
    field unless ``mode="hjb"``.
    """
    coeffs = _coefficients_for(model, mode)
    if model.common_noise.is_jump:
        raise UnsupportedModelError("use pde_solve_common_noise for jump common noise")
    grid = grid or TimeGrid(model.horizon, 200)
    picard = picard or PicardConfig()
    mean, std = _initial_law(model)
    lo, hi = space_domain or default_domain(mean, std, coeffs.sigma, grid.horizon, margin)
    if n_x < 3 or hi <= lo:
        raise ValueError("need n_x >= 3 and a non-empty domain")
    dx = (hi - lo) / n_x
    x = lo + (np.arange(n_x) + 0.5) * dx
    return _picard(coeffs, x, grid.times, initial_density(x, mean, std), picard, label=model.name)


@dataclass
class CommonNoisePdeSolution:
    """Pre-jump solution on [0, T/2] and one post-jump solution per scenario."""

    pre: PdeSolution
    post: Dict[float, PdeSolution]
    residuals: List[float]

    def conditional_mean(self, scenario: float) -> float:
        return float(self.post[scenario].mean_path()[-1])

    def density(self, t: float, scenario: float) -> np.ndarray:
        if t < self.pre.times[-1] - 1e-12:
            return self.pre.m[self.pre.time_index(t)]
        post = self.post[scenario]
        return post.m[post.time_index(t)]


def pde_solve_common_noise(
    model: ModelSpec,
    n_x: int = 400,
    grid: Optional[TimeGrid] = None,
    picard: Optional[PicardConfig] = None,
    outer_iters: int = 50,
    space_domain: Optional[Tuple[float, float]] = None,
) -> CommonNoisePdeSolution:
    """
    Three conditional HJB-FP systems stitched at the jump: the pre-jump
    terminal value is the average of the two post-jump values at the jump
    time, and both post-jump systems start from the pre-jump law there.
    """
    noise = model.common_noise
    if not noise.is_jump or model.pde_terms is None:
        raise UnsupportedModelError("pde_solve_common_noise needs a jump common-noise model")
    grid = grid or TimeGrid(model.horizon, 200)
    picard = picard or PicardConfig()
    jump_step = int(round(noise.jump_time / grid.dt))
    if not 0 < jump_step < grid.n_steps or abs(jump_step * grid.dt - noise.jump_time) > 1e-9:
        raise ValueError("the jump time must be a grid point")
    times = grid.times
    pre_times, post_times = times[: jump_step + 1], times[jump_step:]
    terms = model.pde_terms
    mean, std = terms.init_mean, terms.init_std
    c = noise.magnitude
    lo, hi = space_domain or default_domain(mean, std, terms.sigma, grid.horizon, 1.0 + c)
    dx = (hi - lo) / n_x
    x = lo + (np.arange(n_x) + 0.5) * dx
    m0 = initial_density(x, mean, std)

    pre_coeffs = _HjbCoefficients(terms, 0.0)
    scenarios = (-c, c)
    post_coeffs = {s: _HjbCoefficients(terms, s) for s in scenarios}
    m_mid = m0
    residuals: List[float] = []
    for _ in tqdm(range(outer_iters), desc="ruido común", leave=False, disable=True):
        post = {s: _picard(post_coeffs[s], x, post_times, m_mid, picard) for s in scenarios}
        terminal = 0.5 * (post[-c].u[0] + post[c].u[0])
        pre = _picard(pre_coeffs, x, pre_times, m0, picard, terminal_override=terminal)
        change = float(np.max(np.abs(pre.m[-1] - m_mid)))
        residuals.append(change)
        m_mid = picard.damping * pre.m[-1] + (1.0 - picard.damping) * m_mid
        if change < picard.tol:
            break
    else:
        raise PicardNotConvergedError(residuals)
    post = {s: _picard(post_coeffs[s], x, post_times, pre.m[-1], picard) for s in scenarios}
    return CommonNoisePdeSolution(pre, post, residuals)
