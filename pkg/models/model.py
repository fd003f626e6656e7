"""
Mean-field problem data and the preset test cases.

Coefficient functions are vectorized over particles: ``x`` has shape
``(N, dim_x)``, controls ``(N, dim_alpha)``, backward states ``(N, dim_y)``.
They are written against ``models.autodiff`` so the same function evaluates
plain arrays and taped ``Var`` objects. ``cn`` is the current value of the
common noise as a float (the revealed jump value, or W0 for Brownian common
noise); models without common noise ignore it.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from models import autodiff as ad
from models.errors import ModelValidationError, UnsupportedModelError

LOGGER = logging.getLogger(__name__)

NOISE_KINDS = ("none", "two_point_jump", "correlated_brownian")


@dataclass(frozen=True)
class MeasureStats:
    """Summary statistics of an empirical measure (possibly taped)."""

    mean: Any
    second_moment: Any
    raw_points: Optional[Any] = None
    # mean of the backward component; set by FBSDE rollouts only
    y_mean: Optional[Any] = None


@dataclass(frozen=True)
class CommonNoiseSpec:
    """Common noise shared by every particle of a rollout."""

    kind: str = "none"
    jump_time: float = 0.0
    magnitude: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ModelValidationError(f"unknown common noise kind '{self.kind}'")
        if not 0.0 <= self.rho <= 1.0:
            raise ModelValidationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.kind == "two_point_jump" and self.magnitude <= 0.0:
            raise ModelValidationError("jump magnitude c_T must be > 0")

    @classmethod
    def none(cls) -> "CommonNoiseSpec":
        return cls()

    @classmethod
    def two_point_jump(cls, jump_time: float, magnitude: float) -> "CommonNoiseSpec":
        return cls(kind="two_point_jump", jump_time=jump_time, magnitude=magnitude)

    @classmethod
    def correlated_brownian(cls, rho: float) -> "CommonNoiseSpec":
        return cls(kind="correlated_brownian", rho=rho)

    @property
    def is_jump(self) -> bool:
        return self.kind == "two_point_jump"

    @property
    def is_brownian(self) -> bool:
        return self.kind == "correlated_brownian"

    def check_horizon(self, horizon: float) -> None:
        if self.is_jump and not 0.0 < self.jump_time < horizon:
            raise ModelValidationError(
                f"jump_time={self.jump_time} must lie in (0, T={horizon})"
            )

    def value_at(self, t: float, scenario: float) -> float:
        """epsilon0_t for the jump noise: 0 before the jump, the scenario after."""
        if not self.is_jump:
            return 0.0
        return float(scenario) if t >= self.jump_time - 1e-12 else 0.0


@dataclass(frozen=True)
class LqParams:
    """Coefficients of the scalar linear-quadratic family."""

    A: float = 0.0
    Abar: float = 0.0
    B: float = 1.0
    Q: float = 0.0
    Qbar: float = 0.0
    R: float = 1.0
    S: float = 0.0
    QT: float = 0.0
    QbarT: float = 0.0
    ST: float = 0.0
    sigma: float = 0.0
    mu0_mean: float = 0.0
    mu0_std: float = 0.0
    # False when the terminal cost is not of the quadratic LQ form
    quadratic_terminal: bool = True


@dataclass(frozen=True)
class PdeTerms:
    """
    Closed-form ingredients of the 1-d HJB / Fokker-Planck system.

    ``hamiltonian`` is the reduced Hamiltonian minimized over the control,
    ``optimal_drift`` the drift at the minimizer, ``dh_dmbar``/``dg_dmbar``
    the derivatives w.r.t. the mean of the measure (every preset depends on
    the measure only through its mean). For a mean field game the
    mean-field derivative terms are dropped from the HJB equation.
    """

    hamiltonian: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    optimal_drift: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    dh_dmbar: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray, float, float], np.ndarray]
    dg_dmbar: Callable[[np.ndarray, float, float], np.ndarray]
    sigma: float
    init_mean: float
    init_std: float
    mean_field_game: bool = False


@dataclass(frozen=True)
class ModelSpec:
    """Mean field control problem: dynamics, costs and initial law."""

    name: str
    dim_x: int
    dim_alpha: int
    dim_w: int
    drift: Callable
    vol: Callable
    running_cost: Callable
    terminal_cost: Callable
    init_sampler: Callable[[np.random.Generator, int], np.ndarray]
    common_noise: CommonNoiseSpec = field(default_factory=CommonNoiseSpec)
    clamp: Optional[Tuple[np.ndarray, np.ndarray]] = None
    horizon: float = 1.0
    lq: Optional[LqParams] = None
    terminal_grad: Optional[Callable] = None
    pde_terms: Optional[PdeTerms] = None
    params: Dict[str, float] = field(default_factory=dict)
    implementer_defaults: bool = False

    def __post_init__(self):
        if min(self.dim_x, self.dim_alpha, self.dim_w) < 1:
            raise ModelValidationError("dimensions must be >= 1")
        if self.horizon <= 0.0:
            raise ModelValidationError("horizon must be > 0")
        self.common_noise.check_horizon(self.horizon)

    @property
    def mean_field_game(self) -> bool:
        return False

    @property
    def control_input_dim(self) -> int:
        """Network input size: time, state and, with jump noise, epsilon0."""
        return 1 + self.dim_x + (1 if self.common_noise.is_jump else 0)


@dataclass(frozen=True)
class FbsdeSpec:
    """
    Generic McKean-Vlasov FBSDE with the sign convention dY = -F dt + z dW.

    ``drift(t, x, mu, y, cn)``, ``driver(t, x, mu, y, sz, cn)`` where ``sz``
    is sigma^T z, ``vol(t, x, mu, cn)`` and ``terminal(x, mu, cn)``.
    """

    name: str
    dim_x: int
    dim_y: int
    dim_w: int
    drift: Callable
    driver: Callable
    vol: Callable
    terminal: Callable
    x0_sampler: Callable[[np.random.Generator, int], np.ndarray]
    common_noise: CommonNoiseSpec = field(default_factory=CommonNoiseSpec)
    horizon: float = 1.0
    x0: Optional[float] = None
    sigma: Optional[float] = None
    mean_field_game: bool = False
    uses_y_mean: bool = False
    pde_terms: Optional[PdeTerms] = None
    params: Dict[str, float] = field(default_factory=dict)
    implementer_defaults: bool = False

    def __post_init__(self):
        if min(self.dim_x, self.dim_y, self.dim_w) < 1:
            raise ModelValidationError("dimensions must be >= 1")
        if self.horizon <= 0.0:
            raise ModelValidationError("horizon must be > 0")
        self.common_noise.check_horizon(self.horizon)


AnySpec = Union[ModelSpec, FbsdeSpec]


# -- helpers -------------------------------------------------------------------


def _gaussian_sampler(mean: float, std: float):
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        if std == 0.0:
            return np.full((n, 1), float(mean))
        return mean + std * rng.standard_normal((n, 1))

    return sample


def _constant_vol(sigma: float, dim_w: int = 1):
    block = np.zeros((1, 1, dim_w))
    block[0, 0, 0] = sigma

    def vol(t, x, mu, cn):
        return block

    return vol


def _rowsum(v):
    return ad.sum_(v, axis=-1)


def _check_sigma(sigma: float) -> None:
    if sigma < 0.0:
        raise ModelValidationError(f"sigma must be >= 0, got {sigma}")


# -- presets -----------------------------------------------------------------


def make_lq(
    A: float = 0.2,
    Abar: float = 0.1,
    B: float = 1.0,
    Q: float = 1.0,
    Qbar: float = 0.5,
    R: float = 1.0,
    S: float = 0.5,
    QT: float = 1.0,
    QbarT: float = 0.5,
    ST: float = 0.5,
    sigma: float = 0.3,
    mu0_mean: float = 1.0,
    mu0_std: float = 0.2,
    horizon: float = 1.0,
    implementer_defaults: bool = True,
) -> ModelSpec:
    """
    Scalar LQ mean field control problem.

    b = A x + Abar mbar + B v, f = Q x^2 + Qbar (mbar - S x)^2 + R v^2,
    g = QT x^2 + QbarT (mbar - ST x)^2.
    """
    if R <= 0.0:
        raise ModelValidationError(f"R must be > 0, got {R}")
    _check_sigma(sigma)
    if mu0_std < 0.0:
        raise ModelValidationError("mu0_std must be >= 0")
    lq = LqParams(A, Abar, B, Q, Qbar, R, S, QT, QbarT, ST, sigma, mu0_mean, mu0_std)

    def drift(t, x, mu, alpha, cn):
        return A * x + Abar * mu.mean + B * alpha

    def running_cost(t, x, mu, alpha, cn):
        gap = mu.mean - S * x
        return _rowsum(Q * x * x + Qbar * gap * gap + R * alpha * alpha)

    def terminal_cost(x, mu, cn):
        gap = mu.mean - ST * x
        return _rowsum(QT * x * x + QbarT * gap * gap)

    def terminal_grad(x, mu, cn):
        return (
            2.0 * QT * x
            - 2.0 * QbarT * ST * (mu.mean - ST * x)
            + 2.0 * QbarT * (1.0 - ST) * mu.mean
        )

    pde = PdeTerms(
        hamiltonian=lambda x, m, p: (
            (A * x + Abar * m) * p
            - B * B * p * p / (4.0 * R)
            + Q * x * x
            + Qbar * (m - S * x) ** 2
        ),
        optimal_drift=lambda x, m, p: A * x + Abar * m - B * B * p / (2.0 * R),
        dh_dmbar=lambda x, m, p: Abar * p + 2.0 * Qbar * (m - S * x),
        terminal=lambda x, m, cn: QT * x * x + QbarT * (m - ST * x) ** 2,
        dg_dmbar=lambda x, m, cn: 2.0 * QbarT * (m - ST * x),
        sigma=sigma,
        init_mean=mu0_mean,
        init_std=mu0_std,
    )
    return ModelSpec(
        name="lq",
        dim_x=1,
        dim_alpha=1,
        dim_w=1,
        drift=drift,
        vol=_constant_vol(sigma),
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        init_sampler=_gaussian_sampler(mu0_mean, mu0_std),
        horizon=horizon,
        lq=lq,
        terminal_grad=terminal_grad,
        pde_terms=pde,
        params=dict(
            A=A, Abar=Abar, B=B, Q=Q, Qbar=Qbar, R=R, S=S, QT=QT, QbarT=QbarT,
            ST=ST, sigma=sigma, mu0_mean=mu0_mean, mu0_std=mu0_std, horizon=horizon,
        ),
        implementer_defaults=implementer_defaults,
    )


def make_minlqg(
    xi1: float = 0.25,
    xi2: float = 0.75,
    sigma: float = 0.5,
    mu0_mean: float = 1.0,
    mu0_std: float = 0.2,
    R: float = 0.5,
    horizon: float = 0.2,
) -> ModelSpec:
    """Controlled drift v, running cost R v^2, terminal min(|x - xi1|, |x - xi2|)."""
    if xi1 >= xi2:
        raise ModelValidationError(f"xi1 must be < xi2, got {xi1} >= {xi2}")
    if R <= 0.0:
        raise ModelValidationError(f"R must be > 0, got {R}")
    _check_sigma(sigma)
    midpoint = 0.5 * (xi1 + xi2)

    def drift(t, x, mu, alpha, cn):
        return 1.0 * alpha

    def running_cost(t, x, mu, alpha, cn):
        return _rowsum(R * alpha * alpha)

    def terminal_cost(x, mu, cn):
        return _rowsum(ad.minimum(ad.abs_(x - xi1), ad.abs_(x - xi2)))

    def terminal_grad(x, mu, cn):
        xv = ad.value_of(x)
        return np.where(xv <= midpoint, np.sign(xv - xi1), np.sign(xv - xi2))

    def g(x, m, cn):
        return np.minimum(np.abs(x - xi1), np.abs(x - xi2))

    pde = PdeTerms(
        hamiltonian=lambda x, m, p: -p * p / (4.0 * R),
        optimal_drift=lambda x, m, p: -p / (2.0 * R),
        dh_dmbar=lambda x, m, p: np.zeros_like(x),
        terminal=g,
        dg_dmbar=lambda x, m, cn: np.zeros_like(x),
        sigma=sigma,
        init_mean=mu0_mean,
        init_std=mu0_std,
    )
    return ModelSpec(
        name="minlqg",
        dim_x=1,
        dim_alpha=1,
        dim_w=1,
        drift=drift,
        vol=_constant_vol(sigma),
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        init_sampler=_gaussian_sampler(mu0_mean, mu0_std),
        horizon=horizon,
        lq=LqParams(R=R, sigma=sigma, mu0_mean=mu0_mean, mu0_std=mu0_std,
                    quadratic_terminal=False),
        terminal_grad=terminal_grad,
        pde_terms=pde,
        params=dict(xi1=xi1, xi2=xi2, sigma=sigma, mu0_mean=mu0_mean,
                    mu0_std=mu0_std, R=R, horizon=horizon),
        implementer_defaults=True,
    )


def make_common_noise_lq(
    cT: float = 1.5,
    KT: float = 1.0,
    sigma: float = 0.3,
    mu0_mean: float = 0.0,
    mu0_std: float = 0.2,
    horizon: float = 1.0,
) -> ModelSpec:
    """
    Drift v, running cost v^2, terminal (x - eps0_T)^2 + KT (x - E[x | eps0])^2.

    eps0 is 0 before T/2 and then jumps to -cT or +cT; the conditional mean is
    the population mean of the rollout.
    """
    if KT < 0.0:
        raise ModelValidationError(f"KT must be >= 0, got {KT}")
    _check_sigma(sigma)
    noise = CommonNoiseSpec.two_point_jump(0.5 * horizon, cT)

    def drift(t, x, mu, alpha, cn):
        return 1.0 * alpha

    def running_cost(t, x, mu, alpha, cn):
        return _rowsum(alpha * alpha)

    def terminal_cost(x, mu, cn):
        target = x - cn
        spread = x - mu.mean
        return _rowsum(target * target + KT * spread * spread)

    pde = PdeTerms(
        hamiltonian=lambda x, m, p: -p * p / 4.0,
        optimal_drift=lambda x, m, p: -p / 2.0,
        dh_dmbar=lambda x, m, p: np.zeros_like(x),
        terminal=lambda x, m, cn: (x - cn) ** 2 + KT * (x - m) ** 2,
        dg_dmbar=lambda x, m, cn: -2.0 * KT * (x - m),
        sigma=sigma,
        init_mean=mu0_mean,
        init_std=mu0_std,
    )
    return ModelSpec(
        name="cn-lq",
        dim_x=1,
        dim_alpha=1,
        dim_w=1,
        drift=drift,
        vol=_constant_vol(sigma),
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        init_sampler=_gaussian_sampler(mu0_mean, mu0_std),
        common_noise=noise,
        horizon=horizon,
        lq=LqParams(B=1.0, R=1.0, sigma=sigma, mu0_mean=mu0_mean,
                    mu0_std=mu0_std, quadratic_terminal=False),
        pde_terms=pde,
        params=dict(cT=cT, KT=KT, sigma=sigma, mu0_mean=mu0_mean,
                    mu0_std=mu0_std, horizon=horizon),
        implementer_defaults=True,
    )


def make_sincos_fbsde(
    rho: float = 0.0, sigma: float = 1.0, x0: float = 1.0, horizon: float = 1.0
) -> FbsdeSpec:
    """dX = rho cos(Y) dt + sigma dW, Y_t = E_t[sin(X_T)] (driver F = 0)."""
    _check_sigma(sigma)

    def drift(t, x, mu, y, cn):
        return rho * ad.cos(y)

    def driver(t, x, mu, y, sz, cn):
        return 0.0 * y

    def terminal(x, mu, cn):
        return ad.sin(x)

    return FbsdeSpec(
        name="sincos",
        dim_x=1,
        dim_y=1,
        dim_w=1,
        drift=drift,
        driver=driver,
        vol=_constant_vol(sigma),
        terminal=terminal,
        x0_sampler=_gaussian_sampler(x0, 0.0),
        horizon=horizon,
        x0=x0,
        sigma=sigma,
        params=dict(rho=rho, sigma=sigma, x0=x0, horizon=horizon),
        implementer_defaults=True,
    )


def make_atan_mfg(
    rho: float = 0.5, sigma: float = 1.0, x0: float = 1.0, horizon: float = 1.0
) -> FbsdeSpec:
    """dX = -rho Y dt + sigma dW, dY = arctan(E[X]) dt + z dW, Y_T = arctan(X_T)."""
    _check_sigma(sigma)
    if rho < 0.0:
        raise ModelValidationError(f"rho must be >= 0, got {rho}")

    def drift(t, x, mu, y, cn):
        return -rho * y

    def driver(t, x, mu, y, sz, cn):
        return 0.0 * y - ad.atan(mu.mean)

    def terminal(x, mu, cn):
        return ad.atan(x)

    # HJB form whose x-derivative is the decoupling field of the FBSDE above
    pde = PdeTerms(
        hamiltonian=lambda x, m, p: -0.5 * rho * p * p - x * np.arctan(m),
        optimal_drift=lambda x, m, p: -rho * p,
        dh_dmbar=lambda x, m, p: np.zeros_like(x),
        terminal=lambda x, m, cn: x * np.arctan(x) - 0.5 * np.log1p(x * x),
        dg_dmbar=lambda x, m, cn: np.zeros_like(x),
        sigma=sigma,
        init_mean=x0,
        init_std=0.0,
        mean_field_game=True,
    )
    return FbsdeSpec(
        name="atan-mfg",
        dim_x=1,
        dim_y=1,
        dim_w=1,
        drift=drift,
        driver=driver,
        vol=_constant_vol(sigma),
        terminal=terminal,
        x0_sampler=_gaussian_sampler(x0, 0.0),
        horizon=horizon,
        x0=x0,
        sigma=sigma,
        mean_field_game=True,
        pde_terms=pde,
        params=dict(rho=rho, sigma=sigma, x0=x0, horizon=horizon),
        implementer_defaults=True,
    )


def make_systemic_risk(
    a: float = 1.0,
    q: float = 0.8,
    eps: float = 2.0,
    c: float = 1.0,
    rho: float = 0.5,
    sigma: float = 0.5,
    mu0_mean: float = 0.0,
    mu0_std: float = 0.5,
    horizon: float = 1.0,
) -> FbsdeSpec:
    """
    Systemic risk mean field game in Pontryagin form.

    Optimal control alpha = -y + q (mbar - x); the common Brownian motion W0 is
    the last noise coordinate, so vol = sigma [sqrt(1 - rho^2), rho].
    """
    _check_sigma(sigma)
    if not 0.0 <= rho <= 1.0:
        raise ModelValidationError(f"rho must lie in [0, 1], got {rho}")
    if q > eps**2:
        LOGGER.warning(
            f"⚠ q={q} > eps^2={eps**2}: el coste corriente no es conjuntamente convexo"
        )
    k = a + q
    block = np.array([[[sigma * math.sqrt(1.0 - rho * rho), sigma * rho]]])

    def drift(t, x, mu, y, cn):
        return k * (mu.mean - x) - y

    def driver(t, x, mu, y, sz, cn):
        return -k * y + (q * q - eps) * (mu.mean - x)

    def vol(t, x, mu, cn):
        return block

    def terminal(x, mu, cn):
        return c * (x - mu.mean)

    return FbsdeSpec(
        name="systemic-risk",
        dim_x=1,
        dim_y=1,
        dim_w=2,
        drift=drift,
        driver=driver,
        vol=vol,
        terminal=terminal,
        x0_sampler=_gaussian_sampler(mu0_mean, mu0_std),
        common_noise=CommonNoiseSpec.correlated_brownian(rho),
        horizon=horizon,
        sigma=sigma,
        mean_field_game=True,
        params=dict(a=a, q=q, eps=eps, c=c, rho=rho, sigma=sigma,
                    mu0_mean=mu0_mean, mu0_std=mu0_std, horizon=horizon),
        implementer_defaults=True,
    )


def systemic_running_cost(alpha, x, mbar, q: float, eps: float):
    """Running cost 1/2 a^2 - q a (mbar - x) + eps/2 (mbar - x)^2 of the game."""
    gap = mbar - x
    return 0.5 * alpha * alpha - q * alpha * gap + 0.5 * eps * gap * gap


# -- LQ helpers ----------------------------------------------------------------


def hat_alpha_lq(model: ModelSpec, t: float, x, mu_mean, y):
    """argmin_a {B a y + R a^2} = -B y / (2R) for LQ-family presets."""
    lq = getattr(model, "lq", None)
    if lq is None:
        raise UnsupportedModelError(
            f"hat_alpha_lq requires an LQ-family model, got '{model.name}'"
        )
    return -lq.B * y / (2.0 * lq.R)


def lq_to_fbsde(model: ModelSpec) -> FbsdeSpec:
    """Pontryagin FBSDE of an LQ-family model (adjoint Y = d_x u)."""
    if model.lq is None or model.terminal_grad is None:
        raise UnsupportedModelError(f"'{model.name}' has no Pontryagin form")
    if model.common_noise.kind != "none":
        raise UnsupportedModelError("common noise is not supported by lq_to_fbsde")
    p = model.lq

    def drift(t, x, mu, y, cn):
        return p.A * x + p.Abar * mu.mean - (p.B * p.B / (2.0 * p.R)) * y

    def driver(t, x, mu, y, sz, cn):
        out = p.A * y + 2.0 * p.Q * x - 2.0 * p.Qbar * p.S * (mu.mean - p.S * x)
        out = out + 2.0 * p.Qbar * (1.0 - p.S) * mu.mean
        if p.Abar != 0.0:
            out = out + p.Abar * mu.y_mean
        return out

    return FbsdeSpec(
        name=f"{model.name}-fbsde",
        dim_x=model.dim_x,
        dim_y=model.dim_x,
        dim_w=model.dim_w,
        drift=drift,
        driver=driver,
        vol=model.vol,
        terminal=model.terminal_grad,
        x0_sampler=model.init_sampler,
        horizon=model.horizon,
        sigma=p.sigma,
        uses_y_mean=p.Abar != 0.0,
        pde_terms=model.pde_terms,
        params=dict(model.params),
        implementer_defaults=model.implementer_defaults,
    )


# -- registry ----------------------------------------------------------------

PRESETS: Dict[str, Callable[..., AnySpec]] = {
    "lq": make_lq,
    "minlqg": make_minlqg,
    "sincos": make_sincos_fbsde,
    "atan-mfg": make_atan_mfg,
    "cn-lq": make_common_noise_lq,
    "systemic-risk": make_systemic_risk,
}

PRESET_DESCRIPTIONS = {
    "lq": "Control de campo medio lineal-cuadrático (caso 1)",
    "minlqg": "Min-LQG con dos objetivos terminales (caso 2)",
    "sincos": "FBSDE acoplada rho cos(Y) / sin(X_T) (caso 3)",
    "atan-mfg": "Juego de campo medio con arctan (caso 4)",
    "cn-lq": "Control con ruido común de salto en T/2 (caso 5)",
    "systemic-risk": "Juego de riesgo sistémico con ruido común browniano (caso 6)",
}

# presets whose native form is an FBSDE (mean field games included)
FBSDE_PRESETS = ("sincos", "atan-mfg", "systemic-risk")


def build_preset(name: str, params: Optional[Dict[str, Any]] = None) -> AnySpec:
    """Instantiate a preset by name; unknown names and arguments are rejected."""
    if name not in PRESETS:
        raise ModelValidationError(
            f"unknown preset '{name}' (available: {', '.join(sorted(PRESETS))})"
        )
    try:
        return PRESETS[name](**(params or {}))
    except TypeError as exc:
        raise ModelValidationError(f"invalid parameters for '{name}': {exc}") from exc
