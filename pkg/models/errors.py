"""
Exception hierarchy shared by the solver core, the oracles and the runner.
"""

from typing import List, Optional, Sequence


class MeanFieldError(Exception):
    """Base class for every error raised by the toolkit."""


class ModelValidationError(MeanFieldError, ValueError):
    """Preset parameters violate a precondition (e.g. R <= 0)."""


class UnsupportedModelError(MeanFieldError):
    """Operation not available for the given model family."""


class NonFiniteError(MeanFieldError, ArithmeticError):
    """An elementary operation produced inf/nan while recording."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        message = f"non-finite value in '{kind}'"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class DivergenceError(MeanFieldError):
    """A particle state left the admissible range during a rollout."""

    def __init__(self, step: int, particle: int, value: float, what: str = "X"):
        self.step = step
        self.particle = particle
        self.value = value
        self.what = what
        super().__init__(
            f"{what} diverged at step {step}, particle {particle} (value={value!r})"
        )


class TrainingDivergedError(MeanFieldError):
    """Training aborted; ``trace`` holds the records gathered so far."""

    def __init__(self, iteration: int, cause: Exception, trace=None):
        self.iteration = iteration
        self.cause = cause
        self.trace = trace
        super().__init__(f"training diverged at iteration {iteration}: {cause}")


class RiccatiBlowUpError(MeanFieldError):
    def __init__(self, blowup_time: float, name: str = "riccati"):
        self.blowup_time = blowup_time
        super().__init__(f"{name} coefficients blew up at t={blowup_time:.6g}")


class PicardNotConvergedError(MeanFieldError):
    def __init__(self, residuals: Sequence[float]):
        self.residuals: List[float] = list(residuals)
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(
            f"Picard iteration did not converge after {len(self.residuals)} "
            f"iterations (last residual {last:.3e})"
        )


class GridMismatchError(MeanFieldError, ValueError):
    """Two quantities to compare are not sampled on the same grid."""


class ConfigError(MeanFieldError, ValueError):
    """Invalid experiment configuration; ``field`` is the dotted path."""

    def __init__(self, field: Optional[str], message: str):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
