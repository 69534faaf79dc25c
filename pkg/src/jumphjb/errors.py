"""Exception types shared across the solvers.

The CLI maps these onto exit codes: config problems exit 2, numeric
failures exit 3, non-convergence exits 4.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration or argument value violates a documented contract."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericError(ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class DivergenceError(NumericError):
    """State blow-up during forward simulation.

    Carries the first step index at which the divergence guard tripped.
    """

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (first bad step {step_index})")
        self.step_index = step_index


class CflViolationError(ValueError):
    """Explicit time step too large for the assembled spatial operator."""

    def __init__(self, dt: float, dt_max: float):
        super().__init__(
            f"time step {dt:.3e} violates the stability bound; "
            f"use dt <= {dt_max:.3e}"
        )
        self.dt = dt
        self.suggested_dt = dt_max


class NotConvergedError(RuntimeError):
    """Iteration budget exhausted before reaching the requested tolerance.

    ``history`` holds the per-iteration norms observed so far and
    ``partial`` the best iterate, so callers can inspect or resume.
    """

    def __init__(self, message: str, history=None, partial=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
        self.partial = partial
