"""B-spline bases on [0, t_max] and second-order difference penalties."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline


class ConfigurationError(ValueError):
    """Raised for inconsistent model or basis configuration."""


class DomainError(ValueError):
    """Raised when a function is evaluated outside its support."""


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis with equidistant interior knots.

    Attributes
    ----------
    M : int
        Number of basis functions.
    degree : int
        Polynomial degree of each piece.
    knots : ndarray
        Full knot vector of length ``M + degree + 1`` with boundary knots
        repeated ``degree + 1`` times.
    penalty_order : int
        Order of the difference penalty (always 2).
    """

    M: int
    degree: int
    knots: np.ndarray
    penalty_order: int = 2
    _breaks: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "_breaks", np.unique(knots))

    @property
    def t_max(self) -> float:
        return float(self.knots[-1])

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values, including both boundaries."""
        return self._breaks

    def design(self, t) -> np.ndarray:
        """Evaluate all basis functions at the points ``t``.

        Returns an array of shape ``(len(t), M)``.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.size and (t.min() < 0.0 or t.max() > self.t_max):
            raise DomainError(
                f"evaluation points must lie in [0, {self.t_max}], got "
                f"[{t.min()}, {t.max()}]"
            )
        if t.size == 0:
            return np.zeros((0, self.M))
        return BSpline.design_matrix(t, self.knots, self.degree).toarray()

    def __call__(self, t: float) -> np.ndarray:
        return evaluate(self, t)


def build_basis(M: int, degree: int, t_max: float) -> SplineBasis:
    """Clamped basis of ``M`` functions of the given degree on ``[0, t_max]``."""
    if degree < 0:
        raise ConfigurationError(f"degree must be non-negative, got {degree}")
    if M < degree + 1:
        raise ConfigurationError(f"need M >= degree + 1 basis functions, got M={M}, degree={degree}")
    if not np.isfinite(t_max) or t_max <= 0:
        raise ConfigurationError(f"t_max must be positive and finite, got {t_max}")
    n_interior = M - degree - 1
    interior = np.linspace(0.0, t_max, n_interior + 2)[1:-1]
    knots = np.concatenate([np.zeros(degree + 1), interior, np.full(degree + 1, float(t_max))])
    return SplineBasis(M=M, degree=degree, knots=knots)


def evaluate(basis: SplineBasis, t: float) -> np.ndarray:
    """Values of the ``M`` basis functions at a single time point."""
    return basis.design(np.asarray([t], dtype=float))[0]


@dataclass(frozen=True)
class DifferencePenalty:
    """Second-order difference operator ``D`` and its Gram matrix ``D^T D``."""

    D: np.ndarray
    gram: np.ndarray

    def quadratic_form(self, alpha) -> float:
        """Sum of squared second differences of ``alpha``."""
        diff = self.D @ np.asarray(alpha, dtype=float)
        return float(diff @ diff)


def difference_penalty(M: int) -> DifferencePenalty:
    if M < 3:
        raise ConfigurationError(f"second-order differences need M >= 3, got {M}")
    D = np.diff(np.eye(M), n=2, axis=0)
    return DifferencePenalty(D=D, gram=D.T @ D)
