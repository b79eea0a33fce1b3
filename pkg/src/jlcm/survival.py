"""Class-and-cause-specific proportional hazards.

Weibull baseline: ``a0(t) = s * k * (s t)^(k-1)`` and ``A0(t) = (s t)^k`` with
scale ``s`` and shape ``k``. M-spline baseline: ``a0(t) = sum_m w_m M_m(t)``
with cumulative ``sum_m w_m I_m(t)``. The class hazard multiplies the
baseline by ``exp(logmult_g + x'delta_lg)``.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate

from .model import HazardSpec
from .params import ModelParams
from .splines import SplineBasisSpec, ispline_matrix, mspline_matrix


class DegenerateLikelihood(ArithmeticError):
    pass


def weibull_cumhaz(t, scale, shape):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(t > 0, np.exp(shape * (np.log(scale) + np.log(np.maximum(t, 1e-300)))), 0.0)


def weibull_log_hazard(t, scale, shape):
    with np.errstate(divide="ignore"):
        return np.log(scale) + np.log(shape) + (shape - 1.0) * (np.log(scale) + np.log(t))


class HazardModel:
    """Evaluates the survival submodel at fixed natural parameters."""

    def __init__(self, hazard: HazardSpec, params: ModelParams, basis: SplineBasisSpec | None = None):
        self.spec = hazard
        self.params = params
        self.basis = basis
        if hazard.family == "msplines" and basis is None:
            raise ValueError("M-spline hazard needs its basis")

    def baseline_hazard(self, t, l: int, g: int) -> np.ndarray:
        """Class ``g`` baseline of cause ``l`` (0-based), including the
        proportional-mode class multiplier."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ValueError("baseline hazard needs t > 0")
        base = self.params.hazard_base[l][g]
        mult = np.exp(self.params.hazard_logmult[l, g])
        if self.spec.family == "weibull":
            out = np.exp(weibull_log_hazard(t, base[0], base[1]))
        else:
            out = mspline_matrix(t.ravel(), self.basis) @ base
            out = out.reshape(t.shape)
        return out * mult

    def cumulative_hazard(self, t, l: int, g: int) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        base = self.params.hazard_base[l][g]
        mult = np.exp(self.params.hazard_logmult[l, g])
        if self.spec.family == "weibull":
            out = weibull_cumhaz(t, base[0], base[1])
        else:
            out = (ispline_matrix(t.ravel(), self.basis, clamp=True) @ base).reshape(t.shape)
        return out * mult

    def linear_predictor(self, l: int, g: int, XT) -> float:
        XT = np.asarray(XT, dtype=float)
        return float(XT @ self.params.delta[l, :, g]) if XT.size else 0.0

    def hazard(self, t, l: int, g: int, XT=()) -> np.ndarray:
        return self.baseline_hazard(t, l, g) * np.exp(self.linear_predictor(l, g, XT))

    def survival(self, t, g: int, XT=()) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for l in range(self.spec.causes):
            total = total + self.cumulative_hazard(t, l, g) * np.exp(self.linear_predictor(l, g, XT))
        return np.exp(-total)

    def event_log_contribution(self, T: float, cause: int, g: int, XT=()) -> float:
        """``log S(T|g) + log a_cause(T|g)`` (the hazard term only for events)."""
        out = float(np.log(self.survival(np.array([T]), g, XT))[0])
        if cause > 0:
            h = float(self.hazard(np.array([T]), cause - 1, g, XT)[0])
            if h <= 0:
                raise DegenerateLikelihood(f"zero hazard for cause {cause} at observed event time {T}")
            out += np.log(h)
        return out

    def cumulative_incidence(self, grid, l: int, g: int, XT=(), tol: float = 1e-12) -> np.ndarray:
        """Cause-``l`` cumulative incidence ``int_0^t a_l(u) S(u) du`` on an
        increasing grid, by adaptive quadrature between grid points (the
        Weibull hazard may be singular at 0)."""
        grid = np.asarray(grid, dtype=float)
        if np.any(np.diff(grid) < 0) or (grid.size and grid[0] < 0):
            raise ValueError("grid must be nonnegative and increasing")

        def f(u):
            u = np.array([u])
            return float(self.hazard(u, l, g, XT)[0] * self.survival(u, g, XT)[0])

        out = np.zeros_like(grid)
        acc = 0.0
        prev = 0.0
        for i, t in enumerate(grid):
            if t > prev:
                val, _ = integrate.quad(f, prev, t, epsabs=tol, epsrel=tol, limit=200)
                acc += val
                prev = t
            out[i] = acc
        return out


def subject_survival(model: HazardModel, XT, g: int, t) -> np.ndarray:
    return model.survival(t, g, XT)


def event_log_contribution(model: HazardModel, T: float, cause: int, g: int, XT=()) -> float:
    return model.event_log_contribution(T, cause, g, XT)
