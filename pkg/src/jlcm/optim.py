"""Finite-difference derivatives and a Marquardt-Levenberg maximizer.

Convergence needs all three of: the change in objective, the largest squared
parameter change, and the relative distance to maximum ``g'(-H)^-1 g / p``
below their tolerances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max-iter"
DEGENERATE = "degenerate"


class NonFiniteObjective(ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class OptimizerSettings:
    max_iterations: int = 500
    tolerance_function: float = 1e-4
    tolerance_parameters: float = 1e-4
    tolerance_derivatives: float = 1e-4
    step_floor: float = 1e-4
    step_relative: float = 1e-4

    def __post_init__(self):
        if min(self.tolerance_function, self.tolerance_parameters, self.tolerance_derivatives) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")

    def steps(self, theta: np.ndarray) -> np.ndarray:
        return np.maximum(self.step_floor, self.step_relative * np.abs(theta))


def gradient(objective, theta, steps=None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    h = OptimizerSettings().steps(theta) if steps is None else steps
    g = np.empty(theta.size)
    for j in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h[j]
        tm[j] -= h[j]
        fp, fm = objective(tp), objective(tm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteObjective(f"objective not finite when perturbing parameter {j}", j)
        g[j] = (fp - fm) / (2 * h[j])
    return g


def numeric_derivatives(objective, theta, settings: OptimizerSettings | None = None):
    """Central-difference gradient and Hessian.

    The Hessian is the central difference of the central-difference gradient,
    i.e. the four-point stencil ``f(++) - f(+-) - f(-+) + f(--)`` off the
    diagonal, and ``f(+2h) - 2 f + f(-2h)`` on it. It is symmetric by
    construction and symmetrized again for round-off.
    """
    settings = settings or OptimizerSettings()
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    h = settings.steps(theta)
    f0 = objective(theta)
    if not np.isfinite(f0):
        raise NonFiniteObjective("objective not finite at the evaluation point")

    def f(point, j):
        val = objective(point)
        if not np.isfinite(val):
            raise NonFiniteObjective(f"objective not finite when perturbing parameter {j}", j)
        return val

    g = np.empty(p)
    H = np.empty((p, p))
    for i in range(p):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h[i]
        tm[i] -= h[i]
        g[i] = (f(tp, i) - f(tm, i)) / (2 * h[i])
        tp[i] += h[i]
        tm[i] -= h[i]
        H[i, i] = (f(tp, i) - 2 * f0 + f(tm, i)) / (4 * h[i] * h[i])
        for j in range(i):
            t = theta.copy()
            t[i] += h[i]
            t[j] += h[j]
            fpp = f(t, i)
            t[j] -= 2 * h[j]
            fpm = f(t, i)
            t[i] -= 2 * h[i]
            fmm = f(t, i)
            t[j] += 2 * h[j]
            fmp = f(t, i)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])
    H = 0.5 * (H + H.T)
    return g, H


@dataclass
class OptimizerResult:
    theta: np.ndarray
    value: float
    status: str
    iterations: int
    criteria: dict = field(default_factory=dict)
    trace: list[float] = field(default_factory=list)
    gradient: np.ndarray | None = None
    hessian: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _rdm(g, H):
    try:
        c = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        return np.inf
    z = np.linalg.solve(c, g)
    return float(z @ z) / g.size


def marquardt_levenberg(objective, theta_init, settings: OptimizerSettings | None = None,
                        derivatives=None, callback=None) -> OptimizerResult:
    """Maximize ``objective`` starting from ``theta_init``.

    Each iteration first tries the plain Newton step when ``-H`` is positive
    definite; otherwise (or if that step does not improve) the diagonal is
    inflated, ``H - lam * diag(|H_jj| + tau)``, with ``lam`` multiplied by 10
    after a rejected step and divided by 10 after an accepted one. An
    accepted damped step is doubled for as long as the objective keeps
    increasing along it.

    ``derivatives(theta, settings)`` may supply a faster evaluation of the
    same finite-difference gradient and Hessian. ``callback(it, theta, value,
    criteria)`` runs after each accepted step; returning True stops the run
    with status ``degenerate``.
    """
    settings = settings or OptimizerSettings()
    theta = np.array(theta_init, dtype=float)
    value = objective(theta)
    if not np.isfinite(value):
        raise NonFiniteObjective("objective not finite at the initial point")
    trace = [value]
    if settings.max_iterations == 0:
        return OptimizerResult(theta, value, MAX_ITER, 0, trace=trace)
    tau = 1e-6
    lam = 1e-2
    p = theta.size
    criteria = {}
    for it in range(1, settings.max_iterations + 1):
        try:
            if derivatives is None:
                g, H = numeric_derivatives(objective, theta, settings)
            else:
                g, H = derivatives(theta, settings)
        except NonFiniteObjective as exc:
            log.debug("derivatives failed: %s", exc)
            return OptimizerResult(theta, value, DEGENERATE, it, criteria, trace)
        rdm = _rdm(g, H)
        diag = np.abs(np.diag(H)) + tau
        accepted = False
        newton_ok = np.isfinite(rdm)
        tries = 0
        while tries < 60:
            tries += 1
            if newton_ok:
                A = -H
            else:
                A = -H + lam * np.diag(diag)
            try:
                c = np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                newton_ok = False
                lam *= 10
                continue
            step = np.linalg.solve(c.T, np.linalg.solve(c, g))
            trial = theta + step
            new_value = objective(trial)
            if np.isfinite(new_value) and new_value >= value:
                accepted = True
                if not newton_ok:
                    lam = max(lam / 10, 1e-12)
                    # a damped step only fixes the direction; stretch it while that pays
                    for _ in range(20):
                        longer = theta + 2.0 * step
                        v = objective(longer)
                        if not (np.isfinite(v) and v > new_value):
                            break
                        step, trial, new_value = 2.0 * step, longer, v
                break
            if newton_ok:
                newton_ok = False
            else:
                lam *= 10
            if lam > 1e16:
                break
        if not accepted:
            # no improving step: stationary up to numerical noise, or stuck
            ok = rdm < settings.tolerance_derivatives
            criteria = {"function": 0.0, "parameters": 0.0, "derivatives": rdm}
            status = CONVERGED if ok else DEGENERATE
            return OptimizerResult(theta, value, status, it, criteria, trace, g, H)
        d_f = abs(new_value - value)
        d_p = float(np.max(step ** 2)) if p else 0.0
        theta, value = trial, new_value
        trace.append(value)
        criteria = {"function": d_f, "parameters": d_p, "derivatives": rdm}
        if callback is not None and callback(it, theta, value, criteria):
            return OptimizerResult(theta, value, DEGENERATE, it, criteria, trace)
        if (d_f < settings.tolerance_function and d_p < settings.tolerance_parameters
                and rdm < settings.tolerance_derivatives):
            return OptimizerResult(theta, value, CONVERGED, it, criteria, trace, g, H)
    return OptimizerResult(theta, value, MAX_ITER, settings.max_iterations, criteria, trace)
