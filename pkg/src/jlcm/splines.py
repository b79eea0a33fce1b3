"""M-spline and I-spline bases, and the marker link functions built on them.

M-splines of degree ``k`` are B-splines rescaled to integrate to one over
their support. The I-spline basis used here is the running integral of the
M-spline basis of the same ``SplineBasisSpec``, so ``sum(eta * I(x))`` has
derivative ``sum(eta * M(x))``. Nonnegative coefficients on I-splines give a
monotone map; on M-splines they give a nonnegative hazard.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline


class RangeError(ValueError):
    """Value outside the declared boundary of a spline basis."""


@dataclass(frozen=True)
class SplineBasisSpec:
    degree: int
    interior_knots: tuple[float, ...]
    low: float
    high: float

    def __post_init__(self):
        object.__setattr__(self, "interior_knots", tuple(float(k) for k in self.interior_knots))
        if self.degree not in (1, 2, 3):
            raise ValueError(f"spline degree must be 1, 2 or 3, got {self.degree}")
        if not self.low < self.high:
            raise ValueError(f"boundary must satisfy low < high, got ({self.low}, {self.high})")
        knots = np.asarray(self.interior_knots)
        if knots.size and (np.any(np.diff(knots) <= 0) or knots[0] <= self.low or knots[-1] >= self.high):
            raise ValueError("interior knots must be strictly increasing and inside (low, high)")

    @property
    def n_basis(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    def knot_vector(self, order: int) -> np.ndarray:
        return np.r_[[self.low] * order, self.interior_knots, [self.high] * order]

    @classmethod
    def from_values(cls, values, degree: int, n_knots: int = 3, placement: str = "quantile",
                    low: float | None = None, high: float | None = None) -> "SplineBasisSpec":
        """Place ``n_knots`` interior knots at quantiles (or equally spaced) of ``values``."""
        values = np.asarray(values, dtype=float)
        lo = float(values.min()) if low is None else float(low)
        hi = float(values.max()) if high is None else float(high)
        if placement == "quantile":
            probs = np.linspace(0, 1, n_knots + 2)[1:-1]
            inner = values[(values > lo) & (values < hi)]
            knots = np.quantile(inner if inner.size else values, probs)
        elif placement == "equidistant":
            knots = np.linspace(lo, hi, n_knots + 2)[1:-1]
        else:
            raise ValueError(f"unknown knot placement {placement!r}")
        knots = np.unique(knots)
        knots = knots[(knots > lo) & (knots < hi)]
        return cls(degree, tuple(knots), lo, hi)


def _bspline_matrix(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    return BSpline.design_matrix(x, knots, degree).toarray()


def mspline_matrix(x, spec: SplineBasisSpec) -> np.ndarray:
    """M-spline basis at each point of ``x``; rows are zero outside ``[low, high]``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros((x.size, spec.n_basis))
    inside = (x >= spec.low) & (x <= spec.high)
    if inside.any():
        order = spec.degree + 1
        t = spec.knot_vector(order)
        scale = order / (t[order:] - t[:-order])
        out[inside] = _bspline_matrix(x[inside], t, spec.degree) * scale
    return out


def ispline_matrix(x, spec: SplineBasisSpec, clamp: bool = False) -> np.ndarray:
    """Integrated M-spline basis.

    With ``clamp`` points beyond the boundary take the boundary values (0 or 1);
    otherwise they raise :class:`RangeError`.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    outside = (x < spec.low) | (x > spec.high)
    if outside.any() and not clamp:
        bad = x[outside][0]
        raise RangeError(f"value {bad!r} outside spline range [{spec.low}, {spec.high}]")
    xc = np.clip(x, spec.low, spec.high)
    order = spec.degree + 1
    b = _bspline_matrix(xc, spec.knot_vector(order + 1), spec.degree + 1)
    # I_m = sum_{j > m} B_j of one order higher; B_0 is the left-boundary function
    tail = np.cumsum(b[:, ::-1], axis=1)[:, ::-1]
    return tail[:, 1:]


def ispline_basis(x: float, spec: SplineBasisSpec) -> np.ndarray:
    return ispline_matrix([x], spec)[0]


def mspline_basis(t: float, spec: SplineBasisSpec) -> np.ndarray:
    return mspline_matrix([t], spec)[0]


@dataclass(frozen=True)
class LinkFunction:
    """Monotone map from a marker's scale to its latent dimension.

    ``coefficients`` are the already-transformed (nonnegative) spline weights;
    for the linear link ``coefficients = (slope,)``.
    """

    kind: str = "identity"
    intercept: float = 0.0
    coefficients: tuple[float, ...] = ()
    basis: SplineBasisSpec | None = None
    _w: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "_w", w)
        if self.kind == "linear":
            if w.shape != (1,) or not w[0] > 0:
                raise ValueError("linear link needs one positive slope")
        elif self.kind == "isplines":
            if self.basis is None or w.shape != (self.basis.n_basis,):
                raise ValueError("i-spline link needs a basis and one coefficient per basis function")
            if np.any(w < 0):
                raise ValueError("i-spline coefficients must be nonnegative")
            # the same map as one B-spline of order degree + 2: I_m sums the
            # B-splines above m, so coefficient j carries w_0 + ... + w_{j-1}
            order = self.basis.degree + 1
            spl = BSpline(self.basis.knot_vector(order + 1), self.intercept + np.r_[0.0, np.cumsum(w)],
                          self.basis.degree + 1, extrapolate=False)
            object.__setattr__(self, "_spline", spl)
            object.__setattr__(self, "_slope", spl.derivative())
        elif self.kind != "identity":
            raise ValueError(f"unknown link kind {self.kind!r}")

    def apply(self, y) -> tuple[np.ndarray, np.ndarray]:
        """Transformed values and Jacobians dH/dy, elementwise."""
        y = np.asarray(y, dtype=float)
        if self.kind == "identity":
            return y.copy(), np.ones_like(y)
        if self.kind == "linear":
            return self.intercept + self._w[0] * y, np.full_like(y, self._w[0])
        flat = y.ravel()
        h = self.intercept + ispline_matrix(flat, self.basis) @ self._w
        jac = mspline_matrix(flat, self.basis) @ self._w
        return h.reshape(y.shape), jac.reshape(y.shape)

    def transformed_range(self) -> tuple[float, float]:
        if self.kind != "isplines":
            return -np.inf, np.inf
        return self.intercept, self.intercept + float(self._w.sum())

    def invert(self, lam, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
        """Inverse link. Returns ``(y, out_of_range)``; spline inputs beyond
        ``[H(low), H(high)]`` are clamped to the boundary and flagged."""
        lam = np.asarray(lam, dtype=float)
        if self.kind == "identity":
            return lam.copy(), np.zeros(lam.shape, dtype=bool)
        if self.kind == "linear":
            return (lam - self.intercept) / self._w[0], np.zeros(lam.shape, dtype=bool)
        lo_val, hi_val = self.transformed_range()
        flat = lam.ravel()
        flags = (flat < lo_val) | (flat > hi_val)
        target = np.clip(flat, lo_val, hi_val)
        a = np.full(flat.shape, self.basis.low)
        b = np.full(flat.shape, self.basis.high)
        width = self.basis.high - self.basis.low
        # bisection to a coarse bracket, then Newton polish inside the bracket
        for _ in range(64):
            mid = 0.5 * (a + b)
            below = self._spline(mid) < target
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
            if np.max(b - a) <= 1e-12 * width:
                break
        y = 0.5 * (a + b)
        for _ in range(5):
            h, jac = self._spline(y), self._slope(y)
            resid = h - target
            if np.all(np.abs(resid) <= 1e-3 * tol * (1 + np.abs(target))):
                break
            step = np.where(jac > 0, resid / np.where(jac > 0, jac, 1.0), 0.0)
            y = np.clip(y - step, a, b)
        return y.reshape(lam.shape), flags.reshape(lam.shape)


def link_apply(y: float, link: LinkFunction) -> tuple[float, float]:
    h, j = link.apply(np.array([y]))
    return float(h[0]), float(j[0])


def link_invert(lam: float, link: LinkFunction) -> tuple[float, bool]:
    y, flag = link.invert(np.array([lam]))
    return float(y[0]), bool(flag[0])
