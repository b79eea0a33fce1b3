"""Class-specific latent-dimension mixed model for one subject at a time.

These are the reference (dense) computations; the batched evaluator in
:mod:`jlcm.likelihood` uses an equivalent low-rank form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DimensionDesign, term_matrix
from .params import ModelParams, ParameterLayout
from .splines import LinkFunction

LOG_2PI = np.log(2 * np.pi)


class EmptyDimension(LookupError):
    """Subject has no observation on the dimension; its density factor is omitted."""


def dimension_moments(design: DimensionDesign | None, d: str, g: int, params: ModelParams,
                      layout: ParameterLayout) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``X beta_g`` and covariance ``Z B_g Z' + Sigma`` of the transformed observations."""
    if design is None or design.values.size == 0:
        raise EmptyDimension(d)
    m = design.X @ params.beta[d][:, g]
    B = params.covariance(d, g)
    Sigma = np.diag(params.sigma[design.marker_index] ** 2)
    V = design.Z @ B @ design.Z.T + Sigma
    return m, V


def dimension_logdensity(design: DimensionDesign | None, d: str, g: int, params: ModelParams,
                         layout: ParameterLayout, links: list[LinkFunction] | None = None) -> float:
    """``log phi(H(Y); m, V)`` plus the log-Jacobians of the links."""
    m, V = dimension_moments(design, d, g, params, layout)
    links = layout.links(params) if links is None else links
    h = np.empty_like(design.values)
    log_jac = 0.0
    for k in np.unique(design.marker_index):
        pos = design.marker_index == k
        hk, jk = links[k].apply(design.values[pos])
        h[pos] = hk
        log_jac += float(np.log(jk).sum())
    try:
        c = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(f"degenerate covariance for dimension {d}, class {g + 1}") from None
    z = np.linalg.solve(c, h - m)
    n = h.size
    return float(-0.5 * (n * LOG_2PI + 2 * np.log(np.diag(c)).sum() + z @ z) + log_jac)


@dataclass
class Trajectory:
    dimension: str
    cls: int
    times: np.ndarray
    latent_mean: np.ndarray
    marker_pred: dict[str, np.ndarray]
    lo95: dict[str, np.ndarray | None]
    hi95: dict[str, np.ndarray | None]
    flagged: dict[str, np.ndarray]


def class_trajectory(layout: ParameterLayout, theta: np.ndarray, V_theta: np.ndarray | None, d: str, g: int,
                     times, covariates: dict | None = None, n_draws: int = 0,
                     rng: np.random.Generator | None = None) -> Trajectory:
    """Mean latent level of dimension ``d`` in class ``g`` and its marker-scale
    predictions, with percentile bands from parameter draws."""
    times = np.asarray(times, dtype=float)
    cov = covariates or {}
    X = term_matrix(layout.fixed_terms[d], times, cov)
    markers = [(k, m) for k, m in enumerate(layout.spec.markers) if m.dimension == d]

    def predict(th):
        P = layout.unpack(th)
        lam = X @ P.beta[d][:, g]
        links = layout.links(P)
        out = {}
        flags = {}
        for k, m in markers:
            y, f = links[k].invert(lam)
            out[m.id] = y
            flags[m.id] = f
        return lam, out, flags

    lam, pred, flags = predict(theta)
    lo = {m.id: None for _, m in markers}
    hi = {m.id: None for _, m in markers}
    if n_draws > 0 and V_theta is not None:
        rng = rng or np.random.default_rng(0)
        Vs = 0.5 * (V_theta + V_theta.T)
        w, Q = np.linalg.eigh(Vs)
        root = Q * np.sqrt(np.clip(w, 0, None))
        draws = {m.id: np.empty((n_draws, times.size)) for _, m in markers}
        for r in range(n_draws):
            th = theta + root @ rng.standard_normal(theta.size)
            _, pr, _ = predict(th)
            for key, val in pr.items():
                draws[key][r] = val
        for key, arr in draws.items():
            lo[key] = np.percentile(arr, 2.5, axis=0)
            hi[key] = np.percentile(arr, 97.5, axis=0)
    return Trajectory(d, g, times, lam, pred, lo, hi, flags)
