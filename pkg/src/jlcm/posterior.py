"""Posterior classification, information criteria, goodness-of-fit tables and
regressions of external information on the latent classes."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import DataError, Dataset, build_designs
from .estimation import FitResult
from .likelihood import LikelihoodEngine, logsumexp
from .optim import CONVERGED, OptimizerSettings, marquardt_levenberg, numeric_derivatives
from .splines import LinkFunction

log = logging.getLogger(__name__)


@dataclass
class PosteriorClassification:
    ids: list[str]
    probs: np.ndarray              # (N, G)

    @property
    def G(self) -> int:
        return self.probs.shape[1]

    @property
    def assigned(self) -> np.ndarray:
        """Most likely class (0-based); ``argmax`` keeps the lowest index on ties."""
        return np.argmax(self.probs, axis=1)

    def table(self) -> np.ndarray:
        """Row ``g``: mean posterior probabilities of the subjects assigned to ``g``."""
        out = np.full((self.G, self.G), np.nan)
        a = self.assigned
        for g in range(self.G):
            if np.any(a == g):
                out[g] = self.probs[a == g].mean(axis=0)
        return out

    def counts(self) -> np.ndarray:
        return np.bincount(self.assigned, minlength=self.G)


def posterior_probs(fit: FitResult, ds: Dataset, engine: LikelihoodEngine | None = None) -> PosteriorClassification:
    engine = engine or LikelihoodEngine(ds, fit.spec, fit.bases)
    return PosteriorClassification(engine.ids, engine.posterior(fit.theta))


def classify(pc: PosteriorClassification) -> tuple[np.ndarray, np.ndarray]:
    """Assignments (0-based) and the posterior classification table."""
    return pc.assigned, pc.table()


# -- criteria ---------------------------------------------------------------
def _xlogx(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def criteria_values(loglik: float, p: int, N: int, probs: np.ndarray) -> dict:
    G = probs.shape[1]
    bic = -2 * loglik + p * np.log(N)
    aic = -2 * loglik + 2 * p
    if G > 1:
        en = 1 + _xlogx(probs).sum() / (N * np.log(G))
    else:
        en = np.nan
    assigned = np.argmax(probs, axis=1)
    with np.errstate(divide="ignore"):
        lp = np.log(probs[np.arange(probs.shape[0]), assigned])
    icl = bic - 2 * lp.sum()
    return {"G": G, "loglik": float(loglik), "p": int(p), "AIC": float(aic), "BIC": float(bic),
            "entropy": float(en), "ICL": float(icl)}


def information_criteria(fit: FitResult, pc: PosteriorClassification) -> dict:
    """``G, loglik, p, AIC, BIC, entropy, ICL`` (entropy is NaN for one class)."""
    return criteria_values(fit.loglik, fit.p, fit.N, pc.probs)


# -- goodness of fit ----------------------------------------------------------
_GH_X, _GH_W = np.polynomial.hermite.hermgauss(30)


def marginal_marker_mean(link: LinkFunction, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """``E[H^-1(L)]`` for ``L ~ N(mean, var)`` on the marker scale."""
    mean = np.asarray(mean, dtype=float)
    if link.kind == "identity":
        return mean
    if link.kind == "linear":
        return (mean - link.intercept) / link.coefficients[0]
    nodes = mean[..., None] + np.sqrt(2 * np.asarray(var))[..., None] * _GH_X
    y, _ = link.invert(nodes.ravel())
    return (y.reshape(nodes.shape) * _GH_W).sum(axis=-1) / np.sqrt(np.pi)


def gof_longitudinal(fit: FitResult, pc: PosteriorClassification, ds: Dataset, bin_width: float = 1.0) -> list[dict]:
    """Weighted mean observations and weighted mean predictions per class,
    marker and time bin; weights are the posterior class probabilities.

    ``weight`` is the sum of ``pi_ig`` over the subjects observed in the bin;
    means weight each observation by its subject's probability.
    """
    spec = fit.spec
    layout = fit.layout
    P = layout.unpack(fit.theta)
    links = layout.links(P)
    designs = build_designs(ds, spec)
    rows = []
    acc: dict[tuple[int, int, int], list] = {}
    for i, sd in enumerate(designs):
        for d in spec.dimensions:
            dd = sd.dims.get(d.id)
            if dd is None:
                continue
            Zs = dd.Z
            for g in range(fit.G):
                B = P.covariance(d.id, g)
                mean = dd.X @ P.beta[d.id][:, g]
                var = np.einsum("ij,jk,ik->i", Zs, B, Zs) + P.sigma[dd.marker_index] ** 2
                w = pc.probs[i, g]
                for k in np.unique(dd.marker_index):
                    pos = dd.marker_index == k
                    pred = marginal_marker_mean(links[k], mean[pos], var[pos])
                    bins = np.floor(dd.times[pos] / bin_width).astype(int)
                    for b in np.unique(bins):
                        sel = bins == b
                        key = (g, int(k), int(b))
                        a = acc.setdefault(key, [0.0, 0.0, 0.0, 0.0, 0])
                        n = int(sel.sum())
                        a[0] += w                      # subject weight
                        a[1] += w * n                  # observation weight
                        a[2] += w * dd.values[pos][sel].sum()
                        a[3] += w * pred[sel].sum()
                        a[4] += n
    for (g, k, b), (wsub, wobs, so, sp, n) in sorted(acc.items()):
        if wobs <= 0:
            continue
        rows.append({"class": g + 1, "marker": spec.markers[k].id, "bin_start": b * bin_width,
                     "bin_mid": (b + 0.5) * bin_width, "n_obs": n, "weight": wsub,
                     "observed": so / wobs, "predicted": sp / wobs})
    return rows


def _exposure(entry, time, edges):
    lo = np.maximum(entry[:, None], edges[None, :-1])
    hi = np.minimum(time[:, None], edges[None, 1:])
    return np.clip(hi - lo, 0, None)


def gof_survival(fit: FitResult, pc: PosteriorClassification, ds: Dataset, knot_spacing: float = 2.0,
                 n_boot: int = 200, seed: int = 0, engine: LikelihoodEngine | None = None) -> list[dict]:
    """Posterior-weighted occurrence/exposure rates on intervals of width
    ``knot_spacing``, with subject-bootstrap percentile intervals, next to the
    weighted mean model hazard over the same risk sets."""
    from .survival import HazardModel
    entry, time, cause = ds.survival_arrays()
    edges = np.arange(0.0, time.max() + knot_spacing, knot_spacing)
    if edges[-1] < time.max():
        edges = np.r_[edges, edges[-1] + knot_spacing]
    expo = _exposure(entry, time, edges)                       # (N, J)
    J = edges.size - 1
    interval = np.clip(np.searchsorted(edges, time, side="left") - 1, 0, J - 1)
    L = fit.spec.L
    cause_sets = [("all", cause > 0)] if L == 1 else [("all", cause > 0)] + [
        (str(l + 1), cause == l + 1) for l in range(L)]
    engine = engine or LikelihoodEngine(ds, fit.spec, fit.bases)
    hm = HazardModel(fit.spec.hazard, fit.params, fit.bases.hazard)
    XT = engine.XT
    W = pc.probs
    rng = np.random.default_rng(seed)
    boot_idx = [rng.integers(0, ds.N, ds.N) for _ in range(n_boot)]
    # expected events of each subject in each interval, per class and cause
    cum = np.zeros((L, fit.G, ds.N, J))
    for l in range(L):
        for g in range(fit.G):
            mult = np.exp(XT @ fit.params.delta[l, :, g]) if XT.shape[1] else np.ones(ds.N)
            lo = np.maximum(entry[:, None], edges[None, :-1])
            hi = np.minimum(time[:, None], edges[None, 1:])
            hi = np.maximum(hi, lo)
            cum[l, g] = (hm.cumulative_hazard(hi, l, g) - hm.cumulative_hazard(lo, l, g)) * mult[:, None]
    rows = []
    for label, mask in cause_sets:
        ev = np.zeros((ds.N, J))
        ev[np.flatnonzero(mask), interval[mask]] = 1.0
        causes = range(L) if label == "all" else [int(label) - 1]
        for g in range(fit.G):
            w = W[:, g]
            e_w = w @ ev
            x_w = w @ expo
            pred_events = sum(w @ cum[l, g] for l in causes)
            with np.errstate(invalid="ignore", divide="ignore"):
                rate = np.where(x_w > 0, e_w / x_w, np.nan)
                pred = np.where(x_w > 0, pred_events / x_w, np.nan)
            lo95 = hi95 = np.full(J, np.nan)
            if n_boot > 0:
                br = np.empty((n_boot, J))
                for b, idx in enumerate(boot_idx):
                    xb = w[idx] @ expo[idx]
                    with np.errstate(invalid="ignore", divide="ignore"):
                        br[b] = np.where(xb > 0, (w[idx] @ ev[idx]) / xb, np.nan)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    lo95 = np.nanpercentile(br, 2.5, axis=0)
                    hi95 = np.nanpercentile(br, 97.5, axis=0)
            for j in range(J):
                rows.append({"class": g + 1, "cause": label, "start": edges[j], "end": edges[j + 1],
                             "events": e_w[j], "exposure": x_w[j], "rate": rate[j],
                             "lo95": lo95[j], "hi95": hi95[j], "predicted": pred[j]})
    return rows


# -- external information -----------------------------------------------------
@dataclass
class ExternalFit:
    case: int
    names: list[str]
    estimates: np.ndarray
    variance: np.ndarray | None
    loglik: float
    status: str
    n_subjects: int
    theta_hat: np.ndarray
    notes: list[str] = field(default_factory=list)

    def table(self) -> list[dict]:
        se = np.sqrt(np.clip(np.diag(self.variance), 0, None)) if self.variance is not None \
            else np.full(self.estimates.size, np.nan)
        rows = []
        for n, v, s in zip(self.names, self.estimates, se):
            z = v / s if s > 0 else np.nan
            pval = 2 * stats.norm.sf(abs(z)) if np.isfinite(z) else np.nan
            rows.append({"name": n, "estimate": float(v), "se": float(s), "z": float(z), "p_value": float(pval)})
        return rows


@dataclass(frozen=True)
class ExternalOutcome:
    """External outcome rows: subject id, value and covariate values
    (several rows per subject for repeated measures)."""

    ids: tuple[str, ...]
    values: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict], value: str = "value", covariates=()):
        ids = tuple(str(r["id"]) for r in rows)
        vals = np.array([float(r[value]) for r in rows])
        cov = {c: np.array([float(r[c]) for r in rows]) for c in covariates}
        return cls(ids, vals, cov)


def _hessian_variance(H):
    try:
        c = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        return None
    ci = np.linalg.inv(c)
    V = ci.T @ ci
    return 0.5 * (V + V.T)


def _log_class_weights(fit: FitResult, ds: Dataset, engine=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    engine = engine or LikelihoodEngine(ds, fit.spec, fit.bases)
    prior, dens, trunc = engine.joint_terms(fit.theta)
    return prior, dens, trunc if engine.truncated else None


def external_outcome_fit(fit: FitResult, ds: Dataset, outcome: ExternalOutcome, class_specific_effects=False,
                         settings: OptimizerSettings | None = None, engine=None) -> ExternalFit:
    """Regression of an external continuous outcome on the latent classes with
    the joint-model parameters held at their estimates.

    Model: ``y = mu_g + x'gamma(_g) + u_i + e``, with a subject random
    intercept ``u_i`` when some subject has several rows. Subjects without
    external rows add a constant and are left out.
    """
    theta_before = fit.theta.copy()
    id_pos = {sid: i for i, sid in enumerate(ds.ids)}
    unknown = sorted({s for s in outcome.ids if s not in id_pos})
    if unknown:
        raise DataError(f"external outcome ids not in the dataset: {unknown[:5]}")
    if not outcome.ids:
        raise DataError("no subjects with external data")
    prior, dens, _ = _log_class_weights(fit, ds, engine)
    logw = prior + dens
    logw = logw - logsumexp(logw, axis=1, keepdims=True)         # log posterior
    subj = np.array([id_pos[s] for s in outcome.ids])
    order = np.argsort(subj, kind="stable")
    subj = subj[order]
    y = outcome.values[order]
    covs = list(outcome.covariates)
    X = np.column_stack([outcome.covariates[c][order] for c in covs]) if covs else np.zeros((y.size, 0))
    uniq, starts = np.unique(subj, return_index=True)
    counts = np.diff(np.r_[starts, y.size])
    repeated = bool(np.any(counts > 1))
    G = fit.G
    nx = X.shape[1]
    names = [f"mean[class{g + 1}]" for g in range(G)]
    if class_specific_effects:
        names += [f"{c}[class{g + 1}]" for c in covs for g in range(G)]
    else:
        names += list(covs)
    names.append("sigma")
    if repeated:
        names.append("sd_subject")
    lw = logw[uniq]                                              # (n_sub, G)

    def unpack(psi):
        mu = psi[:G]
        k = G
        if class_specific_effects:
            gam = psi[k:k + nx * G].reshape(nx, G)
            k += nx * G
        else:
            gam = np.repeat(psi[k:k + nx, None], G, axis=1)
            k += nx
        sig = abs(psi[k])
        tau = abs(psi[k + 1]) if repeated else 0.0
        return mu, gam, sig, tau

    def class_loglik(psi):
        mu, gam, sig, tau = unpack(psi)
        r = y[:, None] - mu[None, :] - X @ gam                  # (n, G)
        s2 = sig * sig
        if s2 <= 0:
            return np.full((uniq.size, G), -np.inf)
        rr = np.add.reduceat(r * r, starts, axis=0)
        out = -0.5 * (counts[:, None] * np.log(2 * np.pi * s2) + rr / s2)
        if repeated:
            t2 = tau * tau
            sr = np.add.reduceat(r, starts, axis=0)
            denom = s2 + counts[:, None] * t2
            out = out - 0.5 * (np.log(denom / s2) - t2 * sr * sr / (s2 * denom))
        return out

    def objective(psi):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v = logsumexp(lw + class_loglik(psi), axis=1).sum()
        return float(v) if np.isfinite(v) else -np.inf

    # start: pooled least squares with posterior-weighted class means
    post = np.exp(lw)[np.searchsorted(uniq, subj)]
    D = np.column_stack([post, X]) if nx else post
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    resid_sd = float(np.std(y - D @ coef)) or 1.0
    psi0 = list(coef[:G])
    if class_specific_effects:
        psi0 += list(np.repeat(coef[G:], G))
    else:
        psi0 += list(coef[G:])
    psi0.append(resid_sd)
    if repeated:
        psi0.append(0.5 * resid_sd)
    settings = settings or OptimizerSettings(tolerance_function=1e-10, tolerance_parameters=1e-12,
                                             tolerance_derivatives=1e-12)
    res = marquardt_levenberg(objective, np.array(psi0), settings)
    psi = res.theta.copy()
    k = len(psi) - (2 if repeated else 1)
    psi[k:] = np.abs(psi[k:])
    _, H = numeric_derivatives(objective, psi, settings)
    V = _hessian_variance(H)
    if not np.array_equal(theta_before, fit.theta):
        raise RuntimeError("joint-model estimates were modified")
    notes = ["standard errors ignore the uncertainty of the joint-model estimates"]
    return ExternalFit(1, names, psi, V, res.value, res.status, int(uniq.size), fit.theta.copy(), notes)


def external_covariate_fit(fit: FitResult, ds: Dataset, covariates: dict[str, dict[str, float]],
                           names: list[str] | None = None, settings: OptimizerSettings | None = None,
                           engine=None) -> ExternalFit:
    """Multinomial-logit regression of class membership on external
    covariates, replacing the class-membership part of the fitted model.

    ``covariates`` maps subject id to ``{name: value}``; subjects without
    values are left out. The reference class (last) has zero coefficients.
    With delayed entry the entry-survival denominator uses the updated
    membership probabilities.
    """
    G = fit.G
    if G == 1:
        raise ValueError("no class structure to predict")
    theta_before = fit.theta.copy()
    notes = ["standard errors ignore the uncertainty of the joint-model estimates"]
    if fit.spec.class_membership:
        msg = "class-membership covariates of the fitted model are replaced by the external covariates"
        warnings.warn(msg)
        notes.append(msg)
    names = names or sorted({k for v in covariates.values() for k in v})
    ids = ds.ids
    keep = [i for i, sid in enumerate(ids) if sid in covariates
            and all(np.isfinite(covariates[sid].get(n, np.nan)) for n in names)]
    if not keep:
        raise DataError("no subjects with external covariates")
    keep = np.array(keep)
    _, dens, trunc = _log_class_weights(fit, ds, engine)
    dens = dens[keep]
    trunc = trunc[keep] if trunc is not None else None
    XC = np.column_stack([np.ones(keep.size)] + [np.array([covariates[ids[i]][n] for i in keep]) for n in names])
    nc = XC.shape[1]
    labels = ["intercept"] + list(names)
    pnames = [f"xi[class{g + 1}].{labels[c]}" for g in range(G - 1) for c in range(nc)]

    def objective(xi_flat):
        xi = np.vstack([xi_flat.reshape(G - 1, nc), np.zeros((1, nc))])
        z = XC @ xi.T
        lp = z - logsumexp(z, axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            v = logsumexp(lp + dens, axis=1)
            if trunc is not None:
                v = v - logsumexp(lp + trunc, axis=1)
        total = v.sum()
        return float(total) if np.isfinite(total) else -np.inf

    settings = settings or OptimizerSettings(tolerance_function=1e-10, tolerance_parameters=1e-12,
                                             tolerance_derivatives=1e-12)
    res = marquardt_levenberg(objective, np.zeros((G - 1) * nc), settings)
    _, H = numeric_derivatives(objective, res.theta, settings)
    V = _hessian_variance(H)
    if not np.array_equal(theta_before, fit.theta):
        raise RuntimeError("joint-model estimates were modified")
    return ExternalFit(2, pnames, res.theta, V, res.value, res.status, int(keep.size), fit.theta.copy(), notes)


__all__ = ["PosteriorClassification", "posterior_probs", "classify", "criteria_values", "information_criteria",
           "gof_longitudinal", "gof_survival", "ExternalFit", "ExternalOutcome", "external_outcome_fit",
           "external_covariate_fit", "marginal_marker_mean", "CONVERGED"]
