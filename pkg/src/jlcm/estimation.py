"""Maximum-likelihood fitting: initial values, single fits, multi-start
gridsearch and the versioned fit file."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Bases, DataError, Dataset, resolve_bases, validate_dataset
from .likelihood import LikelihoodEngine
from .model import ModelSpec
from .optim import (CONVERGED, DEGENERATE, MAX_ITER, NonFiniteObjective, OptimizerSettings,
                    marquardt_levenberg)
from .params import ModelParams, ParameterLayout
from .survival import DegenerateLikelihood

log = logging.getLogger(__name__)

FIT_FORMAT = "jlcm-fit"
FIT_VERSION = 1
EMPTY_CLASS_PATIENCE = 5     # iterations with an empty class before a start is abandoned
_CLASS_TAG = re.compile(r"\[class\d+\]")


class FitFileError(ValueError):
    pass


class GridsearchError(RuntimeError):
    def __init__(self, message, starts):
        super().__init__(message)
        self.starts = starts


@dataclass
class FitResult:
    spec: ModelSpec
    bases: Bases
    theta: np.ndarray
    loglik: float
    status: str
    iterations: int
    N: int
    criteria: dict = field(default_factory=dict)
    variance: np.ndarray | None = None
    trace: list[float] = field(default_factory=list)
    degenerate_class: bool = False
    starts: list[dict] = field(default_factory=list)
    seed: int | None = None

    @property
    def G(self) -> int:
        return self.spec.G

    @property
    def p(self) -> int:
        return int(self.theta.size)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def layout(self) -> ParameterLayout:
        if not hasattr(self, "_layout"):
            self._layout = ParameterLayout(self.spec, self.bases)
        return self._layout

    @property
    def names(self) -> list[str]:
        return self.layout.names

    @property
    def params(self) -> ModelParams:
        return self.layout.unpack(self.theta)

    def standard_errors(self) -> np.ndarray:
        if self.variance is None:
            return np.full(self.p, np.nan)
        return np.sqrt(np.clip(np.diag(self.variance), 0, None))

    def criteria_met(self, settings: OptimizerSettings | None = None) -> dict[str, bool]:
        s = settings or OptimizerSettings()
        c = self.criteria
        return {"function": c.get("function", np.inf) < s.tolerance_function,
                "parameters": c.get("parameters", np.inf) < s.tolerance_parameters,
                "derivatives": c.get("derivatives", np.inf) < s.tolerance_derivatives}

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        se = self.standard_errors()
        return {
            "format": FIT_FORMAT,
            "version": FIT_VERSION,
            "model": self.spec.to_dict(),
            "bases": self.bases.to_dict(),
            "N": self.N,
            "G": self.G,
            "p": self.p,
            "loglik": self.loglik,
            "convergence": {"status": self.status, "iterations": self.iterations,
                            "criteria": {k: _num(v) for k, v in self.criteria.items()},
                            "criteria_met": self.criteria_met(),
                            "degenerate_class": self.degenerate_class},
            "seed": self.seed,
            "estimates": [{"name": n, "value": float(v), "se": _num(s)}
                          for n, v, s in zip(self.names, self.theta, se)],
            "derived": [{"name": n, "value": v} for n, v in self.layout.natural_table(self.theta)],
            "variance": None if self.variance is None else self.variance.tolist(),
            "trace": [float(v) for v in self.trace],
            "starts": self.starts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        if d.get("format") != FIT_FORMAT:
            raise FitFileError("not a fit file")
        if d.get("version") != FIT_VERSION:
            raise FitFileError(f"fit file version {d.get('version')!r} is not supported (expected {FIT_VERSION})")
        spec = ModelSpec.from_dict(d["model"])
        bases = Bases.from_dict(d["bases"])
        names = [e["name"] for e in d["estimates"]]
        layout = ParameterLayout(spec, bases)
        if names != layout.names:
            raise FitFileError("fit file parameter names do not match the model layout")
        conv = d["convergence"]
        fit = cls(spec=spec, bases=bases, theta=np.array([e["value"] for e in d["estimates"]], dtype=float),
                  loglik=float(d["loglik"]), status=conv["status"], iterations=int(conv["iterations"]),
                  N=int(d["N"]), criteria={k: (np.inf if v is None else float(v)) for k, v in conv["criteria"].items()},
                  variance=None if d.get("variance") is None else np.array(d["variance"], dtype=float),
                  trace=list(d.get("trace", [])), degenerate_class=bool(conv.get("degenerate_class", False)),
                  starts=list(d.get("starts", [])), seed=d.get("seed"))
        fit._layout = layout
        return fit

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FitFileError(f"fit file is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def load_fit(path) -> FitResult:
    return FitResult.from_json(Path(path).read_text(encoding="utf-8"))


# -- initial values -----------------------------------------------------------
def default_init(ds: Dataset, spec: ModelSpec, bases: Bases) -> np.ndarray:
    """Data-driven starting point: marker means and spreads, constant hazards."""
    layout = ParameterLayout(spec, bases)
    P = layout.unpack(np.zeros(layout.p))
    P = ModelParams(xi=np.zeros_like(P.xi), beta={k: np.zeros_like(v) for k, v in P.beta.items()},
                    chol={k: np.zeros_like(v) for k, v in P.chol.items()}, sigma=np.ones_like(P.sigma),
                    link_intercept=np.zeros_like(P.link_intercept),
                    link_coef=[np.zeros_like(c) for c in P.link_coef],
                    hazard_base=[np.ones_like(b) for b in P.hazard_base],
                    hazard_logmult=np.zeros_like(P.hazard_logmult), delta=np.zeros_like(P.delta))
    for d in spec.dimensions:
        markers = spec.markers_of(d.id)
        ident = [m for m in markers if m.link == "identity"]
        terms = layout.fixed_terms[d.id]
        q = len(d.random)
        if ident:
            vals = ds.marker_values(ident[0].id)
            mu, sd = float(vals.mean()), float(vals.std()) or 1.0
            if "1" in terms:
                P.beta[d.id][terms.index("1")] = mu
            scale_re, scale_err = 0.6 * sd, 0.6 * sd
        else:
            scale_re, scale_err = 0.6, 1.0
        U = np.zeros((q, q))
        U[0, 0] = scale_re
        for a in range(1, q):
            U[a, a] = 0.1 * scale_re
        P.chol[d.id][:] = U
        for m in markers:
            k = spec.markers.index(m)
            vals = ds.marker_values(m.id)
            mu, sd = float(vals.mean()), float(vals.std()) or 1.0
            if m.link == "identity":
                P.sigma[k] = scale_err if m is ident[0] else 0.6 * sd
            elif m.link == "linear":
                P.sigma[k] = 1.0 if not ident else 0.6 * sd
                P.link_coef[k][:] = 1.0 / sd
                P.link_intercept[k] = -mu / sd
            else:
                b = bases.links[m.id]
                P.sigma[k] = 1.0 if not ident else 0.6 * sd
                P.link_coef[k][:] = (b.high - b.low) / sd / b.n_basis
                P.link_intercept[k] = -(mu - b.low) / sd
            if ident and m.link != "identity":
                # map onto the identity marker's scale
                ref = ds.marker_values(ident[0].id)
                r_mu, r_sd = float(ref.mean()), float(ref.std()) or 1.0
                P.link_coef[k][:] *= r_sd
                P.link_intercept[k] = P.link_intercept[k] * r_sd + r_mu
    entry, time, cause = ds.survival_arrays()
    exposure = float(np.sum(time - entry))
    t_max = float(time.max())
    for l in range(spec.L):
        rate = max(float(np.sum(cause == l + 1)), 0.5) / exposure
        if spec.hazard.family == "weibull":
            P.hazard_base[l][:, 0] = rate
            P.hazard_base[l][:, 1] = 1.0
        else:
            P.hazard_base[l][:] = rate * t_max / bases.hazard.n_basis
    return layout.pack(P)


def replicate_init(fit1: FitResult, spec: ModelSpec, rng: np.random.Generator | None,
                   fallback_scale: float = 1.0) -> np.ndarray:
    """Spread a one-class fit over ``spec.G`` classes; class-specific
    parameters get Gaussian noise scaled by their one-class standard error."""
    layout = ParameterLayout(spec, fit1.bases)
    base_names = {_CLASS_TAG.sub("", n): j for j, n in enumerate(fit1.names)}
    se1 = fit1.standard_errors()
    theta = np.zeros(layout.p)
    scale = np.full(layout.p, fallback_scale)
    for j, name in enumerate(layout.names):
        j1 = base_names.get(_CLASS_TAG.sub("", name))
        if j1 is not None:
            theta[j] = fit1.theta[j1]
            if np.isfinite(se1[j1]) and se1[j1] > 0:
                scale[j] = se1[j1]
    if rng is not None:
        mask = layout.class_specific_mask()
        theta[mask] += scale[mask] * rng.standard_normal(int(mask.sum()))
    return theta


# -- fitting --------------------------------------------------------------------
def _check(ds: Dataset, spec: ModelSpec, bases: Bases):
    report = validate_dataset(ds, spec, bases)
    if not report.ok:
        raise DataError("; ".join(report.errors))


def fit_single(ds: Dataset, spec: ModelSpec, theta_init, bases: Bases | None = None,
               settings: OptimizerSettings | None = None, engine: LikelihoodEngine | None = None,
               variance: bool = True) -> FitResult:
    """One Marquardt-Levenberg run from ``theta_init``."""
    settings = settings or OptimizerSettings()
    bases = bases if bases is not None else resolve_bases(ds, spec)
    engine = engine or LikelihoodEngine(ds, spec, bases)
    small = [False]
    empty_run = [0]
    G = spec.G

    def watch(it, theta, value, crit):
        # a class holding less than one subject's posterior mass is flagged;
        # if it stays that way the start has collapsed onto fewer classes
        if G > 1:
            try:
                mass = engine.posterior(theta).sum(axis=0)
            except DegenerateLikelihood:
                return False
            if mass.min() < 1.0:
                small[0] = True
                empty_run[0] += 1
            else:
                empty_run[0] = 0
        return empty_run[0] >= EMPTY_CLASS_PATIENCE

    try:
        res = marquardt_levenberg(engine, theta_init, settings, derivatives=engine.derivatives, callback=watch)
    except NonFiniteObjective as exc:
        raise DegenerateLikelihood(f"initial values give a non-finite likelihood: {exc}") from exc
    V = None
    status = res.status
    if status == CONVERGED and variance:
        V = variance_matrix(engine, res.theta, settings)
        if V is None:
            log.warning("negative Hessian not invertible at the optimum")
    watch(0, res.theta, res.value, None)
    return FitResult(spec=spec, bases=bases, theta=res.theta, loglik=float(res.value), status=status,
                     iterations=res.iterations, N=ds.N, criteria=dict(res.criteria), variance=V,
                     trace=list(res.trace), degenerate_class=small[0])


def variance_matrix(engine: LikelihoodEngine, theta: np.ndarray, settings: OptimizerSettings | None = None):
    """Inverse of the negative finite-difference Hessian, or ``None`` when singular."""
    try:
        _, H = engine.derivatives(theta, settings)
        c = np.linalg.cholesky(-H)
    except (np.linalg.LinAlgError, NonFiniteObjective):
        return None
    ci = np.linalg.inv(c)
    V = ci.T @ ci
    return 0.5 * (V + V.T)


@dataclass(frozen=True)
class _StartJob:
    ds: Dataset
    spec: ModelSpec
    bases: Bases
    settings: OptimizerSettings


def _run_start(job: _StartJob, theta0: np.ndarray) -> FitResult | str:
    try:
        return fit_single(job.ds, job.spec, theta0, job.bases, job.settings, variance=False)
    except DegenerateLikelihood as exc:
        return str(exc)


def start_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Per-start streams: children of ``SeedSequence(seed)``."""
    return np.random.SeedSequence(seed).spawn(n)


def gridsearch(fit_once, n_starts: int, rng_seed: int, init_generator, jobs: int = 1):
    """Run ``fit_once(init_generator(rng_k))`` for ``n_starts`` independent
    streams and keep the converged start with the largest log-likelihood.

    Returns ``(best, log)`` where ``log`` has one entry per start.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    inits = [init_generator(np.random.default_rng(s)) for s in start_seeds(rng_seed, n_starts)]
    if jobs > 1 and n_starts > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(fit_once, inits))
    else:
        results = [fit_once(t) for t in inits]
    entries = []
    best = None
    for k, r in enumerate(results):
        if isinstance(r, str):
            entries.append({"start": k, "status": DEGENERATE, "loglik": None, "iterations": 0, "message": r})
            continue
        entries.append({"start": k, "status": r.status, "loglik": r.loglik, "iterations": r.iterations,
                        "monotone": bool(np.all(np.diff(r.trace) >= 0))})
        if r.status == CONVERGED and (best is None or r.loglik > best.loglik):
            best = r
    if best is None:
        raise GridsearchError(f"none of the {n_starts} starts converged", entries)
    return best, entries


def fit_model(ds: Dataset, spec: ModelSpec, G: int | None = None, settings: OptimizerSettings | None = None,
              n_starts: int = 100, seed: int = 0, jobs: int = 1, bases: Bases | None = None,
              fit1: FitResult | None = None) -> FitResult:
    """Full pipeline: one-class fit, replicated and perturbed starts, gridsearch,
    variance at the selected optimum."""
    settings = settings or OptimizerSettings()
    spec = spec if G is None else spec.with_classes(G)
    bases = bases if bases is not None else resolve_bases(ds, spec)
    _check(ds, spec, bases)
    if fit1 is None:
        spec1 = spec.with_classes(1)
        fit1 = fit_single(ds, spec1, default_init(ds, spec1, bases), bases, settings)
    if spec.G == 1:
        fit1.seed = seed
        return fit1
    job = _StartJob(ds, spec, bases, settings)
    fit_once = _Bound(job)
    best, entries = gridsearch(fit_once, n_starts, seed, lambda rng: replicate_init(fit1, spec, rng), jobs)
    engine = LikelihoodEngine(ds, spec, bases)
    best.variance = variance_matrix(engine, best.theta, settings)
    best.starts = entries
    best.seed = seed
    return best


class _Bound:
    """Picklable ``theta0 -> fit`` closure for worker processes."""

    def __init__(self, job: _StartJob):
        self.job = job

    def __call__(self, theta0):
        return _run_start(self.job, theta0)


__all__ = ["FitResult", "FitFileError", "GridsearchError", "default_init", "replicate_init", "fit_single",
           "fit_model", "gridsearch", "variance_matrix", "load_fit", "start_seeds", "MAX_ITER"]
