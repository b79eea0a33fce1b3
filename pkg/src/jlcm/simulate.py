"""Synthetic cohorts drawn from the joint latent class model.

A scenario file holds the model to fit, the generating truth and the design
of the simulated study::

    spec_version: 1
    name: three-class
    model: {...}                   # same schema as a model file
    truth:
      proportions: [0.4, 0.35, 0.25]
      dimensions:
        d1:
          beta: {"1": [0.0, 2.0, 4.0], time: [-0.5, 0.0, 0.5]}
          covariance: [[1.0, 0.1], [0.1, 0.2]]
      markers:
        y1: {sigma: 1.0}
        y2: {sigma: 0.8, intercept: 1.0, slope: 2.0}
      hazard:
        - {family: weibull, scale: [0.05, 0.1, 0.2], shape: [1.5, 1.5, 1.5]}
        - {family: piecewise, cuts: [0, 2, 5], rates: [0.02, 0.05, 0.1], logmult: [0.5, 0.2, 0.0]}
    study:
      N: 500
      visits: {interval: 1.0, jitter: 0.1, max_time: 15}
      censoring: {administrative: 12, uniform: [5, 15]}
      truncation: {max_entry: 3}
      covariates: {sex: {bernoulli: 0.5}, age: {normal: [0, 1]}}

Weibull truth per cause gives ``scale`` and ``shape`` per class, or shared
values with ``logmult`` per class. Piecewise-exponential truth gives the
interval ``rates`` (per class as a list of lists, or shared with
``logmult``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset, LongitudinalObservation, Subject, SurvivalRecord, eval_term
from .model import SPEC_VERSION, ModelSpec, SpecError
from .params import ModelParams, ParameterLayout


@dataclass(frozen=True)
class CauseTruth:
    family: str                      # weibull | piecewise
    scale: np.ndarray | None = None  # (G,)
    shape: np.ndarray | None = None  # (G,)
    cuts: np.ndarray | None = None   # (J,) starting at 0
    rates: np.ndarray | None = None  # (G, J)
    logmult: np.ndarray | None = None

    def cumhaz(self, t: float, g: int, mult: float = 1.0) -> float:
        if self.family == "weibull":
            return mult * (self.scale[g] * t) ** self.shape[g]
        edges = np.r_[self.cuts, np.inf]
        widths = np.clip(t - edges[:-1], 0, np.diff(edges))
        return mult * float(self.rates[g] @ widths)

    def inverse(self, e: float, g: int, mult: float = 1.0) -> float:
        """Time at which the cumulative hazard reaches ``e``."""
        e = e / mult
        if self.family == "weibull":
            return e ** (1.0 / self.shape[g]) / self.scale[g]
        acc = 0.0
        rates = self.rates[g]
        for j, start in enumerate(self.cuts):
            end = self.cuts[j + 1] if j + 1 < len(self.cuts) else np.inf
            mass = rates[j] * (end - start)
            if acc + mass >= e:
                return start + (e - acc) / rates[j] if rates[j] > 0 else np.inf
            acc += mass
        return np.inf


def _parse_cause(raw: dict, G: int) -> CauseTruth:
    fam = raw.get("family", "weibull")
    logmult = raw.get("logmult")
    lm = np.zeros(G) if logmult is None else np.asarray(logmult, dtype=float)
    if lm.shape != (G,):
        raise SpecError("truth logmult needs one value per class")
    if fam == "weibull":
        scale = np.broadcast_to(np.asarray(raw["scale"], dtype=float), (G,)).copy()
        shape = np.broadcast_to(np.asarray(raw["shape"], dtype=float), (G,)).copy()
        if np.any(scale <= 0) or np.any(shape <= 0):
            raise SpecError("Weibull truth needs positive scale and shape")
        # fold multipliers into the scale so cumhaz is self-contained
        scale = scale * np.exp(lm / shape)
        return CauseTruth("weibull", scale=scale, shape=shape, logmult=lm)
    if fam == "piecewise":
        cuts = np.asarray(raw["cuts"], dtype=float)
        if cuts[0] != 0 or np.any(np.diff(cuts) <= 0):
            raise SpecError("piecewise cuts must start at 0 and increase")
        rates = np.asarray(raw["rates"], dtype=float)
        rates = np.broadcast_to(rates, (G, cuts.size)).copy() * np.exp(lm)[:, None]
        if np.any(rates < 0):
            raise SpecError("piecewise rates must be nonnegative")
        return CauseTruth("piecewise", cuts=cuts, rates=rates, logmult=lm)
    raise SpecError(f"unknown truth hazard family {fam!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    model: ModelSpec
    truth: dict
    N: int = 500
    visits: dict = field(default_factory=lambda: {"interval": 1.0, "jitter": 0.1, "max_time": 20.0})
    censoring: dict = field(default_factory=dict)
    truncation: dict | None = None
    covariates: dict = field(default_factory=dict)
    name: str = "scenario"

    def __post_init__(self):
        G = self.model.G
        if self.N < 1:
            raise SpecError("scenario N must be >= 1")
        if "xi" not in self.truth:
            p = np.asarray(self.truth.get("proportions", np.full(G, 1.0 / G)), dtype=float)
            if p.shape != (G,) or np.any(p <= 0) or abs(p.sum() - 1) > 1e-8:
                raise SpecError("truth proportions must be G positive values summing to 1")
        causes = [_parse_cause(c, G) for c in self.truth.get("hazard", [])]
        if len(causes) != self.model.L:
            raise SpecError(f"truth gives {len(causes)} hazard causes, model has {self.model.L}")
        object.__setattr__(self, "_causes", causes)
        for d in self.model.dimensions:
            if d.id not in self.truth.get("dimensions", {}):
                raise SpecError(f"truth missing dimension {d.id}")
        for m in self.model.markers:
            if m.link == "isplines":
                raise SpecError("simulation supports identity and linear links only")

    @property
    def causes(self) -> list[CauseTruth]:
        return self._causes

    @property
    def G(self) -> int:
        return self.model.G

    # -- truth in model terms ---------------------------------------------
    def xi(self) -> np.ndarray:
        G = self.G
        nC = 1 + len(self.model.class_membership)
        if "xi" in self.truth:
            xi = np.asarray(self.truth["xi"], dtype=float).reshape(G, nC)
            return xi - xi[-1]
        p = np.asarray(self.truth["proportions"], dtype=float)
        xi = np.zeros((G, nC))
        xi[:, 0] = np.log(p) - np.log(p[-1])
        return xi

    def beta(self, dim: str) -> np.ndarray:
        d = next(x for x in self.model.dimensions if x.id == dim)
        raw = self.truth["dimensions"][dim].get("beta", {})
        terms = list(d.mean_terms)
        out = np.zeros((len(terms), self.G))
        for i, t in enumerate(terms):
            val = raw.get(t, raw.get(str(t), 0.0))
            out[i] = np.broadcast_to(np.asarray(val, dtype=float), (self.G,))
        return out

    def covariances(self, dim: str) -> np.ndarray:
        d = next(x for x in self.model.dimensions if x.id == dim)
        q = len(d.random)
        raw = self.truth["dimensions"][dim].get("covariance", np.zeros((q, q)))
        B = np.asarray(raw, dtype=float)
        B = np.broadcast_to(B, (self.G, q, q)).copy() if B.ndim == 2 else B
        if B.shape != (self.G, q, q):
            raise SpecError(f"truth covariance for {dim} must be {q}x{q} (or one per class)")
        return B

    def marker_truth(self, marker_id: str) -> dict:
        return self.truth.get("markers", {}).get(marker_id, {})

    def delta(self) -> np.ndarray:
        hz = self.model.hazard
        raw = self.truth.get("delta", {})
        out = np.zeros((hz.causes, len(hz.covariates), self.G))
        for c, cov in enumerate(hz.covariates):
            vals = raw.get(cov.name, 0.0)
            arr = np.asarray(vals, dtype=float)
            if arr.ndim == 0:
                arr = np.full(hz.causes, float(arr))
            for l in range(hz.causes):
                out[l, c] = np.broadcast_to(arr[l], (self.G,))
        return out

    def true_params(self, layout: ParameterLayout) -> tuple[ModelParams, np.ndarray]:
        """Truth as model parameters plus a mask of parameters that have a
        true value (hazard parameters lack one when the truth family differs
        from the fitted family)."""
        spec = self.model
        G = self.G
        chol = {}
        for d in spec.dimensions:
            chol[d.id] = np.stack([_upper_root(B) for B in self.covariances(d.id)])
        K = len(spec.markers)
        sigma = np.ones(K)
        link_int = np.zeros(K)
        link_coef = []
        for k, m in enumerate(spec.markers):
            mt = self.marker_truth(m.id)
            sigma[k] = float(mt.get("sigma", 1.0))
            link_int[k] = float(mt.get("intercept", 0.0))
            link_coef.append(np.array([float(mt.get("slope", 1.0))]) if m.link == "linear" else np.zeros(0))
        hz = spec.hazard
        nb = 2 if hz.family == "weibull" else layout.bases.hazard.n_basis
        bases = []
        logmult = np.zeros((hz.causes, G))
        has_hazard = True
        for l, c in enumerate(self.causes):
            hb = np.ones((G, nb))
            if c.family == "weibull" and hz.family == "weibull":
                if hz.baseline == "proportional":
                    hb[:, 0] = c.scale[-1]
                    hb[:, 1] = c.shape[-1]
                    logmult[l] = c.logmult - c.logmult[-1]
                else:
                    hb[:, 0] = c.scale
                    hb[:, 1] = c.shape
            else:
                has_hazard = False
            bases.append(hb)
        P = ModelParams(xi=self.xi(), beta={d.id: self.beta(d.id) for d in spec.dimensions}, chol=chol,
                        sigma=sigma, link_intercept=link_int, link_coef=link_coef, hazard_base=bases,
                        hazard_logmult=logmult, delta=self.delta())
        mask = np.ones(layout.p, dtype=bool)
        if not has_hazard:
            mask[layout.block("zeta[")] = False
        return P, mask

    # -- io ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return {"spec_version": SPEC_VERSION, "name": self.name, "model": self.model.to_dict(),
                "truth": self.truth,
                "study": {"N": self.N, "visits": self.visits, "censoring": self.censoring,
                          "truncation": self.truncation, "covariates": self.covariates}}

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        if data.get("spec_version") != SPEC_VERSION:
            raise SpecError(f"unsupported spec_version {data.get('spec_version')!r}")
        try:
            model_raw = dict(data["model"])
            model_raw.setdefault("spec_version", SPEC_VERSION)
            model = ModelSpec.from_dict(model_raw)
            study = data.get("study", {})
            kwargs = {k: study[k] for k in ("visits", "censoring", "truncation", "covariates") if k in study}
            return cls(model=model, truth=data["truth"], N=int(study.get("N", 500)),
                       name=str(data.get("name", "scenario")), **kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"malformed scenario: {exc}") from exc


def load_scenario(path) -> ScenarioSpec:
    with Path(path).open(encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise SpecError(f"{path}: expected a mapping at top level")
    return ScenarioSpec.from_dict(data)


def _upper_root(B: np.ndarray) -> np.ndarray:
    """Upper-triangular ``U`` with ``U'U = B`` and nonnegative diagonal, also
    for singular ``B``."""
    w, Q = np.linalg.eigh(0.5 * (B + B.T))
    A = np.sqrt(np.clip(w, 0, None))[:, None] * Q.T
    R = np.linalg.qr(A, mode="r")
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return R * s[:, None]


def _draw_covariates(spec: dict, rng: np.random.Generator) -> dict[str, float]:
    out = {}
    for name, law in spec.items():
        (kind, args), = law.items()
        if kind == "bernoulli":
            out[name] = float(rng.random() < float(args))
        elif kind == "normal":
            out[name] = float(rng.normal(args[0], args[1]))
        elif kind == "uniform":
            out[name] = float(rng.uniform(args[0], args[1]))
        else:
            raise SpecError(f"unknown covariate law {kind!r}")
    return out


def draw_event_time(g: int, causes: list[CauseTruth], u, multipliers=None,
                    censor_time: float = np.inf) -> tuple[float, int]:
    """Competing-cause event time by inverse transform.

    ``u`` holds one uniform per cause; each cause's latent time solves
    ``A_l(t) = -log u_l`` and the earliest wins. A censoring time earlier
    than every latent time gives cause 0.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    mult = np.ones(len(causes)) if multipliers is None else np.asarray(multipliers, dtype=float)
    times = np.array([c.inverse(-np.log(u[l]), g, mult[l]) for l, c in enumerate(causes)])
    l = int(np.argmin(times))
    if times[l] > censor_time:
        return float(censor_time), 0
    return float(times[l]), l + 1


def _class_probs(xi: np.ndarray, x: np.ndarray) -> np.ndarray:
    z = xi @ np.r_[1.0, x]
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def simulate_sample(sc: ScenarioSpec, seed) -> tuple[Dataset, np.ndarray]:
    """Draw one cohort; returns the dataset and the true class (0-based) of each subject."""
    rng = np.random.default_rng(seed)
    spec = sc.model
    G = sc.G
    xi = sc.xi()
    betas = {d.id: sc.beta(d.id) for d in spec.dimensions}
    roots = {}
    for d in spec.dimensions:
        rs = []
        for B in sc.covariances(d.id):
            w, Q = np.linalg.eigh(0.5 * (B + B.T))
            rs.append(Q * np.sqrt(np.clip(w, 0, None)))
        roots[d.id] = rs
    delta = sc.delta()
    hz_covs = [c.name for c in spec.hazard.covariates]
    vis = {"interval": 1.0, "jitter": 0.1, "max_time": 20.0, **(sc.visits or {})}
    cens = sc.censoring or {}
    trunc = sc.truncation
    width = len(str(sc.N))
    subjects = []
    classes = np.empty(sc.N, dtype=int)
    for i in range(sc.N):
        sid = f"s{i + 1:0{width}d}"
        while True:
            cov = _draw_covariates(sc.covariates, rng)
            x = np.array([cov[c] for c in spec.class_membership], dtype=float)
            g = int(rng.choice(G, p=_class_probs(xi, x)))
            xt = np.array([cov[c] for c in hz_covs], dtype=float)
            mult = np.exp(delta[:, :, g] @ xt) if xt.size else np.ones(spec.L)
            C = float(cens.get("administrative", np.inf))
            if "uniform" in cens:
                a, b = cens["uniform"]
                C = min(C, float(rng.uniform(a, b)))
            T, cause = draw_event_time(g, sc.causes, 1.0 - rng.random(spec.L), mult, C)
            entry = float(rng.uniform(0, trunc["max_entry"])) if trunc else 0.0
            if T > entry:
                break
        b = {d.id: roots[d.id][g] @ rng.standard_normal(len(d.random)) for d in spec.dimensions}
        n_vis = int(np.floor((min(T, vis["max_time"]) - entry) / vis["interval"])) + 2
        steps = np.arange(n_vis) * vis["interval"]
        jit = rng.uniform(-vis["jitter"], vis["jitter"], n_vis)
        jit[0] = 0.0
        times = entry + steps + jit
        times = times[(times < T) & (times <= vis["max_time"])]
        obs = []
        for d in spec.dimensions:
            X = np.column_stack([eval_term(t, times, cov) for t in d.mean_terms])
            Z = np.column_stack([eval_term(t, times, cov) for t in d.random])
            lam = X @ betas[d.id][:, g] + Z @ b[d.id]
            for m in spec.markers_of(d.id):
                mt = sc.marker_truth(m.id)
                ystar = lam + float(mt.get("sigma", 1.0)) * rng.standard_normal(times.size)
                if m.link == "linear":
                    y = (ystar - float(mt.get("intercept", 0.0))) / float(mt.get("slope", 1.0))
                else:
                    y = ystar
                obs.extend(LongitudinalObservation(sid, m.id, float(t), float(v)) for t, v in zip(times, y))
        subjects.append(Subject(sid, tuple(obs), SurvivalRecord(sid, entry, T, cause), cov))
        classes[i] = g
    return Dataset(tuple(subjects)), classes
