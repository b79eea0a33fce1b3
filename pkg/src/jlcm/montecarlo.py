"""Monte Carlo evaluation of the estimation pipeline on simulated cohorts.

Each replicate draws a cohort, runs the full fit (one-class fit, perturbed
starts, gridsearch), aligns the class labels with the truth and stores a
small JSON record. Records are cached per scenario and settings so an
interrupted study resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError
from .estimation import GridsearchError, fit_model
from .optim import OptimizerSettings
from .params import ParameterLayout, transform_covariance
from .posterior import criteria_values, posterior_probs
from .simulate import ScenarioSpec, simulate_sample
from .survival import DegenerateLikelihood

log = logging.getLogger(__name__)

RECORD_VERSION = 1


class MonteCarloError(RuntimeError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class MonteCarloSettings:
    replicates: int = 100
    n_starts: int = 30
    seed: int = 0
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        if self.replicates < 1 or self.n_starts < 1:
            raise ValueError("replicates and n_starts must be positive")


def study_key(sc: ScenarioSpec, settings: MonteCarloSettings) -> str:
    """Hash identifying a scenario plus settings; keys the replicate cache.
    The number of replicates is left out so a study can be extended."""
    payload = {"record": RECORD_VERSION, "scenario": sc.to_dict(), "n_starts": settings.n_starts,
               "seed": settings.seed, "optimizer": asdict(settings.optimizer)}
    text = json.dumps(payload, sort_keys=True, default=float)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def replicate_streams(seed: int, r: int) -> tuple[np.random.SeedSequence, int]:
    """Data stream and gridsearch seed of replicate ``r`` (0-based)."""
    data_ss, fit_ss = np.random.SeedSequence([seed, r]).spawn(2)
    return data_ss, int(fit_ss.generate_state(1)[0])


def align_classes(layout: ParameterLayout, theta: np.ndarray, truth: np.ndarray,
                  mask: np.ndarray | None = None) -> tuple[int, ...]:
    """Permutation ``perm`` (new class g is old class ``perm[g]``) that brings
    the class-specific estimates closest to the truth in squared distance."""
    sel = layout.class_specific_mask()
    if mask is not None:
        sel &= mask
    t = layout.canonical(truth)[sel]
    best, best_d = None, np.inf
    for perm in itertools.permutations(range(layout.G)):
        est = layout.canonical(layout.permute_classes(theta, perm))[sel]
        d = float(np.sum((est - t) ** 2))
        if d < best_d:
            best, best_d = perm, d
    return tuple(int(p) for p in best)


def _proportions(layout):
    return lambda th: layout.unpack(th).class_proportions()


def run_replicate(sc: ScenarioSpec, r: int, settings: MonteCarloSettings) -> dict:
    data_ss, fit_seed = replicate_streams(settings.seed, r)
    ds, classes = simulate_sample(sc, data_ss)
    _, T, cause = ds.survival_arrays()
    rec = {"version": RECORD_VERSION, "replicate": r, "event_rate": float(np.mean(cause > 0))}
    try:
        fit = fit_model(ds, sc.model, settings=settings.optimizer, n_starts=settings.n_starts, seed=fit_seed)
    except (GridsearchError, DegenerateLikelihood, DataError) as exc:
        rec.update(status="failed", message=str(exc), converged=False)
        starts = getattr(exc, "starts", [])
        rec["monotone"] = all(e.get("monotone", True) for e in starts)
        return rec
    layout = fit.layout
    P, mask = sc.true_params(layout)
    truth = layout.canonical(layout.pack(P))
    perm = align_classes(layout, fit.theta, truth, mask)
    perm_fn = lambda th: layout.canonical(layout.permute_classes(th, perm))
    theta = perm_fn(fit.theta)
    pc = posterior_probs(fit, ds)
    inverse = np.argsort(perm)
    assigned = inverse[pc.assigned]
    crit = criteria_values(fit.loglik, fit.p, fit.N, pc.probs)
    rec.update(status=fit.status, converged=fit.converged, loglik=fit.loglik, iterations=fit.iterations,
               permutation=list(perm), theta=theta.tolist(), accuracy=float(np.mean(assigned == classes)),
               entropy=crit["entropy"], degenerate_class=fit.degenerate_class,
               n_converged_starts=sum(e["status"] == "converged" for e in fit.starts),
               monotone=all(e.get("monotone", True) for e in fit.starts)
               and bool(np.all(np.diff(fit.trace) >= 0)),
               proportions=_proportions(layout)(theta).tolist())
    if fit.variance is not None:
        V = transform_covariance(perm_fn, fit.theta, fit.variance)
        rec["se"] = np.sqrt(np.clip(np.diag(V), 0, None)).tolist()
        Vp = transform_covariance(_proportions(layout), theta, V)
        rec["proportion_se"] = np.sqrt(np.clip(np.diag(Vp), 0, None)).tolist()
    return rec


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class MonteCarloReport:
    scenario: ScenarioSpec
    settings: MonteCarloSettings
    names: list[str]
    truth: np.ndarray
    mask: np.ndarray
    records: list[dict]
    bases: object = None

    @property
    def usable(self) -> list[dict]:
        return [r for r in self.records if r.get("converged") and "se" in r]

    def parameter_table(self) -> list[dict]:
        """One row per parameter with a true value, plus the class proportions."""
        recs = self.usable
        rows = []
        if not recs:
            return rows
        est = np.array([r["theta"] for r in recs])
        se = np.array([r["se"] for r in recs])
        layout = ParameterLayout(self.scenario.model, self.bases)
        groups = []
        for j, n in enumerate(self.names):
            if self.mask[j]:
                groups.append((n, "trajectory" if n.startswith("beta[") else "other",
                               self.truth[j], est[:, j], se[:, j]))
        if not self.scenario.model.class_membership:
            tp = layout.unpack(self.truth).class_proportions()
            pe = np.array([r["proportions"] for r in recs])
            ps = np.array([r["proportion_se"] for r in recs])
            for g in range(self.scenario.G):
                groups.append((f"proportion[class{g + 1}]", "proportion", tp[g], pe[:, g], ps[:, g]))
        for name, kind, t, e, s in groups:
            bias = float(np.mean(e) - t)
            cover = float(np.mean(np.abs(e - t) <= 1.959963984540054 * s))
            rows.append({"name": name, "kind": kind, "truth": float(t), "mean": float(np.mean(e)),
                         "bias": bias, "rel_bias": bias / abs(t) if t != 0 else float("nan"),
                         "emp_sd": float(np.std(e, ddof=1)) if e.size > 1 else float("nan"),
                         "mean_se": float(np.mean(s)), "coverage": cover, "n": int(e.size)})
        return rows

    def summary(self) -> dict:
        recs = self.records
        use = self.usable
        return {"scenario": self.scenario.name, "replicates": len(recs),
                "converged": sum(bool(r.get("converged")) for r in recs),
                "convergence_rate": float(np.mean([bool(r.get("converged")) for r in recs])) if recs else 0.0,
                "usable": len(use),
                "mean_accuracy": float(np.mean([r["accuracy"] for r in use])) if use else float("nan"),
                "min_accuracy": float(np.min([r["accuracy"] for r in use])) if use else float("nan"),
                "mean_entropy": float(np.mean([r["entropy"] for r in use])) if use else float("nan"),
                "mean_event_rate": float(np.mean([r["event_rate"] for r in recs])) if recs else float("nan"),
                "all_monotone": all(r.get("monotone", True) for r in recs)}

    def table_csv(self) -> str:
        buf = io.StringIO()
        cols = ["name", "kind", "truth", "mean", "bias", "rel_bias", "emp_sd", "mean_se", "coverage", "n"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.parameter_table():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _truth_layout(sc: ScenarioSpec, settings: MonteCarloSettings):
    """Layout and truth vector; bases come from a pilot replicate because
    spline bases depend on the data."""
    from .data import resolve_bases
    ds, _ = simulate_sample(sc, replicate_streams(settings.seed, 0)[0])
    bases = resolve_bases(ds, sc.model)
    layout = ParameterLayout(sc.model, bases)
    P, mask = sc.true_params(layout)
    return layout, layout.canonical(layout.pack(P)), mask


def _replicate_job(args):
    sc, r, settings, path = args
    rec = run_replicate(sc, r, settings)
    if path is not None:
        _atomic_write(Path(path), json.dumps(rec))
    return rec


def run_monte_carlo(sc: ScenarioSpec, settings: MonteCarloSettings | None = None, jobs: int = 1,
                    cache_dir=None, progress=None) -> MonteCarloReport:
    """Run (or resume) the study; ``progress(r, record)`` is called after each new replicate."""
    settings = settings or MonteCarloSettings()
    layout, truth, mask = _truth_layout(sc, settings)
    folder = None
    if cache_dir is not None:
        folder = Path(cache_dir) / study_key(sc, settings)
        folder.mkdir(parents=True, exist_ok=True)
    records: dict[int, dict] = {}
    todo = []
    for r in range(settings.replicates):
        path = folder / f"rep_{r:04d}.json" if folder is not None else None
        if path is not None and path.exists():
            try:
                rec = json.loads(path.read_text())
                if rec.get("version") == RECORD_VERSION:
                    records[r] = rec
                    continue
            except json.JSONDecodeError:
                log.warning("ignoring unreadable checkpoint %s", path)
        todo.append((sc, r, settings, str(path) if path is not None else None))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for job, rec in zip(todo, pool.map(_replicate_job, todo)):
                records[job[1]] = rec
                if progress:
                    progress(job[1], rec)
    else:
        for job in todo:
            rec = _replicate_job(job)
            records[job[1]] = rec
            if progress:
                progress(job[1], rec)
    ordered = [records[r] for r in sorted(records)]
    if not any(r.get("converged") for r in ordered):
        traces = "; ".join(f"replicate {r['replicate']}: {r.get('message', r.get('status'))}" for r in ordered[:5])
        raise MonteCarloError(f"all {len(ordered)} replicates failed ({traces})", ordered)
    return MonteCarloReport(sc, settings, layout.names, truth, mask, ordered, layout.bases)


__all__ = ["MonteCarloError", "MonteCarloSettings", "MonteCarloReport", "run_monte_carlo", "run_replicate", "align_classes",
           "study_key", "replicate_streams"]
