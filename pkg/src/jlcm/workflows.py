"""Command implementations shared by the HTTP service and the command line.

Every workflow takes in-memory inputs (table text, parsed model and fit
documents) and returns a :class:`RunOutput` mapping output file names to
their text, so nothing here touches the file system except the optional
Monte Carlo checkpoint folder.

Seeds: the master seed feeds ``SeedSequence(seed)``. The gridsearch uses its
``n_starts`` children in order, the goodness-of-fit bootstrap and the
prediction bands use ``default_rng(seed)``, and Monte Carlo replicate ``r``
uses ``SeedSequence([seed, r])`` split into a data and a fitting stream.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset, dataset_to_csv, ingest_dataset, read_table, resolve_bases
from .estimation import FitFileError, FitResult, GridsearchError, fit_model
from .longitudinal import class_trajectory
from .model import ModelSpec, SpecError
from .montecarlo import MonteCarloError, MonteCarloSettings, run_monte_carlo
from .optim import CONVERGED, OptimizerSettings
from .posterior import (ExternalOutcome, external_covariate_fit, external_outcome_fit, gof_longitudinal,
                        gof_survival, information_criteria, posterior_probs)
from .simulate import ScenarioSpec, simulate_sample
from .survival import DegenerateLikelihood, HazardModel

log = logging.getLogger(__name__)

OK = "ok"
NOT_CONVERGED = "not-converged"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunOutput:
    files: dict[str, str] = field(default_factory=dict)
    status: str = OK
    messages: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


# -- formatting -----------------------------------------------------------------
def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if not math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


# -- inputs -----------------------------------------------------------------------
def load_dataset(tables: dict) -> Dataset:
    """``tables`` holds the text of ``longitudinal``, ``survival`` and
    optionally ``covariates`` (an ``id`` column plus one column per covariate)."""
    if not tables or "longitudinal" not in tables or "survival" not in tables:
        raise ConfigError("data needs both a longitudinal and a survival table")
    ds = ingest_dataset(io.StringIO(tables["longitudinal"]), io.StringIO(tables["survival"]))
    cov_text = tables.get("covariates")
    if cov_text:
        ds = ds.with_covariates(read_covariates(cov_text))
    return ds


def read_covariates(text: str) -> dict[str, dict[str, float]]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "id" not in reader.fieldnames:
        raise DataError("covariate table needs an 'id' column")
    out = {}
    for row_no, row in enumerate(reader, start=2):
        vals = {}
        for k, v in row.items():
            if k == "id":
                continue
            v = (v or "").strip()
            if v in ("", "NA", "nan"):
                continue            # reported later as a missing cell if the model needs it
            try:
                vals[k] = float(v)
            except ValueError:
                raise DataError(f"covariate table, row {row_no}: {k}={v!r} is not numeric") from None
        out[row["id"]] = vals
    return out


def parse_model(doc: dict) -> ModelSpec:
    try:
        return ModelSpec.from_dict(doc)
    except SpecError as exc:
        raise ConfigError(f"model: {exc}") from exc


def parse_fit(doc: dict) -> FitResult:
    try:
        return FitResult.from_dict(doc)
    except (FitFileError, SpecError, KeyError, TypeError) as exc:
        raise ConfigError(f"fit file: {exc}") from exc


def parse_scenario(doc: dict) -> ScenarioSpec:
    try:
        return ScenarioSpec.from_dict(doc)
    except SpecError as exc:
        raise ConfigError(f"scenario: {exc}") from exc


def optimizer_settings(opts: dict) -> OptimizerSettings:
    keys = ("max_iterations", "tolerance_function", "tolerance_parameters", "tolerance_derivatives")
    try:
        return OptimizerSettings(**{k: opts[k] for k in keys if opts.get(k) is not None})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"optimizer settings: {exc}") from exc


# -- shared tables --------------------------------------------------------------------
def classification_csv(ids, probs) -> str:
    G = probs.shape[1]
    rows = []
    assigned = np.argmax(probs, axis=1)
    for sid, a, p in zip(ids, assigned, probs):
        row = {"id": sid, "assigned": int(a) + 1}
        row.update({f"prob_{g + 1}": float(p[g]) for g in range(G)})
        rows.append(row)
    return to_csv(rows, ["id", "assigned"] + [f"prob_{g + 1}" for g in range(G)])


CRITERIA_COLUMNS = ["G", "loglik", "p", "AIC", "BIC", "entropy", "ICL"]


def _convergence_log(fit: FitResult) -> str:
    lines = [f"status: {fit.status}", f"iterations: {fit.iterations}", f"loglik: {fit.loglik!r}"]
    for k, v in fit.criteria.items():
        lines.append(f"criterion {k}: {v:.3e}")
    if fit.degenerate_class:
        lines.append("warning: a class held less than one subject of posterior mass during the fit")
    if fit.variance is None and fit.converged:
        lines.append("warning: negative Hessian not invertible; standard errors unavailable")
    lines.append("")
    lines.append("start,status,loglik,iterations")
    for e in fit.starts:
        lines.append(f"{e['start']},{e['status']},{_cell(e.get('loglik'))},{e.get('iterations', '')}")
    lines.append("")
    lines.append("iteration,loglik")
    lines.extend(f"{i},{v!r}" for i, v in enumerate(fit.trace))
    return "\n".join(lines) + "\n"


def _estimates_csv(fit: FitResult) -> str:
    se = fit.standard_errors()
    rows = [{"name": n, "estimate": float(v), "se": float(s)} for n, v, s in zip(fit.names, fit.theta, se)]
    rows += [{"name": n, "estimate": v} for n, v in fit.layout.natural_table(fit.theta)]
    return to_csv(rows, ["name", "estimate", "se"])


# -- commands ---------------------------------------------------------------------------
def run_fit(model: dict, tables: dict, G: int | None = None, n_starts: int = 100, seed: int = 0,
            jobs: int = 1, optimizer: dict | None = None) -> RunOutput:
    spec = parse_model(model)
    if G is not None:
        if G < 1:
            raise ConfigError("G must be >= 1")
        spec = spec.with_classes(G)
    if n_starts < 1:
        raise ConfigError("n_starts must be >= 1")
    ds = load_dataset(tables)
    settings = optimizer_settings(optimizer or {})
    out = RunOutput(warnings=list(ds.warnings))
    try:
        fit = fit_model(ds, spec, settings=settings, n_starts=n_starts, seed=seed, jobs=jobs)
    except GridsearchError as exc:
        out.status = NOT_CONVERGED
        out.messages.append(str(exc))
        out.files["convergence.log"] = "\n".join(
            f"{e['start']},{e['status']},{_cell(e.get('loglik'))},{e.get('iterations', '')}" for e in exc.starts) + "\n"
        return out
    except DegenerateLikelihood as exc:
        raise DataError(str(exc)) from exc
    out.files["fit.json"] = fit.to_json()
    out.files["estimates.csv"] = _estimates_csv(fit)
    out.files["convergence.log"] = _convergence_log(fit)
    pc = posterior_probs(fit, ds)
    out.files["classification.csv"] = classification_csv(pc.ids, pc.probs)
    out.files["criteria.csv"] = to_csv([information_criteria(fit, pc)], CRITERIA_COLUMNS)
    if not fit.converged:
        out.status = NOT_CONVERGED
        out.messages.append(f"optimizer stopped with status {fit.status}")
    if fit.degenerate_class:
        out.warnings.append("a class held less than one subject of posterior mass")
    out.messages.append(f"G={fit.G} loglik={fit.loglik:.4f} p={fit.p} status={fit.status}")
    return out


def run_select(model: dict, tables: dict, G_range: tuple[int, int], n_starts: int = 100, seed: int = 0,
               jobs: int = 1, optimizer: dict | None = None) -> RunOutput:
    lo, hi = int(G_range[0]), int(G_range[1])
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid G range {lo}..{hi}")
    spec = parse_model(model)
    ds = load_dataset(tables)
    settings = optimizer_settings(optimizer or {})
    out = RunOutput(warnings=list(ds.warnings))
    rows, failed = [], []
    fit1 = None
    bases = resolve_bases(ds, spec)
    for G in range(lo, hi + 1):
        try:
            fit = fit_model(ds, spec, G=G, settings=settings, n_starts=n_starts, seed=seed, jobs=jobs,
                            bases=bases, fit1=fit1)
        except (GridsearchError, DegenerateLikelihood) as exc:
            failed.append(G)
            rows.append({"G": G})
            out.messages.append(f"G={G}: {exc}")
            continue
        if G == 1:
            fit1 = fit
        if not fit.converged:
            failed.append(G)
        pc = posterior_probs(fit, ds)
        rows.append(information_criteria(fit, pc))
        out.files[f"fit_G{G}.json"] = fit.to_json()
    out.files["criteria.csv"] = to_csv(rows, CRITERIA_COLUMNS)
    ok = [r for r in rows if "BIC" in r and r["G"] not in failed]
    lines = []
    if ok:
        lines.append(f"minimum BIC: G={min(ok, key=lambda r: r['BIC'])['G']}")
        lines.append(f"minimum ICL: G={min(ok, key=lambda r: r['ICL'])['G']}")
        with_en = [r for r in ok if np.isfinite(r["entropy"])]
        if with_en:
            lines.append(f"maximum entropy: G={max(with_en, key=lambda r: r['entropy'])['G']}")
    for G in failed:
        lines.append(f"G={G}: did not converge (row left blank or not comparable)")
    lines.append("the choice of G is left to the analyst")
    out.files["recommendation.txt"] = "\n".join(lines) + "\n"
    if failed and len(failed) == len(rows):
        out.status = NOT_CONVERGED
    return out


def run_classify(fit_doc: dict, tables: dict) -> RunOutput:
    fit = parse_fit(fit_doc)
    ds = load_dataset(tables)
    pc = posterior_probs(fit, ds)
    table = pc.table()
    G = fit.G
    rows = []
    for g in range(G):
        row = {"class": g + 1, "n": int(pc.counts()[g])}
        row.update({f"mean_prob_{h + 1}": table[g, h] for h in range(G)})
        rows.append(row)
    out = RunOutput()
    out.files["classification.csv"] = classification_csv(pc.ids, pc.probs)
    out.files["class_table.csv"] = to_csv(rows, ["class", "n"] + [f"mean_prob_{h + 1}" for h in range(G)])
    return out


def run_predict(fit_doc: dict, grid: dict | None = None, covariates: dict | None = None, n_draws: int = 200,
                seed: int = 0, tables: dict | None = None) -> RunOutput:
    fit = parse_fit(fit_doc)
    grid = dict(grid or {})
    start = float(grid.get("start", 0.0))
    if "stop" in grid:
        stop = float(grid["stop"])
    elif tables:
        stop = float(load_dataset(tables).survival_arrays()[1].max())
    else:
        raise ConfigError("predict needs grid.stop or data to set the time grid")
    n = int(grid.get("points", 51))
    if not (stop > start and n >= 2):
        raise ConfigError("grid needs stop > start and at least 2 points")
    times = np.linspace(start, stop, n)
    cov = {k: float(v) for k, v in (covariates or {}).items()}
    missing = [c for c in fit.spec.covariate_names() if c not in cov and c not in fit.spec.class_membership]
    if missing:
        raise ConfigError(f"predict needs values for covariates {missing}")
    rng = np.random.default_rng(seed)
    traj_rows = []
    for d in fit.spec.dimensions:
        for g in range(fit.G):
            tr = class_trajectory(fit.layout, fit.theta, fit.variance, d.id, g, times, cov,
                                  n_draws=n_draws if fit.variance is not None else 0, rng=rng)
            for m in fit.spec.markers_of(d.id):
                lo, hi = tr.lo95[m.id], tr.hi95[m.id]
                for j, t in enumerate(times):
                    traj_rows.append({"class": g + 1, "time": t, "latent_mean": tr.latent_mean[j], "marker": m.id,
                                      "pred": tr.marker_pred[m.id][j],
                                      "lo95": None if lo is None else lo[j], "hi95": None if hi is None else hi[j]})
    hm = HazardModel(fit.spec.hazard, fit.params, fit.bases.hazard)
    xt = np.array([cov.get(c.name, 0.0) for c in fit.spec.hazard.covariates])
    ci_rows = []
    ci_grid = times[times >= 0]
    if fit.bases.hazard is not None:
        ci_grid = np.clip(ci_grid, 0, fit.bases.hazard.high)
    for g in range(fit.G):
        for l in range(fit.spec.L):
            ci = hm.cumulative_incidence(ci_grid, l, g, xt)
            ci_rows.extend({"class": g + 1, "cause": l + 1, "time": t, "cuminc": c} for t, c in zip(ci_grid, ci))
    out = RunOutput()
    out.files["trajectories.csv"] = to_csv(traj_rows, ["class", "time", "latent_mean", "marker", "pred", "lo95", "hi95"])
    out.files["cumulative_incidence.csv"] = to_csv(ci_rows, ["class", "cause", "time", "cuminc"])
    return out


def run_gof(fit_doc: dict, tables: dict, bin_width: float = 1.0, knot_spacing: float = 2.0, n_boot: int = 200,
            seed: int = 0) -> RunOutput:
    if bin_width <= 0 or knot_spacing <= 0 or n_boot < 0:
        raise ConfigError("bin_width and knot_spacing must be positive and n_boot >= 0")
    fit = parse_fit(fit_doc)
    ds = load_dataset(tables)
    pc = posterior_probs(fit, ds)
    long_rows = gof_longitudinal(fit, pc, ds, bin_width)
    surv_rows = gof_survival(fit, pc, ds, knot_spacing, n_boot, seed)
    out = RunOutput()
    out.files["gof_longitudinal.csv"] = to_csv(
        long_rows, ["class", "marker", "bin_start", "bin_mid", "n_obs", "weight", "observed", "predicted"])
    out.files["gof_survival.csv"] = to_csv(
        surv_rows, ["class", "cause", "start", "end", "events", "exposure", "rate", "lo95", "hi95", "predicted"])
    return out


def run_external(fit_doc: dict, tables: dict, external: dict) -> RunOutput:
    fit = parse_fit(fit_doc)
    ds = load_dataset(tables)
    case = external.get("case")
    text = external.get("table")
    if case not in (1, 2):
        raise ConfigError("external.case must be 1 (outcome) or 2 (class predictors)")
    if not text:
        raise ConfigError("external.table is required")
    covs = list(external.get("covariates") or [])
    out = RunOutput()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if case == 1:
            value = external.get("value", "value")
            rows = [rec for _, rec in read_table(io.StringIO(text), ["id", value] + covs)]
            try:
                outcome = ExternalOutcome.from_rows(rows, value, covs)
            except ValueError as exc:
                raise DataError(f"external table: {exc}") from exc
            res = external_outcome_fit(fit, ds, outcome, bool(external.get("class_specific_effects", False)))
        else:
            if fit.G == 1:
                raise ConfigError("class predictors need a fit with at least two classes")
            table = read_covariates(text)
            res = external_covariate_fit(fit, ds, table, covs or None)
        out.warnings.extend(str(w.message) for w in caught)
    out.files["external.csv"] = to_csv(res.table(), ["name", "estimate", "se", "z", "p_value"])
    report = [f"case: {res.case}", f"subjects: {res.n_subjects}", f"loglik: {res.loglik!r}",
              f"status: {res.status}"] + [f"note: {n}" for n in res.notes]
    out.files["external.txt"] = "\n".join(report) + "\n"
    if res.status != CONVERGED:
        out.status = NOT_CONVERGED
    return out


def run_simulate(scenario: dict, seed: int = 0, N: int | None = None) -> RunOutput:
    sc = parse_scenario(scenario)
    if N is not None:
        if N < 1:
            raise ConfigError("N must be >= 1")
        sc = ScenarioSpec(sc.model, sc.truth, N=N, visits=sc.visits, censoring=sc.censoring,
                          truncation=sc.truncation, covariates=sc.covariates, name=sc.name)
    ds, classes = simulate_sample(sc, np.random.SeedSequence(seed))
    tables = dataset_to_csv(ds)
    out = RunOutput()
    out.files.update(tables)
    out.files["classes.csv"] = to_csv([{"id": s, "class": int(c) + 1} for s, c in zip(ds.ids, classes)],
                                      ["id", "class"])
    out.files["model.json"] = json.dumps(sc.model.to_dict(), indent=1)
    return out


def run_mc(scenario: dict, seed: int = 0, replicates: int = 100, n_starts: int = 30, jobs: int = 1,
           cache_dir: str | None = None, optimizer: dict | None = None) -> RunOutput:
    sc = parse_scenario(scenario)
    try:
        settings = MonteCarloSettings(replicates=replicates, n_starts=n_starts, seed=seed,
                                      optimizer=optimizer_settings(optimizer or {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = RunOutput()
    try:
        report = run_monte_carlo(sc, settings, jobs=jobs, cache_dir=cache_dir)
    except MonteCarloError as exc:
        out.status = NOT_CONVERGED
        out.messages.append(str(exc))
        return out
    summary = report.summary()
    out.files["mc_parameters.csv"] = report.table_csv()
    out.files["mc_summary.json"] = json.dumps(summary, indent=1)
    out.files["mc_replicates.csv"] = to_csv(
        report.records, ["replicate", "status", "loglik", "iterations", "accuracy", "entropy", "event_rate",
                         "n_converged_starts", "monotone"])
    out.messages.append(
        f"{summary['converged']}/{summary['replicates']} replicates converged; "
        f"mean accuracy {summary['mean_accuracy']:.3f}; mean entropy {summary['mean_entropy']:.3f}")
    return out


__all__ = ["ConfigError", "RunOutput", "run_fit", "run_select", "run_classify", "run_predict", "run_gof",
           "run_external", "run_simulate", "run_mc", "load_dataset", "read_covariates", "to_csv", "OK",
           "NOT_CONVERGED"]
