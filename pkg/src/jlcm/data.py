"""Subjects, their marker observations and survival records; CSV ingestion,
validation against a :class:`~jlcm.model.ModelSpec`, and design matrices."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelSpec, term_factors
from .splines import SplineBasisSpec

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LongitudinalObservation:
    subject_id: str
    marker_id: str
    time: float
    value: float


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    entry_time: float
    observed_time: float
    cause: int


@dataclass(frozen=True)
class Subject:
    id: str
    observations: tuple[LongitudinalObservation, ...]
    survival: SurvivalRecord
    covariates: Mapping[str, float] = field(default_factory=dict)

    def marker(self, marker_id: str) -> tuple[np.ndarray, np.ndarray]:
        obs = [o for o in self.observations if o.marker_id == marker_id]
        return np.array([o.time for o in obs]), np.array([o.value for o in obs])


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[Subject, ...]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.subjects:
            raise DataError("dataset has no subjects")

    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def marker_values(self, marker_id: str) -> np.ndarray:
        return np.array([o.value for s in self.subjects for o in s.observations if o.marker_id == marker_id])

    def survival_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        entry = np.array([s.survival.entry_time for s in self.subjects], dtype=float)
        time = np.array([s.survival.observed_time for s in self.subjects], dtype=float)
        cause = np.array([s.survival.cause for s in self.subjects], dtype=int)
        return entry, time, cause

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.subjects[i] for i in indices), self.warnings)

    def with_covariates(self, table: Mapping[str, Mapping[str, float]]) -> "Dataset":
        subjects = []
        for s in self.subjects:
            cov = dict(s.covariates)
            cov.update(table.get(s.id, {}))
            subjects.append(Subject(s.id, s.observations, s.survival, cov))
        return Dataset(tuple(subjects), self.warnings)


@dataclass(frozen=True)
class ColumnMap:
    id: str = "id"
    time: str = "time"
    marker: str = "marker"
    value: str = "value"
    entry: str = "entry"
    event_time: str = "time"
    cause: str = "cause"


def _open_source(source):
    if hasattr(source, "read"):
        return source, False
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path.open(encoding="utf-8", newline=""), True


def read_table(source, required: list[str]) -> list[tuple[int, dict[str, str]]]:
    """Rows of a headed CSV as ``(row_number, record)``; row 1 is the header."""
    fh, owned = _open_source(source)
    try:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"missing column(s) {missing}; header is {header}")
        rows = []
        for n, rec in enumerate(reader, start=2):
            rows.append((n, {k.strip(): (v or "").strip() for k, v in rec.items() if k is not None}))
        return rows
    finally:
        if owned:
            fh.close()


def _number(text: str, row: int, column: str, table: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise DataError(f"{table} table, row {row}: cannot parse {column}={text!r} as a number") from None
    if not math.isfinite(val):
        raise DataError(f"{table} table, row {row}: {column} is not finite")
    return val


def ingest_dataset(longitudinal, survival, covariates=None, columns: ColumnMap = ColumnMap()) -> Dataset:
    """Join the three tables by subject id into a :class:`Dataset`.

    ``longitudinal``/``survival``/``covariates`` are paths or open text files.
    Subjects are ordered by id and observations by (marker, time), so row order
    of the inputs does not matter.
    """
    long_rows = read_table(longitudinal, [columns.id, columns.time, columns.marker, columns.value])
    if not long_rows:
        raise DataError("no observations in longitudinal table")
    surv_rows = read_table(survival, [columns.id, columns.entry, columns.event_time, columns.cause])

    records: dict[str, SurvivalRecord] = {}
    for row, rec in surv_rows:
        sid = rec[columns.id]
        if sid in records:
            raise DataError(f"survival table, row {row}: duplicate subject {sid!r}")
        entry = _number(rec[columns.entry], row, columns.entry, "survival")
        t = _number(rec[columns.event_time], row, columns.event_time, "survival")
        cause_val = _number(rec[columns.cause], row, columns.cause, "survival")
        if cause_val != int(cause_val):
            raise DataError(f"survival table, row {row}: cause must be an integer")
        records[sid] = SurvivalRecord(sid, entry, t, int(cause_val))

    obs: dict[str, list[LongitudinalObservation]] = defaultdict(list)
    seen: dict[tuple[str, str, float], int] = {}
    for row, rec in long_rows:
        sid = rec[columns.id]
        t = _number(rec[columns.time], row, columns.time, "longitudinal")
        v = _number(rec[columns.value], row, columns.value, "longitudinal")
        key = (sid, rec[columns.marker], t)
        if key in seen:
            raise DataError(f"longitudinal table, row {row}: duplicate (id, marker, time) {key} "
                            f"(first at row {seen[key]})")
        seen[key] = row
        obs[sid].append(LongitudinalObservation(sid, rec[columns.marker], t, v))

    orphans = sorted(set(obs) - set(records))
    if orphans:
        raise DataError(f"subjects without a survival record: {orphans}")

    cov: dict[str, dict[str, float]] = {}
    if covariates is not None:
        cov_rows = read_table(covariates, [columns.id])
        for row, rec in cov_rows:
            sid = rec[columns.id]
            if sid in cov:
                raise DataError(f"covariate table, row {row}: duplicate subject {sid!r}")
            values = {}
            for name, text in rec.items():
                if name == columns.id:
                    continue
                # empty cells stay missing; validation decides if they matter
                values[name] = math.nan if text == "" else _number(text, row, name, "covariate")
            cov[sid] = values

    notes = []
    survival_only = sorted(set(records) - set(obs))
    if survival_only:
        msg = f"{len(survival_only)} subject(s) without marker observations (survival-only): {survival_only[:10]}"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)

    subjects = []
    for sid in sorted(records):
        o = tuple(sorted(obs.get(sid, []), key=lambda x: (x.marker_id, x.time)))
        subjects.append(Subject(sid, o, records[sid], cov.get(sid, {})))
    return Dataset(tuple(subjects), tuple(notes))


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_dataset(ds: Dataset, spec: ModelSpec, bases: "Bases | None" = None) -> ValidationReport:
    """Check a dataset against a model; warnings never block fitting."""
    report = ValidationReport()
    marker_ids = {m.id for m in spec.markers}
    needed = spec.covariate_names()
    ranges = {m.id: m.range for m in spec.markers if m.link == "isplines"}
    if bases is not None:
        ranges.update({k: (b.low, b.high) for k, b in bases.links.items()})
    unknown_markers: set[str] = set()
    for s in ds.subjects:
        rec = s.survival
        if not rec.observed_time > rec.entry_time:
            report.errors.append(f"subject {s.id}: observed time {rec.observed_time} <= entry time {rec.entry_time}")
        if rec.entry_time < 0:
            report.errors.append(f"subject {s.id}: negative entry time {rec.entry_time}")
        if rec.cause < 0 or rec.cause > spec.L:
            report.errors.append(f"subject {s.id}: cause {rec.cause} outside 0..{spec.L}")
        for name in sorted(needed):
            val = s.covariates.get(name)
            if val is None or not math.isfinite(val):
                report.errors.append(f"subject {s.id}: covariate {name!r} missing")
        used = 0
        for o in s.observations:
            if o.marker_id not in marker_ids:
                unknown_markers.add(o.marker_id)
                continue
            used += 1
            rng = ranges.get(o.marker_id)
            if rng is not None and not rng[0] <= o.value <= rng[1]:
                report.errors.append(f"subject {s.id}: marker {o.marker_id} value {o.value} "
                                     f"outside declared range [{rng[0]}, {rng[1]}]")
        if used == 0:
            report.warnings.append(f"subject {s.id}: no marker observations (survival-only)")
    if unknown_markers:
        report.warnings.append(f"markers not in the model are ignored: {sorted(unknown_markers)}")
    for m in spec.markers:
        if ds.marker_values(m.id).size == 0:
            report.errors.append(f"marker {m.id} has no observations")
    return report


@dataclass(frozen=True)
class Bases:
    """Data-dependent spline bases, frozen at fit time."""

    links: dict[str, SplineBasisSpec]
    hazard: SplineBasisSpec | None

    def to_dict(self) -> dict:
        def enc(b):
            return None if b is None else {"degree": b.degree, "interior_knots": list(b.interior_knots),
                                           "low": b.low, "high": b.high}
        return {"links": {k: enc(v) for k, v in self.links.items()}, "hazard": enc(self.hazard)}

    @classmethod
    def from_dict(cls, d: dict) -> "Bases":
        def dec(b):
            return None if b is None else SplineBasisSpec(b["degree"], tuple(b["interior_knots"]), b["low"], b["high"])
        return cls({k: dec(v) for k, v in d["links"].items()}, dec(d.get("hazard")))


def resolve_bases(ds: Dataset, spec: ModelSpec) -> Bases:
    links = {}
    for m in spec.markers:
        if m.link != "isplines":
            continue
        values = ds.marker_values(m.id)
        lo, hi = m.range if m.range is not None else (values.min(), values.max())
        if m.knots is not None:
            links[m.id] = SplineBasisSpec(m.degree, m.knots, lo, hi)
        else:
            links[m.id] = SplineBasisSpec.from_values(values, m.degree, m.n_knots, m.knot_placement, lo, hi)
    hazard = None
    if spec.hazard.family == "msplines":
        _, time, cause = ds.survival_arrays()
        hi = float(time.max())
        if spec.hazard.knots is not None:
            hazard = SplineBasisSpec(3, spec.hazard.knots, 0.0, hi)
        else:
            events = time[cause > 0]
            hazard = SplineBasisSpec.from_values(events if events.size else time, 3,
                                                 spec.hazard.n_knots, "quantile", 0.0, hi)
    return Bases(links, hazard)


def eval_term(term: str, times: np.ndarray, covariates: Mapping[str, float]) -> np.ndarray:
    col = np.ones_like(times, dtype=float)
    for name, power in term_factors(term):
        if name == "time":
            col = col * times ** power
        else:
            if name not in covariates:
                raise DataError(f"covariate {name!r} missing")
            col = col * covariates[name] ** power
    return col


def term_matrix(terms, times, covariates) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    return np.column_stack([eval_term(t, times, covariates) for t in terms]) if terms else np.ones((times.size, 0))


@dataclass(frozen=True)
class DimensionDesign:
    marker_index: np.ndarray   # index into spec.markers
    times: np.ndarray
    values: np.ndarray
    X: np.ndarray
    Z: np.ndarray


@dataclass(frozen=True)
class SubjectDesign:
    id: str
    XC: np.ndarray
    dims: dict[str, DimensionDesign]
    XT: np.ndarray
    entry: float
    time: float
    cause: int
    covariates: Mapping[str, float] = field(default_factory=dict)


def build_designs(ds: Dataset, spec: ModelSpec) -> list[SubjectDesign]:
    """Per-subject design bundles. Dimensions without observations are absent
    from ``SubjectDesign.dims``."""
    marker_pos = {m.id: k for k, m in enumerate(spec.markers)}
    out = []
    for s in ds.subjects:
        cov = s.covariates
        for name in spec.covariate_names():
            if name not in cov or not math.isfinite(cov[name]):
                raise DataError(f"subject {s.id}: covariate {name!r} missing")
        XC = np.array([cov[c] for c in spec.class_membership], dtype=float)
        XT = np.array([cov[c.name] for c in spec.hazard.covariates], dtype=float)
        dims = {}
        for d in spec.dimensions:
            obs = [o for o in s.observations if o.marker_id in marker_pos
                   and spec.markers[marker_pos[o.marker_id]].dimension == d.id]
            if not obs:
                continue
            t = np.array([o.time for o in obs])
            dims[d.id] = DimensionDesign(
                marker_index=np.array([marker_pos[o.marker_id] for o in obs]),
                times=t,
                values=np.array([o.value for o in obs]),
                X=term_matrix(d.mean_terms, t, cov),
                Z=term_matrix(d.random, t, cov),
            )
        rec = s.survival
        out.append(SubjectDesign(s.id, XC, dims, XT, rec.entry_time, rec.observed_time, rec.cause, cov))
    return out


def dataset_to_csv(ds: Dataset) -> dict[str, str]:
    """Render a dataset as the three CSV tables (longitudinal, survival, covariates)."""
    long_buf, surv_buf, cov_buf = io.StringIO(), io.StringIO(), io.StringIO()
    w = csv.writer(long_buf, lineterminator="\n")
    w.writerow(["id", "time", "marker", "value"])
    for s in ds.subjects:
        for o in s.observations:
            w.writerow([s.id, repr(o.time), o.marker_id, repr(o.value)])
    w = csv.writer(surv_buf, lineterminator="\n")
    w.writerow(["id", "entry", "time", "cause"])
    for s in ds.subjects:
        r = s.survival
        w.writerow([s.id, repr(r.entry_time), repr(r.observed_time), r.cause])
    names = sorted({k for s in ds.subjects for k in s.covariates})
    w = csv.writer(cov_buf, lineterminator="\n")
    w.writerow(["id"] + names)
    for s in ds.subjects:
        w.writerow([s.id] + [repr(s.covariates.get(n, math.nan)) for n in names])
    return {"longitudinal.csv": long_buf.getvalue(), "survival.csv": surv_buf.getvalue(),
            "covariates.csv": cov_buf.getvalue()}
