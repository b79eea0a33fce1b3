from pathlib import Path

import numpy as np
import pytest

import jlcm
from jlcm.data import Dataset, LongitudinalObservation, Subject, SurvivalRecord, ingest_dataset
from jlcm.estimation import fit_model
from jlcm.model import load_model_spec
from jlcm.workflows import read_covariates

PKG_DATA = Path(jlcm.__file__).parent / "data"
TOY = PKG_DATA / "toy"


def make_subject(sid, markers: dict, entry=0.0, time=5.0, cause=0, covariates=None):
    """``markers`` maps marker id to ``(times, values)``."""
    obs = []
    for mid, (ts, vs) in markers.items():
        obs.extend(LongitudinalObservation(sid, mid, float(t), float(v)) for t, v in zip(ts, vs))
    return Subject(sid, tuple(obs), SurvivalRecord(sid, float(entry), float(time), int(cause)), dict(covariates or {}))


def make_dataset(subjects) -> Dataset:
    return Dataset(tuple(subjects))


def model_dict(G=2, links=("identity",), causes=1, family="weibull", baseline="class-specific",
               random=("1", "time"), hazard_covariates=(), class_membership=()):
    markers = [{"id": f"y{k + 1}", "dimension": f"d{k + 1}", "link": link} for k, link in enumerate(links)]
    dims = [{"id": f"d{k + 1}", "fixed": ["1", "time"], "class_specific": ["1", "time"], "random": list(random)}
            for k in range(len(links))]
    return {"spec_version": 1, "classes": G, "dimensions": dims, "markers": markers,
            "class_membership": list(class_membership),
            "hazard": {"causes": causes, "family": family, "baseline": baseline,
                       "covariates": [{"name": c} for c in hazard_covariates]}}


@pytest.fixture(scope="session")
def toy_dataset():
    ds = ingest_dataset(TOY / "longitudinal.csv", TOY / "survival.csv")
    return ds.with_covariates(read_covariates((TOY / "covariates.csv").read_text()))


@pytest.fixture(scope="session")
def toy_spec():
    return load_model_spec(TOY / "model.yaml")


@pytest.fixture(scope="session")
def toy_fit(toy_dataset, toy_spec):
    return fit_model(toy_dataset, toy_spec, n_starts=3, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
