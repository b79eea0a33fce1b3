import json

import numpy as np
import pytest

from jlcm.data import resolve_bases
from jlcm.estimation import (EMPTY_CLASS_PATIENCE, FitFileError, FitResult, GridsearchError, default_init,
                             fit_model, fit_single, gridsearch, start_seeds)
from jlcm.model import ModelSpec
from jlcm.optim import CONVERGED, DEGENERATE, OptimizerSettings
from jlcm.params import ParameterLayout

from conftest import model_dict


@pytest.fixture(scope="module")
def small(toy_dataset):
    ds = toy_dataset.subset(range(60))
    spec = ModelSpec.from_dict(model_dict(G=2, causes=2, random=("1",)))
    return ds, spec


def test_selected_start_dominates(toy_fit):
    finished = [e["loglik"] for e in toy_fit.starts if e["loglik"] is not None]
    assert toy_fit.converged
    assert finished and all(toy_fit.loglik >= v for v in finished)
    assert toy_fit.variance is not None


def test_identical_seeds_bit_identical(small):
    ds, spec = small
    a = fit_model(ds, spec, n_starts=2, seed=5)
    b = fit_model(ds, spec, n_starts=2, seed=5)
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.variance, b.variance)
    assert a.starts == b.starts


def test_worker_count_does_not_change_result(small):
    ds, spec = small
    a = fit_model(ds, spec, n_starts=2, seed=9, jobs=1)
    b = fit_model(ds, spec, n_starts=2, seed=9, jobs=2)
    np.testing.assert_array_equal(a.theta, b.theta)


def test_start_seeds_are_independent_streams():
    s = start_seeds(3, 4)
    draws = [np.random.default_rng(x).random() for x in s]
    assert len(set(draws)) == 4
    again = [np.random.default_rng(x).random() for x in start_seeds(3, 4)]
    assert draws == again


def test_gridsearch_all_failed_raises():
    with pytest.raises(GridsearchError) as exc:
        gridsearch(lambda th: "boom", 3, 0, lambda rng: rng.random(2))
    assert len(exc.value.starts) == 3
    assert all(e["status"] == DEGENERATE for e in exc.value.starts)


def test_gridsearch_needs_a_start():
    with pytest.raises(ValueError):
        gridsearch(lambda th: "x", 0, 0, lambda rng: rng.random(2))


def test_fit_file_round_trip(toy_fit):
    back = FitResult.from_json(toy_fit.to_json())
    np.testing.assert_array_equal(back.theta, toy_fit.theta)
    np.testing.assert_array_equal(back.variance, toy_fit.variance)
    assert back.loglik == toy_fit.loglik and back.names == toy_fit.names
    assert back.spec == toy_fit.spec and back.bases == toy_fit.bases


def test_fit_file_version_checked(toy_fit):
    d = json.loads(toy_fit.to_json())
    d["version"] = 99
    with pytest.raises(FitFileError, match="version"):
        FitResult.from_dict(d)
    with pytest.raises(FitFileError):
        FitResult.from_json("{not json")
    d["version"] = 1
    d["estimates"] = d["estimates"][:-1]
    with pytest.raises(FitFileError, match="names"):
        FitResult.from_dict(d)


def test_empty_class_start_is_abandoned(small):
    ds, spec = small
    bases = resolve_bases(ds, spec)
    layout = ParameterLayout(spec, bases)
    P = layout.unpack(default_init(ds, spec, bases))
    P.xi[0, 0] = -40.0
    theta = layout.pack(P)
    fit = fit_single(ds, spec, theta, bases, OptimizerSettings(max_iterations=50), variance=False)
    assert fit.status == DEGENERATE
    assert fit.degenerate_class
    assert fit.iterations == EMPTY_CLASS_PATIENCE


def test_one_class_fit_converges(small):
    ds, spec = small
    fit = fit_model(ds, spec, G=1)
    assert fit.status == CONVERGED and fit.G == 1
    assert np.all(np.isfinite(fit.standard_errors()))
    assert np.all(np.diff(fit.trace) >= 0)
