import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jlcm.data import (DataError, build_designs, dataset_to_csv, ingest_dataset, resolve_bases,
                       term_matrix, validate_dataset)
from jlcm.estimation import fit_model
from jlcm.model import ModelSpec, SpecError, dump_model_spec, load_model_spec
from jlcm.workflows import read_covariates

from conftest import TOY, make_dataset, make_subject, model_dict

LONG = "id,time,marker,value\na,0,y1,1.0\na,1,y1,1.5\nb,0.5,y1,2.0\n"
SURV = "id,entry,time,cause\na,0,3,1\nb,0,4,0\n"


def _ingest(long=LONG, surv=SURV, cov=None):
    return ingest_dataset(io.StringIO(long), io.StringIO(surv), None if cov is None else io.StringIO(cov))


def test_ingest_orders_subjects_and_observations():
    ds = _ingest("id,time,marker,value\nb,0.5,y1,2.0\na,1,y1,1.5\na,0,y1,1.0\n")
    assert ds.ids == ["a", "b"]
    t, v = ds.subjects[0].marker("y1")
    np.testing.assert_array_equal(t, [0.0, 1.0])
    np.testing.assert_array_equal(v, [1.0, 1.5])


@pytest.mark.parametrize("long,surv,match", [
    ("id,time,value\na,0,1\n", SURV, "missing column"),
    ("id,time,marker,value\na,0,y1,abc\n", SURV, "row 2"),
    ("id,time,marker,value\na,0,y1,inf\n", SURV, "not finite"),
    (LONG + "a,0,y1,3.0\n", SURV, "duplicate"),
    (LONG + "zz,0,y1,3.0\n", SURV, "without a survival record"),
    (LONG, SURV + "a,0,5,0\n", "duplicate subject"),
    (LONG, "id,entry,time,cause\na,0,3,1.5\nb,0,4,0\n", "integer"),
    ("id,time,marker,value\n", SURV, "no observations"),
])
def test_ingest_errors(long, surv, match):
    with pytest.raises(DataError, match=match):
        _ingest(long, surv)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        ingest_dataset(tmp_path / "nope.csv", tmp_path / "s.csv")


def test_survival_only_subject_warns():
    with pytest.warns(UserWarning, match="survival-only"):
        ds = _ingest(surv=SURV + "c,0,2,0\n")
    assert ds.N == 3


def test_validation_reports_problems():
    spec = ModelSpec.from_dict(model_dict(G=1, causes=1, hazard_covariates=("x",)))
    ds = make_dataset([make_subject("a", {"y1": ([0, 1], [1, 2])}, entry=2.0, time=1.0, cause=2),
                       make_subject("b", {"y1": ([0], [1])}, covariates={"x": 1.0})])
    rep = validate_dataset(ds, spec)
    assert not rep.ok
    text = " ".join(rep.errors)
    assert "observed time" in text and "cause 2" in text and "'x' missing" in text


def test_missing_covariate_is_a_hard_error():
    spec = ModelSpec.from_dict(model_dict(G=1, hazard_covariates=("x",)))
    ds = make_dataset([make_subject("a", {"y1": ([0, 1], [1, 2])}, covariates={"x": math.nan})])
    with pytest.raises(DataError, match="covariate 'x' missing"):
        build_designs(ds, spec)
    with pytest.raises(DataError):
        fit_model(ds, spec, G=1)


def test_isplines_range_violation():
    d = model_dict(G=1, links=("isplines",))
    d["markers"][0]["range"] = [0.0, 1.0]
    spec = ModelSpec.from_dict(d)
    ds = make_dataset([make_subject("a", {"y1": ([0, 1], [0.5, 1.5])})])
    assert any("outside declared range" in e for e in validate_dataset(ds, spec).errors)


def test_toy_data_validates(toy_dataset, toy_spec):
    rep = validate_dataset(toy_dataset, toy_spec)
    assert rep.ok, rep.errors


def test_dataset_csv_round_trip(toy_dataset):
    tables = dataset_to_csv(toy_dataset)
    names = sorted(tables)
    long = next(n for n in names if n.startswith("longitudinal"))
    surv = next(n for n in names if n.startswith("survival"))
    cov = next(n for n in names if n.startswith("covariates"))
    back = ingest_dataset(io.StringIO(tables[long]), io.StringIO(tables[surv]))
    back = back.with_covariates(read_covariates(tables[cov]))
    assert back.subjects == toy_dataset.subjects


@pytest.mark.parametrize("mutate,match", [
    (lambda d: d.update(spec_version=2), "spec_version"),
    (lambda d: d.update(classes=0), "classes"),
    (lambda d: d["markers"][0].update(link="logit"), "unknown link"),
    (lambda d: d["markers"][0].update(dimension="zz"), "unknown dimension"),
    (lambda d: d["dimensions"][0].update(class_specific=["w"]), "not in fixed"),
    (lambda d: d["hazard"].update(family="gompertz"), "hazard family"),
    (lambda d: d["hazard"].update(causes=0), "cause"),
    (lambda d: d.pop("markers"), "malformed"),
])
def test_spec_errors(mutate, match):
    d = model_dict()
    mutate(d)
    with pytest.raises(SpecError, match=match):
        ModelSpec.from_dict(d)


def test_spec_round_trip(toy_spec, tmp_path):
    p = tmp_path / "m.yaml"
    p.write_text(dump_model_spec(toy_spec))
    assert load_model_spec(p) == toy_spec
    assert ModelSpec.from_dict(toy_spec.to_dict()) == toy_spec


def test_bases_frozen_from_data(toy_dataset, toy_spec):
    b = resolve_bases(toy_dataset, toy_spec)
    vals = toy_dataset.marker_values("y2")
    spline = b.links["y2"]
    assert spline.low <= vals.min() and spline.high >= vals.max()
    assert all(spline.low < k < spline.high for k in spline.interior_knots)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=6), st.floats(-3, 3))
def test_term_matrix_columns(times, x):
    t = np.array(times)
    M = term_matrix(("1", "time", "time^2", "x", "time*x"), t, {"x": x})
    np.testing.assert_allclose(M, np.column_stack([np.ones_like(t), t, t ** 2, np.full_like(t, x), t * x]))
