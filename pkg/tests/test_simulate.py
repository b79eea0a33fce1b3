import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jlcm.data import resolve_bases, validate_dataset
from jlcm.model import SpecError
from jlcm.params import ParameterLayout
from jlcm.simulate import CauseTruth, ScenarioSpec, draw_event_time, load_scenario, simulate_sample

from conftest import PKG_DATA, model_dict


def scenario_dict(G=2, N=200, causes=None, truncation=None, censoring=None, proportions=None, cov=None, sigma=1.0):
    causes = causes or [{"family": "weibull", "scale": [0.1] * G, "shape": [1.2] * G}]
    return {"spec_version": 1, "name": "t",
            "model": model_dict(G=G, causes=len(causes)),
            "truth": {"proportions": proportions or [1.0 / G] * G,
                      "dimensions": {"d1": {"beta": {"1": list(range(G)), "time": [0.1] * G},
                                            "covariance": cov if cov is not None else [[1.0, 0.0], [0.0, 0.1]]}},
                      "markers": {"y1": {"sigma": sigma}},
                      "hazard": causes},
            "study": {"N": N, "visits": {"interval": 1.0, "jitter": 0.1, "max_time": 10},
                      "censoring": {"administrative": 10} if censoring is None else censoring, "truncation": truncation}}


def test_same_seed_same_cohort():
    sc = ScenarioSpec.from_dict(scenario_dict())
    a, ca = simulate_sample(sc, np.random.SeedSequence(3))
    b, cb = simulate_sample(sc, np.random.SeedSequence(3))
    c, _ = simulate_sample(sc, np.random.SeedSequence(4))
    assert a.subjects == b.subjects and np.array_equal(ca, cb)
    assert a.subjects != c.subjects


def test_class_proportions_within_three_sd():
    p = [0.2, 0.5, 0.3]
    sc = ScenarioSpec.from_dict(scenario_dict(G=3, N=3000, proportions=p))
    _, classes = simulate_sample(sc, 11)
    freq = np.bincount(classes, minlength=3) / sc.N
    sd = np.sqrt(np.array(p) * (1 - np.array(p)) / sc.N)
    assert np.all(np.abs(freq - p) < 3 * sd)


def test_exponential_median():
    lam = 0.2
    causes = [{"family": "weibull", "scale": [lam], "shape": [1.0]}]
    sc = ScenarioSpec.from_dict(scenario_dict(G=1, N=4000, causes=causes, censoring={}))
    ds, _ = simulate_sample(sc, 5)
    _, T, cause = ds.survival_arrays()
    assert np.all(cause == 1)
    se = 1.0 / (lam * np.sqrt(sc.N))
    assert abs(np.median(T) - np.log(2) / lam) < 3 * se


def test_administrative_and_uniform_censoring():
    sc = ScenarioSpec.from_dict(scenario_dict(N=400, censoring={"administrative": 6, "uniform": [2, 8]}))
    ds, _ = simulate_sample(sc, 2)
    entry, T, cause = ds.survival_arrays()
    assert T.max() <= 6.0
    assert np.any(cause == 0) and np.any(cause == 1)
    assert np.all(T[cause == 0] <= 6.0)


def test_delayed_entry_design():
    sc = ScenarioSpec.from_dict(scenario_dict(N=300, truncation={"max_entry": 3}))
    ds, _ = simulate_sample(sc, 8)
    entry, T, _ = ds.survival_arrays()
    assert np.all(entry < T) and np.all(entry <= 3) and entry.max() > 0
    for s in ds.subjects:
        t, _ = s.marker("y1")
        assert t.size >= 1
        assert np.all(t >= s.survival.entry_time) and np.all(t < s.survival.observed_time)


def test_simulated_cohort_validates():
    sc = load_scenario(PKG_DATA / "scenario_toy.yaml")
    ds, _ = simulate_sample(sc, 1)
    rep = validate_dataset(ds, sc.model)
    assert rep.ok, rep.errors
    assert ds.N == sc.N


def test_zero_variances_give_the_mean_line():
    sc = ScenarioSpec.from_dict(scenario_dict(N=30, cov=[[0.0, 0.0], [0.0, 0.0]], sigma=0.0))
    ds, classes = simulate_sample(sc, 0)
    for s, g in zip(ds.subjects, classes):
        t, y = s.marker("y1")
        np.testing.assert_allclose(y, g + 0.1 * t, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(0.3, 3.0), st.floats(1e-4, 5.0))
def test_weibull_inverse(scale, shape, e):
    c = CauseTruth("weibull", scale=np.array([scale]), shape=np.array([shape]))
    assert c.cumhaz(c.inverse(e, 0), 0) == pytest.approx(e, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.floats(1e-4, 20.0), st.floats(0.2, 3.0))
def test_piecewise_inverse(rates, e, mult):
    c = CauseTruth("piecewise", cuts=np.array([0.0, 1.0, 4.0]), rates=np.array([rates]))
    assert c.cumhaz(c.inverse(e, 0, mult), 0, mult) == pytest.approx(e, rel=1e-10)


def test_competing_causes_pick_the_earliest():
    causes = [CauseTruth("weibull", scale=np.array([1.0]), shape=np.array([1.0])),
              CauseTruth("weibull", scale=np.array([1.0]), shape=np.array([1.0]))]
    u = np.exp(-np.array([2.0, 0.5]))
    assert draw_event_time(0, causes, u) == pytest.approx((0.5, 2))
    assert draw_event_time(0, causes, u, censor_time=0.1) == (0.1, 0)


def test_true_params_round_trip():
    sc = ScenarioSpec.from_dict(scenario_dict(cov=[[1.0, 0.2], [0.2, 0.3]]))
    ds, _ = simulate_sample(sc, 0)
    layout = ParameterLayout(sc.model, resolve_bases(ds, sc.model))
    P, mask = sc.true_params(layout)
    Q = layout.unpack(layout.pack(P))
    np.testing.assert_allclose(Q.covariance("d1", 0), [[1.0, 0.2], [0.2, 0.3]], atol=1e-12)
    np.testing.assert_allclose(Q.class_proportions(), [0.5, 0.5])
    assert mask.all()


@pytest.mark.parametrize("mutate,match", [
    (lambda d: d["truth"].update(proportions=[0.3, 0.3]), "proportions"),
    (lambda d: d["truth"]["hazard"].append(d["truth"]["hazard"][0]), "causes"),
    (lambda d: d["model"]["markers"][0].update(link="isplines"), "identity and linear"),
    (lambda d: d["truth"]["dimensions"].clear(), "missing dimension"),
    (lambda d: d["truth"]["hazard"][0].update(shape=[-1, 1]), "positive"),
    (lambda d: d.update(spec_version=7), "spec_version"),
])
def test_scenario_errors(mutate, match):
    d = copy.deepcopy(scenario_dict())
    mutate(d)
    with pytest.raises(SpecError, match=match):
        ScenarioSpec.from_dict(d)
