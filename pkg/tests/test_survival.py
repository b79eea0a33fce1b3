import time

import numpy as np
import pytest
from scipy import integrate

from conftest import model_dict
from jlcm.data import Bases
from jlcm.model import ModelSpec
from jlcm.params import ParameterLayout
from jlcm.splines import SplineBasisSpec
from jlcm.survival import DegenerateLikelihood, HazardModel

HBASIS = SplineBasisSpec(3, (2.0, 4.5, 7.0), 0.0, 10.0)


def hazard_model(family, baseline="class-specific", G=2, causes=2, covs=(), seed=0):
    spec = ModelSpec.from_dict(model_dict(G=G, causes=causes, family=family, baseline=baseline,
                                          hazard_covariates=covs))
    bases = Bases({}, HBASIS if family == "msplines" else None)
    layout = ParameterLayout(spec, bases)
    rng = np.random.default_rng(seed)
    theta = layout.pack(layout.unpack(np.zeros(layout.p)))
    theta = theta + rng.uniform(0.2, 1.2, layout.p)
    P = layout.unpack(theta)
    return HazardModel(spec.hazard, P, bases.hazard), P


@pytest.mark.parametrize("family", ["weibull", "msplines"])
def test_cumulative_hazard_matches_quadrature(family):
    t0 = time.perf_counter()
    worst = 0.0
    for draw in range(50):
        hm, _ = hazard_model(family, seed=draw)
        t = np.random.default_rng(1000 + draw).uniform(0.05, 9.9)
        for l in range(2):
            for g in range(2):
                pts = [p for p in (2.0, 4.5, 7.0) if p < t] if family == "msplines" else None
                quad, _ = integrate.quad(lambda u: hm.baseline_hazard(np.array([u]), l, g)[0], 0.0, t,
                                         points=pts, epsabs=0, epsrel=1e-12, limit=200)
                val = hm.cumulative_hazard(np.array([t]), l, g)[0]
                worst = max(worst, abs(val - quad) / abs(quad))
    assert worst < 1e-8
    assert time.perf_counter() - t0 < 10.0


def test_weibull_closed_form():
    hm, P = hazard_model("weibull")
    s, k = P.hazard_base[0][1]
    t = np.array([0.5, 2.0, 7.0])
    np.testing.assert_allclose(hm.baseline_hazard(t, 0, 1), s * k * (s * t) ** (k - 1), rtol=1e-12)
    np.testing.assert_allclose(hm.cumulative_hazard(t, 0, 1), (s * t) ** k, rtol=1e-12)


def test_survival_sums_causes_and_covariates():
    hm, P = hazard_model("weibull", covs=("x",))
    t = np.array([1.0, 3.0])
    x = np.array([0.7])
    total = sum(hm.cumulative_hazard(t, l, 0) * np.exp(x @ P.delta[l, :, 0]) for l in range(2))
    np.testing.assert_allclose(hm.survival(t, 0, x), np.exp(-total), rtol=1e-12)


def test_event_contribution():
    hm, _ = hazard_model("weibull")
    T = 2.5
    expected = np.log(hm.survival(np.array([T]), 1))[0] + np.log(hm.hazard(np.array([T]), 0, 1))[0]
    assert hm.event_log_contribution(T, 1, 1) == pytest.approx(expected, abs=1e-12)
    assert hm.event_log_contribution(T, 0, 1) == pytest.approx(np.log(hm.survival(np.array([T]), 1))[0], abs=1e-12)


def test_zero_hazard_at_event_is_degenerate():
    hm, P = hazard_model("msplines")
    P.hazard_base[0][0][:] = 0.0
    with pytest.raises(DegenerateLikelihood):
        hm.event_log_contribution(3.0, 1, 0)


def test_proportional_baseline_shares_shape():
    hm, P = hazard_model("weibull", baseline="proportional", G=3)
    t = np.linspace(0.5, 8, 9)
    r = hm.baseline_hazard(t, 0, 0) / hm.baseline_hazard(t, 0, 2)
    np.testing.assert_allclose(r, r[0], rtol=1e-12)
    assert P.hazard_logmult[0, 2] == 0.0


def test_cumulative_incidence_sums_to_one_minus_survival():
    hm, _ = hazard_model("weibull")
    grid = np.linspace(0, 9, 10)
    total = sum(hm.cumulative_incidence(grid, l, 1) for l in range(2))
    np.testing.assert_allclose(total, 1 - hm.survival(grid, 1), atol=1e-10)
