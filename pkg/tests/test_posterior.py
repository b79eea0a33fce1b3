import warnings

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from jlcm.data import resolve_bases
from jlcm.estimation import FitResult
from jlcm.model import ModelSpec
from jlcm.optim import CONVERGED
from jlcm.params import ParameterLayout
from jlcm.posterior import (ExternalOutcome, PosteriorClassification, criteria_values, external_covariate_fit,
                            external_outcome_fit, gof_longitudinal, gof_survival, information_criteria,
                            marginal_marker_mean, posterior_probs)
from jlcm.splines import LinkFunction, SplineBasisSpec

from conftest import make_dataset, make_subject, model_dict


# -- criteria ---------------------------------------------------------------
def test_bic_spot_value():
    c = criteria_values(-100.0, 5, 100, np.eye(2)[np.arange(100) % 2])
    assert c["BIC"] == pytest.approx(223.026, abs=1e-3)
    assert c["AIC"] == pytest.approx(210.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 60), st.integers(0, 10_000))
def test_crisp_posteriors(G, N, seed):
    rng = np.random.default_rng(seed)
    probs = np.eye(G)[rng.integers(0, G, N)]
    c = criteria_values(-50.0, 4, N, probs)
    assert c["ICL"] == c["BIC"]
    assert c["entropy"] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 60))
def test_uniform_posteriors(G, N):
    c = criteria_values(-50.0, 4, N, np.full((N, G), 1.0 / G))
    assert c["entropy"] == pytest.approx(0.0, abs=1e-12)
    assert c["ICL"] == pytest.approx(c["BIC"] + 2 * N * np.log(G))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(1, 40), st.integers(0, 10_000))
def test_entropy_bounds_and_icl_penalty(G, N, seed):
    probs = np.random.default_rng(seed).dirichlet(np.ones(G), N)
    c = criteria_values(-50.0, 4, N, probs)
    assert -1e-12 <= c["entropy"] <= 1 + 1e-12
    assert c["ICL"] >= c["BIC"]


def test_single_class_entropy_undefined():
    c = criteria_values(-10.0, 3, 20, np.ones((20, 1)))
    assert np.isnan(c["entropy"]) and c["ICL"] == c["BIC"]


def test_assignment_ties_go_to_lowest_class():
    pc = PosteriorClassification(["a", "b"], np.array([[0.5, 0.5], [0.2, 0.8]]))
    np.testing.assert_array_equal(pc.assigned, [0, 1])
    np.testing.assert_array_equal(pc.counts(), [1, 1])


def test_posteriors_of_toy_fit(toy_fit, toy_dataset):
    pc = posterior_probs(toy_fit, toy_dataset)
    np.testing.assert_allclose(pc.probs.sum(axis=1), 1.0, atol=1e-12)
    tab = pc.table()
    assert np.all(np.diag(tab) >= 0.5)
    c = information_criteria(toy_fit, pc)
    assert c["BIC"] == pytest.approx(-2 * toy_fit.loglik + toy_fit.p * np.log(toy_dataset.N))


# -- goodness of fit --------------------------------------------------------
def _one_class_fit(ds, spec):
    from jlcm.estimation import fit_model
    return fit_model(ds, spec, G=1)


def test_single_class_gof_is_ordinary_means(toy_dataset):
    ds = toy_dataset.subset(range(50))
    spec = ModelSpec.from_dict(model_dict(G=1, causes=2))
    fit = _one_class_fit(ds, spec)
    pc = posterior_probs(fit, ds)
    rows = gof_longitudinal(fit, pc, ds, bin_width=2.0)
    for r in rows:
        vals, subjects = [], set()
        for s in ds.subjects:
            t, v = s.marker("y1")
            sel = np.floor(t / 2.0) == r["bin_start"] / 2.0
            vals.extend(v[sel])
            if sel.any():
                subjects.add(s.id)
        assert r["observed"] == pytest.approx(np.mean(vals), abs=1e-12)
        assert r["n_obs"] == len(vals)
        assert r["weight"] == pytest.approx(len(subjects))
    entry, time, cause = ds.survival_arrays()
    surv = [r for r in gof_survival(fit, pc, ds, n_boot=20) if r["cause"] == "all"]
    assert sum(r["events"] for r in surv) == pytest.approx(np.sum(cause > 0))
    assert sum(r["exposure"] for r in surv) == pytest.approx(np.sum(time - entry))


def test_gof_weights_sum_to_subject_counts(toy_fit, toy_dataset):
    pc = posterior_probs(toy_fit, toy_dataset)
    rows = gof_longitudinal(toy_fit, pc, toy_dataset)
    for marker in ("y1", "y2"):
        for b in {r["bin_start"] for r in rows if r["marker"] == marker}:
            total = sum(r["weight"] for r in rows if r["marker"] == marker and r["bin_start"] == b)
            observed = sum(any(np.floor(s.marker(marker)[0]) == b) for s in toy_dataset.subjects)
            assert total == pytest.approx(observed)
    surv = gof_survival(toy_fit, pc, toy_dataset, n_boot=50, seed=3)
    causes = {r["cause"] for r in surv}
    assert causes == {"all", "1", "2"}
    for r in surv:
        if r["exposure"] > 0 and r["events"] > 0:
            assert r["lo95"] <= r["rate"] <= r["hi95"]


def test_marginal_mean_through_spline_link():
    basis = SplineBasisSpec(2, (2.0, 5.0), 0.0, 10.0)
    link = LinkFunction("isplines", intercept=-1.0, coefficients=np.linspace(0.4, 1.0, basis.n_basis), basis=basis)
    lo, hi = link.transformed_range()
    m, sd = (lo + hi) / 2, (hi - lo) / 10

    def integrand(lam):
        return float(link.invert(np.array([lam]))[0][0]) * stats.norm.pdf(lam, m, sd)

    ref = integrate.quad(integrand, m - 8 * sd, m + 8 * sd, epsabs=1e-10)[0]
    got = marginal_marker_mean(link, np.array([m]), np.array([sd * sd]))[0]
    assert got == pytest.approx(ref, abs=1e-5)


# -- external information ---------------------------------------------------
def _crisp_fit(rng, G=3, n=150):
    """Classes separated by 25 residual SDs, so posteriors are 0/1 in floating point."""
    spec = ModelSpec.from_dict(model_dict(G=G, random=("1",)))
    classes = rng.integers(0, G, n)
    subjects = []
    for i, c in enumerate(classes):
        t = np.arange(4.0)
        y = 25.0 * c + rng.normal(0, 1) + rng.normal(0, 1, 4)
        subjects.append(make_subject(f"s{i:03d}", {"y1": (t, y)}, time=float(rng.uniform(3, 8)),
                                     cause=int(rng.random() < 0.5)))
    ds = make_dataset(subjects)
    bases = resolve_bases(ds, spec)
    layout = ParameterLayout(spec, bases)
    P = layout.unpack(np.ones(layout.p))
    for g in range(G):
        P.beta["d1"][:, g] = [25.0 * g, 0.0]
        P.hazard_base[0][g] = [0.1, 1.0]
    P.xi[:] = 0.0
    P.chol["d1"][:] = [[1.0]]
    P.sigma[:] = 1.0
    fit = FitResult(spec=spec, bases=bases, theta=layout.pack(P), loglik=0.0, status=CONVERGED, iterations=0,
                    N=n)
    return fit, ds, classes


def test_crisp_fit_posteriors_are_exact(rng):
    fit, ds, classes = _crisp_fit(rng)
    pc = posterior_probs(fit, ds)
    np.testing.assert_array_equal(pc.assigned, classes)
    assert np.all(pc.probs[np.arange(ds.N), classes] == 1.0)
    assert pc.probs.sum(axis=1).max() - 1.0 < 1e-15 and np.sort(pc.probs, axis=1)[:, -2].max() < 1e-50


def test_case1_matches_per_class_least_squares(rng):
    fit, ds, classes = _crisp_fit(rng)
    x = rng.normal(size=ds.N)
    slopes = np.array([0.5, -1.0, 2.0])
    y = np.array([1.0, 3.0, -2.0])[classes] + slopes[classes] * x + rng.normal(0, 0.7, ds.N)
    out = ExternalOutcome(tuple(ds.ids), y, {"x": x})
    ext = external_outcome_fit(fit, ds, out, class_specific_effects=True)
    est = dict(zip(ext.names, ext.estimates))
    rss = 0.0
    for g in range(3):
        sel = classes == g
        ols = sm.OLS(y[sel], sm.add_constant(x[sel])).fit()
        assert est[f"mean[class{g + 1}]"] == pytest.approx(ols.params[0], abs=1e-6)
        assert est[f"x[class{g + 1}]"] == pytest.approx(ols.params[1], abs=1e-6)
        rss += ols.ssr
    assert est["sigma"] == pytest.approx(np.sqrt(rss / ds.N), abs=1e-6)
    assert ext.status == CONVERGED and "sd_subject" not in ext.names
    assert any("uncertainty" in n for n in ext.notes)


def test_case2_matches_multinomial_logit_on_assignments(rng):
    fit, ds, classes = _crisp_fit(rng, n=300)
    x = rng.normal(size=ds.N)
    cov = {sid: {"x": float(v)} for sid, v in zip(ds.ids, x)}
    ext = external_covariate_fit(fit, ds, cov)
    G = 3
    code = np.where(classes == G - 1, 0, classes + 1)      # last class as the base category
    ml = sm.MNLogit(code, sm.add_constant(x)).fit(disp=0, method="newton", tol=1e-12, maxiter=200)
    est = dict(zip(ext.names, ext.estimates))
    for g in range(G - 1):
        assert est[f"xi[class{g + 1}].intercept"] == pytest.approx(ml.params[0, g], abs=1e-4)
        assert est[f"xi[class{g + 1}].x"] == pytest.approx(ml.params[1, g], abs=1e-4)
    se = np.sqrt(np.diag(ext.variance))
    np.testing.assert_allclose(se, np.asarray(ml.bse).T.ravel(), rtol=1e-3)


def test_theta_is_untouched_and_repeated_rows(toy_fit, toy_dataset, rng):
    before = toy_fit.theta.copy()
    ids = [sid for sid in toy_dataset.ids for _ in range(2)]
    out = ExternalOutcome(tuple(ids), rng.normal(size=len(ids)))
    ext = external_outcome_fit(toy_fit, toy_dataset, out)
    assert "sd_subject" in ext.names
    np.testing.assert_array_equal(toy_fit.theta, before)
    np.testing.assert_array_equal(ext.theta_hat, before)


def test_external_errors(toy_fit, toy_dataset):
    with pytest.raises(ValueError, match="not in the dataset"):
        external_outcome_fit(toy_fit, toy_dataset, ExternalOutcome(("nobody",), np.array([1.0])))
    with pytest.raises(ValueError):
        external_covariate_fit(toy_fit, toy_dataset, {})


def test_case2_warns_when_membership_covariates_are_replaced(rng):
    fit, ds, classes = _crisp_fit(rng, G=2, n=60)
    d = fit.spec.to_dict()
    d["class_membership"] = ["x"]
    spec = ModelSpec.from_dict(d)
    layout = ParameterLayout(spec, fit.bases)
    fit2 = FitResult(spec=spec, bases=fit.bases, theta=np.r_[fit.theta[:1], 0.0, fit.theta[1:]], loglik=0.0,
                     status=CONVERGED, iterations=0, N=ds.N)
    assert layout.names[1] == "xi[class1].x"
    ds2 = ds.with_covariates({sid: {"x": 0.0} for sid in ds.ids})
    with pytest.warns(UserWarning, match="replaced"):
        external_covariate_fit(fit2, ds2, {sid: {"z": float(v)} for sid, v in zip(ds.ids, rng.normal(size=ds.N))})


def test_case2_needs_classes(toy_dataset):
    spec = ModelSpec.from_dict(model_dict(G=1, causes=2))
    fit = _one_class_fit(toy_dataset.subset(range(30)), spec)
    with pytest.raises(ValueError, match="class structure"):
        external_covariate_fit(fit, toy_dataset.subset(range(30)), {"s001": {"x": 1.0}})


def test_null_external_effects_within_two_se(toy_fit, toy_dataset):
    from jlcm.likelihood import LikelihoodEngine
    engine = LikelihoodEngine(toy_dataset, toy_fit.spec, toy_fit.bases)
    rng = np.random.default_rng(77)
    hits1 = hits2 = hits3 = 0
    R = 50
    for _ in range(R):
        x = rng.normal(size=toy_dataset.N)
        y = rng.normal(size=toy_dataset.N)
        e1 = external_outcome_fit(toy_fit, toy_dataset, ExternalOutcome(tuple(toy_dataset.ids), y, {"x": x}),
                                  engine=engine)
        se1 = np.sqrt(np.diag(e1.variance))
        j = e1.names.index("x")
        hits1 += abs(e1.estimates[j]) <= 2 * se1[j]
        c = np.zeros(len(e1.names))
        c[0], c[1] = 1.0, -1.0
        hits2 += abs(c @ e1.estimates) <= 2 * np.sqrt(c @ e1.variance @ c)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            e2 = external_covariate_fit(toy_fit, toy_dataset, {s: {"z": float(v)} for s, v in zip(toy_dataset.ids, x)},
                                        engine=engine)
        k = e2.names.index("xi[class1].z")
        hits3 += abs(e2.estimates[k]) <= 2 * np.sqrt(e2.variance[k, k])
    assert hits1 >= 0.9 * R and hits2 >= 0.9 * R and hits3 >= 0.9 * R
