import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmtmm.data import Dataset
from gmtmm.design import MtmmDesign
from gmtmm.engine import FitControls, hybrid_fit, simulate
from gmtmm.errors import SingularInformationError
from gmtmm.families import CensoredGaussian, Gaussian
from gmtmm.identify import random_coordinates
from gmtmm.linear import fit_ml, implied_moments, random_linear_params, reliability_method_effects
from gmtmm.metrics import (aic_bic, bootstrap_se, embed_components, implied_quality, information_se,
                           linear_equivalent, model_grid, quality, quality_intervals)
from gmtmm.params import ParameterSet, parameterization
from gmtmm.results import FitResult

from conftest import random_small_design


def _fake_fit(info, names=("a",)):
    return FitResult(params=None, loglik=0.0, n_iter=0, converged=True, grad_norm=0.0, n_params=len(names),
                     n_obs=10, free_names=tuple(names), information=np.asarray(info, float),
                     jacobian=np.eye(len(names)))


def test_aic_bic_formula():
    aic, bic = aic_bic(-100.0, 3, 50)
    assert aic == 206.0 and bic == pytest.approx(200 + 3 * np.log(50))
    with pytest.raises(ValueError):
        aic_bic(0.0, -1, 10)


def test_information_se_of_diagonal():
    se = information_se(_fake_fit(np.diag([4.0, 4.0]), ("a", "b")))
    assert se == {"a": 0.5, "b": 0.5}


def test_singular_information_names_null_direction():
    with pytest.raises(SingularInformationError) as exc:
        information_se(_fake_fit([[1.0, 1.0], [1.0, 1.0]], ("a", "b")))
    D = exc.value.directions
    assert D.shape == (2, 1)
    np.testing.assert_allclose(np.abs(D[:, 0]), [np.sqrt(0.5)] * 2)
    assert exc.value.names == ("a", "b")


@given(st.integers(0, 10_000))
def test_implied_quality_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    d = random_small_design(rng)
    ps = parameterization(d).params(random_coordinates(d, rng))
    q = implied_quality(ps, d)
    assert np.all(np.abs(q.reliability) <= 1) and np.all(np.abs(q.method_effect) <= 1)
    for j, v in enumerate(d.variables):
        if d.trait_categories[v.trait - 1] == 1:
            assert q.reliability[j] == 0.0
        if d.method_categories[v.method - 1] == 1:
            assert q.method_effect[j] == 0.0


@given(st.integers(0, 10_000))
def test_implied_quality_equals_linear_on_gaussian_designs(seed):
    rng = np.random.default_rng(seed)
    d = MtmmDesign.crossed(2, 2, Gaussian(), trait_categories=int(rng.integers(2, 4)), method_categories=2)
    ps = parameterization(d).params(random_coordinates(d, rng))
    q1, q2 = implied_quality(ps, d), reliability_method_effects(linear_equivalent(ps, d))
    np.testing.assert_allclose(q1.reliability, q2.reliability, atol=1e-8)
    np.testing.assert_allclose(q1.method_effect, q2.method_effect, atol=1e-8)


def test_linear_equivalent_reproduces_moments():
    d = MtmmDesign.crossed(2, 2, Gaussian(), trait_categories=3, method_categories=2)
    ps = parameterization(d).params(random_coordinates(d, np.random.default_rng(4)))
    data = simulate(ps, d, 400_000, seed=1)
    mu, S = implied_moments(linear_equivalent(ps, d))
    np.testing.assert_allclose(data.y.mean(0), mu, atol=0.02 * np.sqrt(np.diag(S)).max())
    np.testing.assert_allclose(np.cov(data.y.T), S, atol=0.03 * np.diag(S).max())
    dc = MtmmDesign.crossed(1, 1, CensoredGaussian(0.0))
    with pytest.raises(ValueError):
        linear_equivalent(parameterization(dc).params(np.zeros(parameterization(dc).n_free)), dc)


def _gaussian_linear_case(n=2000, seed=1):
    d = MtmmDesign.linear(3, 2, method_factors=(True, False))
    lp = random_linear_params(np.random.default_rng(0), 3, 2, (True, False))
    mu, S = implied_moments(lp)
    return d, Dataset(np.random.default_rng(seed).multivariate_normal(mu, S, size=n))


def test_bootstrap_matches_information_se_on_gaussian_model():
    d, data = _gaussian_linear_case()
    f = fit_ml(data, d)
    b = bootstrap_se(data, d, B=200, seed=0, estimate=f)
    se = information_se(f)
    ratio = np.array([se[n] for n in b.names]) / b.se
    assert not b.failures and not b.unreliable
    assert np.all((ratio > 0.75) & (ratio < 1.25)), ratio
    assert np.all((b.lower <= b.estimate) & (b.estimate <= b.upper))


def test_bootstrap_deterministic_and_weighted():
    d, data = _gaussian_linear_case(n=300)
    f = fit_ml(data, d)
    a = bootstrap_se(data, d, B=5, seed=3, estimate=f)
    b = bootstrap_se(data, d, B=5, seed=3, estimate=f)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    c = bootstrap_se(data, d, B=5, seed=4, estimate=f)
    assert not np.array_equal(a.replicates, c.replicates)
    # all weight on the first 100 units: replicates only see those units
    w = np.r_[np.ones(100), np.zeros(200)]
    sub = bootstrap_se(data.with_weights(w), d, B=3, seed=0)
    assert sub.B == 3 and np.all(np.isfinite(sub.se))
    with pytest.raises(ValueError):
        bootstrap_se(data, d, B=1)


def test_bootstrap_on_discrete_design_and_failure_accounting():
    d = MtmmDesign.crossed(2, 1, CensoredGaussian(0.0), trait_categories=2, method_categories=1)
    truth = ParameterSet.from_dict(d, {"tau[1,1]": 0.2, "lambda[1,1]": 2.0, "sigma[1,1]": 0.5,
                                       "tau[2,1]": 0.1, "lambda[2,1]": 1.5, "sigma[2,1]": 0.5, "phi[1,2]": 1.0})
    data = simulate(truth, d, 400, seed=0)
    calls = {"n": 0}

    def flaky(boot, start, seed):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise SingularInformationError("forced")
        return hybrid_fit(boot, d, start, FitControls(information=False))

    est = hybrid_fit(data, d, truth, FitControls(information=False))
    b = bootstrap_se(data, d, fitter=flaky, B=6, seed=0, estimate=est)
    assert len(b.failures) == 3 and b.unreliable and b.flags
    assert b.quality.source == "bootstrap"


def test_quality_intervals_contain_estimate():
    d, data = _gaussian_linear_case()
    f = fit_ml(data, d)
    q = quality_intervals(f)
    assert np.all(q.reliability_lower <= q.reliability) and np.all(q.reliability <= q.reliability_upper)
    assert q.source.endswith("+delta")
    np.testing.assert_allclose(q.reliability, quality(f.params, d).reliability)


def test_embed_components_keeps_first_component_likelihood_close():
    d1 = MtmmDesign.crossed(2, 1, Gaussian(), trait_categories=2, method_categories=1)
    ps = ParameterSet.from_dict(d1, {"lambda[1,1]": 2.0, "lambda[2,1]": 2.0, "sigma[1,1]": 0.5, "sigma[2,1]": 0.5})
    data = simulate(ps, d1, 500, seed=0)
    d2 = d1.with_sizes(n_components=2)
    emb = embed_components(ps, d1, d2, data, weight=1e-6)
    from gmtmm.engine import marginal_loglik
    assert marginal_loglik(emb, d2, data) == pytest.approx(marginal_loglik(ps, d1, data), abs=0.01)


def test_model_grid_records_failures_and_selects():
    d = MtmmDesign.crossed(2, 1, Gaussian(), trait_categories=2, method_categories=1)
    ps = ParameterSet.from_dict(d, {"lambda[1,1]": 3.0, "lambda[2,1]": 3.0, "sigma[1,1]": 0.5, "sigma[2,1]": 0.5})
    data = simulate(ps, d, 600, seed=0)
    g = model_grid(data, d, [0, 1, 2], [1, 2], n_starts=1, seed=0)
    bad = [r for r in g.rows if r["K"] == 0]
    assert len(bad) == 2 and all(r["error"] for r in bad)
    best = g.best()
    assert (best["K"], best["S"]) == (2, 1)
    ll = {(r["K"], r["S"]): r["loglik"] for r in g.rows if not r["error"]}
    assert ll[(2, 2)] >= ll[(2, 1)] - 1e-6
    assert "failed" in g.table() and g.to_dict()["selected"] == g.selected
    with pytest.raises(ValueError):
        model_grid(data, d, [], [1])
