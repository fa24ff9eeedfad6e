import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmtmm.data import Dataset
from gmtmm.design import MtmmDesign
from gmtmm.engine import (FitControls, canonicalize, direct_fit, em_fit, fit, hybrid_fit, label_variants,
                          marginal_loglik, multistart, posterior_cells, score, simulate, start_values,
                          unit_loglik)
from gmtmm.errors import ConfigError, DataError
from gmtmm.families import CensoredGaussian, CumulativeProbit, Gaussian
from gmtmm.identify import random_coordinates
from gmtmm.params import ParameterSet, parameterization

from conftest import random_small_design
from oracles import brute_force, fd_gradient


def _random_case(seed, n=8):
    rng = np.random.default_rng(seed)
    d = random_small_design(rng)
    ps = parameterization(d).params(random_coordinates(d, rng))
    data = simulate(ps, d, n, seed=seed)
    mask = rng.random(data.y.shape) > 0.2
    mask[np.arange(n), rng.integers(0, d.n_vars, n)] = True
    return d, ps, Dataset(data.y, mask, rng.uniform(0.5, 2.0, n))


@pytest.mark.parametrize("seed", range(20))
def test_likelihood_and_posterior_match_enumeration(seed):
    d, ps, data = _random_case(seed)
    ll, post = brute_force(ps, d, data)
    assert marginal_loglik(ps, d, data) == pytest.approx(ll, abs=1e-10, rel=1e-12)
    np.testing.assert_allclose(posterior_cells(ps, d, data), post, atol=1e-10)


@given(st.integers(0, 10_000))
def test_posterior_rows_sum_to_one(seed):
    d, ps, data = _random_case(seed, n=5)
    post = posterior_cells(ps, d, data)
    np.testing.assert_allclose(post.sum(1), 1.0, atol=1e-12)
    assert np.all(post >= 0)


@given(st.integers(0, 10_000))
def test_unit_loglik_sums_to_weighted_total(seed):
    d, ps, data = _random_case(seed, n=6)
    assert np.sum(data.weights * unit_loglik(ps, d, data)) == pytest.approx(marginal_loglik(ps, d, data), rel=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_score_matches_finite_differences(seed):
    d, ps, data = _random_case(seed, n=10)
    par = parameterization(d)
    u = par.to_free(ps.values)
    g = score(ps, d, data)
    fd = fd_gradient(lambda x: marginal_loglik(par.params(x), d, data), u)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)


def test_missing_columns_do_not_contribute():
    d = MtmmDesign.crossed(2, 1, Gaussian(), trait_categories=2, method_categories=1)
    ps = parameterization(d).params(random_coordinates(d, np.random.default_rng(0))).replace({"phi[1,2]": 0.0})
    data = simulate(ps, d, 5, seed=1)
    only_first = Dataset(data.y[:, :1], None)
    d1 = MtmmDesign.crossed(1, 1, Gaussian(), trait_categories=2, method_categories=1)
    masked = Dataset(data.y, np.column_stack([np.ones(5, bool), np.zeros(5, bool)]))
    p1 = ParameterSet.from_dict(d1, {k: v for k, v in ps.as_dict().items() if "1,1" in k or k.startswith("alpha[1")})
    assert marginal_loglik(ps, d, masked) == pytest.approx(marginal_loglik(p1, d1, only_first), abs=1e-12)


def test_loglik_invariant_to_relabeling():
    d = MtmmDesign.crossed(2, 2, [Gaussian(), CumulativeProbit(n_categories=3), CensoredGaussian(0.0), Gaussian()],
                           trait_categories=3, method_categories=2, n_components=2, mixture_policy="free")
    rng = np.random.default_rng(3)
    ps = parameterization(d).params(random_coordinates(d, rng))
    data = simulate(ps, d, 30, seed=2)
    base = marginal_loglik(ps, d, data)
    variants = list(label_variants(ps, d))
    assert len(variants) == 2 ** 4 * 2
    for v in variants:
        assert marginal_loglik(v, d, data) == pytest.approx(base, abs=1e-9)
    np.testing.assert_allclose(canonicalize(variants[-1], d, reference=ps).values, ps.values, atol=1e-12)


def test_unit_without_observations_rejected():
    d = MtmmDesign.crossed(1, 1, Gaussian(), trait_categories=2, method_categories=1)
    ps = start_values(d, Dataset(np.array([[1.0], [2.0]])), jitter=0)
    with pytest.raises(DataError):
        posterior_cells(ps, d, Dataset(np.array([[np.nan], [1.0]])))


def test_extreme_outlier_stays_finite_in_log_space():
    d = MtmmDesign.crossed(1, 1, Gaussian(), trait_categories=2, method_categories=1)
    ps = ParameterSet.from_dict(d, {"sigma[1,1]": 1e-3, "lambda[1,1]": 1.0})
    ll = marginal_loglik(ps, d, Dataset(np.array([[1e6]])))
    assert np.isfinite(ll) and ll < -1e17


def test_em_never_decreases_and_matches_direct():
    d = MtmmDesign.crossed(2, 2, Gaussian(), trait_categories=2, method_categories=2)
    truth = ParameterSet.from_dict(d, {"lambda[1,1]": 2.0, "lambda[2,1]": 2.0, "lambda[1,2]": 1.5,
                                       "lambda[2,2]": 1.5, "gamma[1,1]": 0.8, "gamma[2,1]": 0.8,
                                       "gamma[1,2]": -0.5, "gamma[2,2]": -0.5, "phi[1,2]": 1.0,
                                       "sigma[1,1]": 0.5, "sigma[2,1]": 0.5, "sigma[1,2]": 0.5,
                                       "sigma[2,2]": 0.5})
    data = simulate(truth, d, 500, seed=4)
    st0 = start_values(d, data, seed=1)
    em = em_fit(data, d, st0, FitControls(method="em", tol=1e-12, param_tol=1e-7, max_iter=5000))
    assert em.max_decrease <= 1e-10
    assert em.converged
    di = direct_fit(data, d, em.params, FitControls(method="direct"))
    assert di.grad_norm < 1e-5
    assert di.loglik == pytest.approx(em.loglik, abs=1e-4)
    par = parameterization(d)
    fd = fd_gradient(lambda x: marginal_loglik(par.params(x), d, data), par.to_free(di.params.values))
    assert np.max(np.abs(fd)) < 1e-4


def test_hybrid_fit_recovers_truth_and_information_is_positive_definite():
    d = MtmmDesign.crossed(2, 1, CensoredGaussian(0.0), trait_categories=3, method_categories=1)
    truth = ParameterSet.from_dict(d, {"tau[1,1]": 0.2, "lambda[1,1]": 2.0, "sigma[1,1]": 0.4,
                                       "tau[2,1]": -0.2, "lambda[2,1]": 1.5, "sigma[2,1]": 0.3,
                                       "phi[1,2]": 2.0})
    data = simulate(truth, d, 3000, seed=5)
    f = hybrid_fit(data, d, truth)
    assert f.converged and f.method == "hybrid"
    assert np.all(np.linalg.eigvalsh(f.information) > 0)
    se = np.sqrt(np.diag(f.jacobian @ np.linalg.inv(f.information) @ f.jacobian.T))
    z = (f.params.values[parameterization(d).free_index] - truth.values[parameterization(d).free_index]) / se
    assert np.max(np.abs(z)) < 4.5


def test_fit_is_deterministic_given_seed():
    d = MtmmDesign.crossed(2, 1, Gaussian(), trait_categories=2, method_categories=1)
    data = simulate(ParameterSet.from_dict(d, {"lambda[1,1]": 2, "lambda[2,1]": 2}), d, 200, seed=0)
    a = multistart(data, d, n_starts=2, seed=7, controls=FitControls(information=False)).best
    b = multistart(data, d, n_starts=2, seed=7, controls=FitControls(information=False)).best
    assert a.params == b.params and a.loglik == b.loglik


def test_simulate_deterministic_and_in_support():
    d = MtmmDesign.crossed(2, 2, [CensoredGaussian(0.0), CumulativeProbit(n_categories=4), Gaussian(), Gaussian()])
    ps = parameterization(d).params(random_coordinates(d, np.random.default_rng(1)))
    a, b = simulate(ps, d, 300, seed=9), simulate(ps, d, 300, seed=9)
    assert a == b
    a.check(d)
    assert set(np.unique(a.y[:, 1])) <= {0.0, 1.0, 2.0, 3.0}
    assert np.all(a.y[:, 0] >= 0)


def test_unknown_fitter_is_a_config_error():
    d = MtmmDesign.crossed(1, 1, Gaussian(), trait_categories=2, method_categories=1)
    with pytest.raises(ConfigError):
        fit(Dataset(np.arange(5.0)[:, None]), d, controls=FitControls(method="newton"))
