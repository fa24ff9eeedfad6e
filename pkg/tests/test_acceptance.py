"""Acceptance criteria 1-8. Each test records one PASS/FAIL line."""
import numpy as np
import pytest

from gmtmm.design import MtmmDesign
from gmtmm.engine import FitControls, direct_fit, em_fit, marginal_loglik, posterior_cells, simulate
from gmtmm.identify import jacobian_rank_scan
from gmtmm.linear import (implied_cross_correlation, implied_moments, random_linear_params,
                          reliability_method_effects)
from gmtmm.metrics import implied_quality, linear_equivalent, model_grid
from gmtmm.params import ParameterSet, parameterization
from gmtmm.presets import (LINKED_INCOME_BIAS_2000, linked_income_design, linked_income_truth,
                           selection_design, selection_truth)
from gmtmm.results import aic_bic
from gmtmm.study import StudySpec, run_study
from gmtmm.families import Gaussian
from gmtmm.identify import random_coordinates

from conftest import record_acceptance
from oracles import brute_force, fd_gradient
from test_engine import _random_case

MEASUREMENT = ("tau[", "lambda[", "gamma[", "sigma[")


def _cor_and_se(x, y):
    """Sample correlation and its influence-function Monte Carlo SE (no normality assumed)."""
    zx = (x - x.mean()) / x.std()
    zy = (y - y.mean()) / y.std()
    r = float(np.mean(zx * zy))
    psi = zx * zy - 0.5 * r * (zx ** 2 + zy ** 2)
    return r, float(psi.std() / np.sqrt(len(x)))


def test_criterion_1_aic_bic():
    got = [aic_bic(-5060.0, 38, 2284), aic_bic(-4758.3, 40, 2284)]
    want = [(10195.9, 10413.8), (9596.6, 9825.9)]
    err = float(np.max(np.abs(np.array(got) - np.array(want))))
    assert record_acceptance(1, err <= 0.2, f"max |AIC/BIC error| = {err:.3f} (tolerance 0.2)")


@pytest.fixture(scope="module")
def linked_income_study():
    spec = StudySpec(linked_income_truth(), linked_income_design(), (200, 2000), R=200, seed=0)
    return run_study(spec, keep_replicates=False)


@pytest.mark.slow
def test_criterion_2_linked_income_recovery(linked_income_study):
    r = linked_income_study
    i2, i0 = r.sample_sizes.index(2000), r.sample_sizes.index(200)
    meas = [j for j, n in enumerate(r.names) if n.startswith(MEASUREMENT)]
    ref = np.array([abs(LINKED_INCOME_BIAS_2000[r.names[j]]) for j in meas])
    worst = float(np.max(np.abs(r.bias[i2, meas]) / (2 * ref + 3 * r.mc_se[i2, meas])))
    lo, hi = float(np.min(r.ratio[i2])), float(np.max(r.ratio[i2]))
    a = r.names.index("alpha[2,1]")
    b200, b2000 = float(r.bias[i0, a]), float(r.bias[i2, a])
    ok_a, ok_b, ok_c = worst <= 1.0, 0.85 <= lo and hi <= 1.15, b200 > 0 and b200 > b2000
    ok = ok_a and ok_b and ok_c and sum(r.failures) == 0
    assert record_acceptance(2, ok, f"(a) max |bias|/limit {worst:.2f}; (b) se/sd in [{lo:.3f}, {hi:.3f}]; "
                                    f"(c) alpha[2,1] bias {b200:.3f} (n=200) vs {b2000:.3f} (n=2000); "
                                    f"failures {r.failures}")


def test_criterion_3_oracle():
    worst = 0.0
    for seed in range(20):
        d, ps, data = _random_case(seed)
        assert d.n_cells <= 100 and data.n <= 10
        ll, post = brute_force(ps, d, data)
        worst = max(worst, abs(marginal_loglik(ps, d, data) - ll),
                    float(np.max(np.abs(posterior_cells(ps, d, data) - post))))
    assert record_acceptance(3, worst <= 1e-10, f"20 designs, max deviation {worst:.2e} (tolerance 1e-10)")


@pytest.mark.slow
def test_criterion_4_em_ascent_and_stationarity(linked_income_study):
    decrease = linked_income_study.max_em_decrease
    for seed in range(20):
        d, ps, data = _random_case(seed, n=10)
        # ten units let some variances collapse; trial steps there overflow harmlessly
        with np.errstate(all="ignore"):
            f = em_fit(data, d, ps, FitControls(method="em", max_iter=300, information=False))
        assert np.isfinite(f.loglik)
        decrease = max(decrease, f.max_decrease)
    dg = MtmmDesign.crossed(2, 2, Gaussian(), trait_categories=2, method_categories=2)
    tg = ParameterSet.from_dict(dg, {"lambda[1,1]": 2.0, "lambda[2,1]": 2.0, "lambda[1,2]": 1.5,
                                     "lambda[2,2]": 1.5, "gamma[1,1]": 0.8, "gamma[2,1]": 0.8,
                                     "gamma[1,2]": -0.5, "gamma[2,2]": -0.5, "phi[1,2]": 1.0,
                                     "sigma[1,1]": 0.5, "sigma[2,1]": 0.5, "sigma[1,2]": 0.5,
                                     "sigma[2,2]": 0.5})
    grads = []
    for truth, d, n in [(linked_income_truth(), linked_income_design(), 1000), (tg, dg, 800)]:
        data = simulate(truth, d, n, seed=5)
        f = direct_fit(data, d, truth, FitControls(method="direct", information=False))
        par = parameterization(d)
        # tiny register scales give large third derivatives; Richardson removes the O(h^2) error
        fd = fd_gradient(lambda x: marginal_loglik(par.params(x), d, data), par.to_free(f.params.values),
                         h=1e-5, richardson=True)
        grads.append(float(np.max(np.abs(fd))))
    ok = decrease <= 1e-10 and max(grads) < 1e-5
    assert record_acceptance(4, ok, f"max EM decrease {decrease:.1e} (linked-income study + 20 oracle fits); "
                                    f"direct-fit FD gradient max-norms {', '.join(f'{g:.1e}' for g in grads)}")


def test_criterion_5_attenuation_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        lp = random_linear_params(rng, 3, 2)
        _, S = implied_moments(lp)
        R = S / np.sqrt(np.outer(np.diag(S), np.diag(S)))
        for a, (t, m) in enumerate(lp.layout):
            for b, (t2, m2) in enumerate(lp.layout):
                if t != t2:
                    worst = max(worst, abs(implied_cross_correlation(lp, (t, m), (t2, m2)) - R[a, b]))
    z_max, N = 0.0, 1_000_000
    for k in range(10):
        lp = random_linear_params(rng, 3, 2)
        g = np.random.default_rng(100 + k)
        eta = g.multivariate_normal(np.zeros(3), lp.cov_eta, size=N)
        xi = g.normal(size=(N, 2)) * np.sqrt(lp.var_xi)
        y = lp.tau + eta @ lp.Lambda.T + xi @ lp.Gamma.T + g.normal(size=(N, lp.n_vars)) * np.sqrt(lp.var_eps)
        rel = reliability_method_effects(lp).reliability
        for j, (t, m) in enumerate(lp.layout):
            r, se = _cor_and_se(y[:, j], eta[:, t - 1])
            z_max = max(z_max, abs(r - rel[j]) / se)
    ok = worst <= 1e-12 and z_max <= 3
    assert record_acceptance(5, ok, f"identity max error {worst:.1e} (100 sets); "
                                    f"Monte Carlo max |z| {z_max:.2f} over 60 coefficients (limit 3)")


def test_criterion_6_identification_verdicts():
    one = jacobian_rank_scan(MtmmDesign.linear(1, 1))
    final = jacobian_rank_scan(MtmmDesign.linear(3, 2, method_factors=(True, False)))
    ok = (all(r < one.n_params for r in one.ranks) and final.n_points == 20
          and all(r == final.n_params for r in final.ranks))
    assert record_acceptance(6, ok, f"1x1 ranks {sorted(set(one.ranks))} of {one.n_params}; "
                                    f"3x2 without register factor ranks {sorted(set(final.ranks))} "
                                    f"of {final.n_params} at {final.n_points} points")


@pytest.mark.slow
def test_criterion_7_model_selection():
    truth, design = selection_truth(), selection_design()
    controls = FitControls(information=False)
    picks = []
    for rep in range(50):
        data = simulate(truth, design, 2000, seed=10_000 + rep)
        g = model_grid(data, design, [2, 3, 4], [1, 2], controls=controls, n_starts=2, seed=rep)
        row = g.best()
        picks.append((row["K"], row["S"]))
    share = picks.count((3, 2)) / len(picks)
    others = sorted({p for p in picks if p != (3, 2)})
    assert record_acceptance(7, share >= 0.9, f"(3, 2) selected in {share:.0%} of 50 replications "
                                              f"(other picks: {others or 'none'})")


def test_criterion_8_quality_substitute():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        d = MtmmDesign.crossed(2, 2, Gaussian(), trait_categories=int(rng.integers(2, 5)), method_categories=2)
        ps = parameterization(d).params(random_coordinates(d, rng))
        q1, q2 = implied_quality(ps, d), reliability_method_effects(linear_equivalent(ps, d))
        worst = max(worst, float(np.max(np.abs(q1.reliability - q2.reliability))),
                    float(np.max(np.abs(q1.method_effect - q2.method_effect))))
    truth, d = linked_income_truth(), linked_income_design()
    data, lat = simulate(truth, d, 1_000_000, seed=2, return_latent=True)
    q = implied_quality(truth, d)
    z_max = 0.0
    for j, v in enumerate(d.variables):
        trait = d.trait_scores(v.trait)[lat["trait"][:, v.trait - 1]]
        r, se = _cor_and_se(data.y[:, j], trait)
        z_max = max(z_max, abs(r - q.reliability[j]) / se)
        if d.method_categories[v.method - 1] > 1:
            meth = d.method_scores(v.method)[lat["method"][:, v.method - 1]]
            r, se = _cor_and_se(data.y[:, j], meth)
            z_max = max(z_max, abs(r - q.method_effect[j]) / se)
    ok = worst <= 1e-8 and z_max <= 3
    assert record_acceptance(8, ok, f"Gaussian special cases max error {worst:.1e}; "
                                    f"linked-income model Monte Carlo max |z| {z_max:.2f} (limit 3)")
