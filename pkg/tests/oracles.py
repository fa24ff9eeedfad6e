"""Independent reference implementations used by the tests.

Everything here is written directly from the model definition with
scipy.stats and explicit loops over latent cells, sharing no code with the
library's likelihood engine.
"""
import itertools

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from gmtmm.families import CensoredGaussian, CumulativeProbit, Gaussian, Multinomial


def _scores(n):
    return np.zeros(1) if n == 1 else np.linspace(0.0, 1.0, n)


def cell_log_prior(p, design, kt, lm, s):
    """log P(trait combo, method classes, component) from named parameters."""
    T, M = design.n_traits, design.n_methods
    Ks, Ls = design.trait_categories, design.method_categories

    def potential(combo):
        out = 0.0
        for t in range(T):
            if combo[t] < Ks[t] - 1:
                out += p[f"alpha[{t + 1},{combo[t] + 1}]"]
        if design.associations:
            for a in range(T):
                for b in range(a + 1, T):
                    out += p[f"phi[{a + 1},{b + 1}]"] * _scores(Ks[a])[combo[a]] * _scores(Ks[b])[combo[b]]
        return out

    all_combos = list(itertools.product(*[range(K) for K in Ks]))
    lp = potential(kt) - logsumexp([potential(c) for c in all_combos])
    for m in range(M):
        pot = [p[f"kappa[{m + 1},{l + 1}]"] if l < Ls[m] - 1 else 0.0 for l in range(Ls[m])]
        lp += pot[lm[m]] - logsumexp(pot)
    pot = [0.0] + [p[f"logit[{k}]"] for k in range(2, design.n_components + 1)]
    return lp + pot[s] - logsumexp(pot)


def response_logpdf(p, design, j, y, kt, lm, s):
    v = design.variables[j]
    nm = design.measurement_names(j, s + 1)
    x_eta = _scores(design.trait_categories[v.trait - 1])[kt[v.trait - 1]]
    x_xi = _scores(design.method_categories[v.method - 1])[lm[v.method - 1]]
    fam = v.family
    if isinstance(fam, (Gaussian, CensoredGaussian)):
        nu = p[nm["tau"]] + p[nm["lambda"]] * x_eta + p[nm["gamma"]] * x_xi
        sd = p[nm["sigma"]]
        if isinstance(fam, CensoredGaussian) and y <= fam.lower:
            return norm.logcdf((fam.lower - nu) / sd)
        return norm.logpdf(y, nu, sd)
    if isinstance(fam, CumulativeProbit):
        nu = p[nm["lambda"]] * x_eta + p[nm["gamma"]] * x_xi
        thr = [-np.inf] + [p[n] for n in nm["thr"]] + [np.inf]
        k = int(y)
        return np.log(norm.cdf(thr[k + 1] - nu) - norm.cdf(thr[k] - nu))
    if isinstance(fam, Multinomial):
        pred = [0.0] + [p[a] + p[b] * x_eta + p[c] * x_xi
                        for a, b, c in zip(nm["tau"], nm["lambda"], nm["gamma"])]
        return pred[int(y)] - logsumexp(pred)
    raise TypeError(fam)


def brute_force(params, design, data):
    """(weighted log-likelihood, posterior N x cells) by explicit enumeration."""
    p = params.as_dict()
    cells = list(design.cells())
    logj = np.zeros((data.n, len(cells)))
    for c, cell in enumerate(cells):
        lp = cell_log_prior(p, design, cell.trait_categories, cell.method_categories, cell.component)
        for i in range(data.n):
            acc = lp
            for j in range(design.n_vars):
                if data.mask[i, j]:
                    acc += response_logpdf(p, design, j, data.y[i, j], cell.trait_categories,
                                           cell.method_categories, cell.component)
            logj[i, c] = acc
    unit = logsumexp(logj, axis=1)
    return float(np.sum(data.weights * unit)), np.exp(logj - unit[:, None])


def fd_gradient(f, x, h=1e-6, richardson=False):
    """Central differences; ``richardson`` cancels the O(h^2) term using steps h and h/2."""
    if richardson:
        return (4.0 * fd_gradient(f, x, h / 2) - fd_gradient(f, x, h)) / 3.0
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h * (1.0 + abs(x[k]))
        g[k] = (f(x + e) - f(x - e)) / (2 * e[k])
    return g
