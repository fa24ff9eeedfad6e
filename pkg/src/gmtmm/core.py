"""Latent-cell prior, linear predictors and per-variable response terms.

:class:`CompiledModel` precomputes index maps for one design so the
likelihood engine can evaluate priors and conditional densities on the full
cell grid with array operations.
"""
from __future__ import annotations

import itertools

import numpy as np

from .design import LatentCell, MtmmDesign, _flatten
from .errors import ConfigError
from .families import CumulativeProbit, Multinomial
from .params import ParameterSet, parameterization


def logsumexp(a):
    m = np.max(a)
    return m + np.log(np.sum(np.exp(a - m)))


class _Var:
    """Index bookkeeping for one observed variable."""

    def __init__(self, design, j, idx):
        v = design.variables[j]
        self.j = j
        self.t = v.trait - 1
        self.m = v.method - 1
        self.family = v.family
        self.s_eta = design.trait_scores(v.trait)
        self.s_xi = design.method_scores(v.method)
        self.K = len(self.s_eta)
        self.L = len(self.s_xi)
        self.comps = []
        for s in range(1, design.n_components + 1):
            nm = design.measurement_names(j, s)
            self.comps.append({k: np.array([idx[n] for n in _flatten(x)]) if isinstance(x, list)
                               else idx[x] for k, x in nm.items()})

    @property
    def kind(self):
        if isinstance(self.family, CumulativeProbit):
            return "ordinal"
        if isinstance(self.family, Multinomial):
            return "nominal"
        return "continuous"

    def predictor(self, values, s):
        """Predictor on the (K, L) grid (trailing category axis for nominal)."""
        c = self.comps[s]
        se, sx = self.s_eta[:, None], self.s_xi[None, :]
        if self.kind == "continuous":
            return values[c["tau"]] + values[c["lambda"]] * se + values[c["gamma"]] * sx
        if self.kind == "ordinal":
            return values[c["lambda"]] * se + values[c["gamma"]] * sx
        C = self.family.n_categories
        pred = np.zeros((self.K, self.L, C))
        pred[..., 1:] = (values[c["tau"]] + values[c["lambda"]] * se[..., None]
                         + values[c["gamma"]] * sx[..., None])
        return pred

    def terms(self, values, s, y, grad=True):
        """Log-density (n, K, L) and, with ``grad``, a closure contracting
        weights W (n, K, L) into a natural-scale gradient dict {index: value}."""
        c = self.comps[s]
        K, L = self.K, self.L
        n = len(y)
        yc = y[:, None]
        pred = self.predictor(values, s)
        if self.kind == "continuous":
            sigma = values[c["sigma"]]
            if not grad:
                return self.family.logpdf(yc, pred.ravel(), sigma).reshape(n, K, L), None
            logf, dnu, dsig = self.family.terms(yc, pred.ravel(), sigma)

            def contract(W):
                Wf = W.reshape(n, K * L)
                g = (Wf * dnu).sum(0).reshape(K, L)
                return {c["tau"]: g.sum(), c["lambda"]: self.s_eta @ g.sum(1),
                        c["gamma"]: self.s_xi @ g.sum(0), c["sigma"]: (Wf * dsig).sum()}
            return logf.reshape(n, K, L), contract
        if self.kind == "ordinal":
            thr = values[c["thr"]]
            if not grad:
                logf = self.family.logpdf(yc, pred.ravel(), thr)
                return logf.reshape(n, K, L), None
            logf, dnu, dthr = self.family.terms(yc, pred.ravel(), thr)

            def contract(W):
                Wf = W.reshape(n, K * L)
                g = (Wf * dnu).sum(0).reshape(K, L)
                out = {c["lambda"]: self.s_eta @ g.sum(1), c["gamma"]: self.s_xi @ g.sum(0)}
                gt = np.einsum("np,npc->c", Wf, dthr)
                for i, x in zip(c["thr"], gt):
                    out[i] = x
                return out
            return logf.reshape(n, K, L), contract
        C = self.family.n_categories
        logf, dpred = self.family.terms(yc, pred.reshape(K * L, C))
        if not grad:
            return logf.reshape(n, K, L), None

        def contract(W):
            Wf = W.reshape(n, K * L)
            g = np.einsum("np,npc->pc", Wf, dpred).reshape(K, L, C)[..., 1:]
            out = {}
            gt, gl, gg = g.sum((0, 1)), np.einsum("k,klc->c", self.s_eta, g), np.einsum("l,klc->c", self.s_xi, g)
            for arr, key in ((gt, "tau"), (gl, "lambda"), (gg, "gamma")):
                for i, x in zip(c[key], arr):
                    out[i] = x
            return out
        return logf.reshape(n, K, L), contract

    def moments(self, values, s):
        """Conditional mean and second moment of the response on the (K, L) grid."""
        pred = self.predictor(values, s)
        c = self.comps[s]
        if self.kind == "continuous":
            return self.family.moments(pred, values[c["sigma"]])
        if self.kind == "ordinal":
            return self.family.moments(pred, values[c["thr"]])
        return self.family.moments(pred)

    def sample(self, rng, values, s, k, l):
        c = self.comps[s]
        pred = self.predictor(values, s)[k, l]
        if self.kind == "continuous":
            return self.family.sample(rng, pred, values[c["sigma"]])
        if self.kind == "ordinal":
            return self.family.sample(rng, pred, values[c["thr"]])
        return self.family.sample(rng, pred)


class CompiledModel:
    """Array layout of a discrete-latent design."""

    def __init__(self, design: MtmmDesign):
        if design.latent != "discrete":
            raise ConfigError("the likelihood engine needs a discrete-latent design")
        self.design = design
        self.par = parameterization(design)
        names = design.parameter_names
        idx = {n: i for i, n in enumerate(names)}
        self.n_full = len(names)
        T, M, S = design.n_traits, design.n_methods, design.n_components
        self.T, self.M, self.S = T, M, S
        self.Ks = tuple(design.trait_categories)
        self.Ls = tuple(design.method_categories)
        self.grid = self.Ks + self.Ls + (S,)
        self.n_cells = int(np.prod(self.grid))
        self.vars = [_Var(design, j, idx) for j in range(design.n_vars)]

        # trait log-linear design matrix over trait combos (C order)
        combos = np.array(list(itertools.product(*[range(K) for K in self.Ks])), dtype=int)
        self.trait_combos = combos
        cols, X = [], []
        for t, K in enumerate(self.Ks):
            for k in range(K - 1):
                cols.append(idx[f"alpha[{t + 1},{k + 1}]"])
                X.append((combos[:, t] == k).astype(float))
        self.phi_pairs = []
        if design.associations:
            for a in range(T):
                for b in range(a + 1, T):
                    cols.append(idx[f"phi[{a + 1},{b + 1}]"])
                    X.append(design.trait_scores(a + 1)[combos[:, a]] * design.trait_scores(b + 1)[combos[:, b]])
                    self.phi_pairs.append((a, b, idx[f"phi[{a + 1},{b + 1}]"]))
        self.trait_cols = np.array(cols, dtype=int)
        self.trait_X = np.array(X).T.reshape(len(combos), len(cols))
        self.kappa_cols = [np.array([idx[f"kappa[{m + 1},{l + 1}]"] for l in range(L - 1)], dtype=int)
                           for m, L in enumerate(self.Ls)]
        self.logit_cols = np.array([idx[f"logit[{s}]"] for s in range(2, S + 1)], dtype=int)

    # ----------------------------------------------------------------- priors
    def trait_logprob(self, values):
        mu = self.trait_X @ values[self.trait_cols] if len(self.trait_cols) else np.zeros(len(self.trait_combos))
        return (mu - logsumexp(mu)).reshape(self.Ks)

    def method_logprob(self, values, m):
        a = np.concatenate([values[self.kappa_cols[m]], [0.0]])
        return a - logsumexp(a)

    def component_logprob(self, values):
        a = np.concatenate([[0.0], values[self.logit_cols]])
        return a - logsumexp(a)

    def log_prior(self, values):
        """Log prior on the full cell grid (K1..KT, L1..LM, S)."""
        T, M = self.T, self.M
        out = self.trait_logprob(values).reshape(self.Ks + (1,) * (M + 1))
        for m in range(M):
            shape = [1] * (T + M + 1)
            shape[T + m] = self.Ls[m]
            out = out + self.method_logprob(values, m).reshape(shape)
        shape = [1] * (T + M) + [self.S]
        return out + self.component_logprob(values).reshape(shape)

    def var_axes(self, var):
        """Shape placing a (K, L, S) per-variable array on the cell grid."""
        shape = [1] * (self.T + self.M + 1)
        shape[var.t] = var.K
        shape[self.T + var.m] = var.L
        shape[-1] = self.S
        return shape

    def other_axes(self, var):
        """Grid axes (offset by the unit axis) summed out for one variable."""
        keep = {var.t, self.T + var.m, self.T + self.M}
        return tuple(1 + a for a in range(self.T + self.M + 1) if a not in keep)


_MODELS = {}


def compiled(design: MtmmDesign) -> CompiledModel:
    cm = _MODELS.get(design)
    if cm is None:
        if len(_MODELS) > 128:
            _MODELS.clear()
        cm = _MODELS[design] = CompiledModel(design)
    return cm


def _values(params):
    return params.values if isinstance(params, ParameterSet) else np.asarray(params, float)


def latent_prior(params, design: MtmmDesign) -> np.ndarray:
    """Joint prior over latent cells, shaped (K_1..K_T, L_1..L_M, S).

    ``.ravel()`` follows the order of :meth:`MtmmDesign.cells`.
    """
    cm = compiled(design)
    return np.exp(cm.log_prior(_values(params)))


def linear_predictor(params, design: MtmmDesign, cell: LatentCell, t: int, m: int, k: int | None = None):
    """Predictor of variable (t, m) in ``cell``.

    Continuous families return tau + lambda*score(eta_t) + gamma*score(xi_m).
    Ordinal variables need ``k`` and return the probit argument
    threshold_k - (lambda*score + gamma*score) of P(y <= k). Nominal
    variables need ``k`` and return the category predictor (0 for k = 0).
    """
    j = design.variable_index(t, m)
    cm = compiled(design)
    var = cm.vars[j]
    if var.kind == "continuous":
        if k is not None:
            raise ValueError("category index given for a continuous variable")
    elif k is None:
        raise ValueError("categorical variables need a category index")
    if not (0 <= cell.component < design.n_components):
        raise IndexError("component index out of range")
    kt, lm = cell.trait_categories[t - 1], cell.method_categories[m - 1]
    if not (0 <= kt < var.K and 0 <= lm < var.L):
        raise IndexError("latent category out of range")
    vals = _values(params)
    pred = var.predictor(vals, cell.component)[kt, lm]
    if var.kind == "continuous":
        return float(pred)
    C = var.family.n_categories
    if not 0 <= k < C:
        raise IndexError("response category out of range")
    if var.kind == "ordinal":
        if k == C - 1:
            return np.inf
        return float(vals[var.comps[cell.component]["thr"][k]] - pred)
    return float(pred[k])


__all__ = ["CompiledModel", "compiled", "latent_prior", "linear_predictor"]
