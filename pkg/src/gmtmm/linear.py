"""Linear Gaussian CFA-MTMM: implied moments, full-information ML, reliability and method effects.

Each observed variable y_tm loads on its trait factor eta_t and on its
method factor xi_m::

    y = tau + Lambda eta + Gamma xi + eps,
    Sigma = Lambda Sigma_eta Lambda' + Gamma diag(var_xi) Gamma' + diag(var_eps).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve

from .data import Dataset
from .design import MtmmDesign, validate_design
from .errors import ConfigError, DataError, NumericalError
from .optim import fd_information, maximize
from .params import ParameterSet, parameterization
from .results import FitResult, QualityReport

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class LinearParams:
    """Parameters of the linear MTMM model.

    Parameters
    ----------
    tau : (V,) intercepts
    Lambda : (V, T) trait loadings; row i is nonzero only in its trait column
    Gamma : (V, M) method loadings; row i is nonzero only in its method column
    cov_eta : (T, T) trait covariance, symmetric positive definite
    var_xi : (M,) method variances (>= 0)
    var_eps : (V,) error variances (> 0)
    layout : tuple of (t, m), 1-based
        Trait and method of each row. Defaults to the method-major crossing.
    """

    tau: np.ndarray
    Lambda: np.ndarray
    Gamma: np.ndarray
    cov_eta: np.ndarray
    var_xi: np.ndarray
    var_eps: np.ndarray
    layout: tuple | None = None

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, float))
        L = np.atleast_2d(np.asarray(self.Lambda, float))
        G = np.atleast_2d(np.asarray(self.Gamma, float))
        C = np.atleast_2d(np.asarray(self.cov_eta, float))
        vx = np.atleast_1d(np.asarray(self.var_xi, float))
        ve = np.atleast_1d(np.asarray(self.var_eps, float))
        V, T = L.shape
        M = G.shape[1]
        if tau.shape != (V,) or G.shape[0] != V or ve.shape != (V,):
            raise ValueError("tau, Lambda, Gamma and var_eps disagree on the number of variables")
        if C.shape != (T, T) or vx.shape != (M,):
            raise ValueError("cov_eta must be T x T and var_xi of length M")
        layout = self.layout
        if layout is None:
            if V != T * M:
                raise ValueError("layout required unless every trait x method pair is present")
            layout = tuple((t, m) for m in range(1, M + 1) for t in range(1, T + 1))
        layout = tuple((int(t), int(m)) for t, m in layout)
        if len(layout) != V or any(not (1 <= t <= T and 1 <= m <= M) for t, m in layout):
            raise ValueError("layout does not match the loading matrices")
        for name, arr in (("tau", tau), ("Lambda", L), ("Gamma", G), ("cov_eta", C),
                          ("var_xi", vx), ("var_eps", ve)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "layout", layout)

    @property
    def n_vars(self):
        return len(self.tau)

    @property
    def n_traits(self):
        return self.Lambda.shape[1]

    @property
    def n_methods(self):
        return self.Gamma.shape[1]

    def index(self, t, m) -> int:
        try:
            return self.layout.index((t, m))
        except ValueError:
            raise IndexError(f"no variable ({t},{m})") from None

    def to_parameter_set(self, design: MtmmDesign) -> ParameterSet:
        if design.latent != "gaussian":
            raise ConfigError("linear parameters need a gaussian-latent design")
        lay = tuple((v.trait, v.method) for v in design.variables)
        if lay != self.layout or design.n_traits != self.n_traits or design.n_methods != self.n_methods:
            raise ValueError("parameter layout differs from the design's variables")
        vals = {}
        for i, (t, m) in enumerate(self.layout):
            off_l = np.delete(self.Lambda[i], t - 1)
            off_g = np.delete(self.Gamma[i], m - 1)
            if np.any(off_l != 0) or np.any(off_g != 0):
                raise ValueError(f"row {i} loads outside its own trait/method")
            nm = design.measurement_names(i)
            vals[nm["tau"]] = self.tau[i]
            vals[nm["lambda"]] = self.Lambda[i, t - 1]
            vals[nm["gamma"]] = self.Gamma[i, m - 1]
            vals[nm["var_eps"]] = self.var_eps[i]
        T = self.n_traits
        for a in range(T):
            for b in range(a, T):
                vals[f"cov_eta[{a + 1},{b + 1}]"] = self.cov_eta[a, b]
        for m in range(self.n_methods):
            vals[f"var_xi[{m + 1}]"] = self.var_xi[m]
        names = design.parameter_names
        return ParameterSet(names, [vals[n] for n in names])

    @classmethod
    def from_parameter_set(cls, design: MtmmDesign, params: ParameterSet) -> "LinearParams":
        T, M, V = design.n_traits, design.n_methods, design.n_vars
        d = params.as_dict()
        tau, ve = np.zeros(V), np.zeros(V)
        L, G = np.zeros((V, T)), np.zeros((V, M))
        for i, v in enumerate(design.variables):
            nm = design.measurement_names(i)
            tau[i] = d[nm["tau"]]
            L[i, v.trait - 1] = d[nm["lambda"]]
            G[i, v.method - 1] = d[nm["gamma"]]
            ve[i] = d[nm["var_eps"]]
        C = np.zeros((T, T))
        for a in range(T):
            for b in range(a, T):
                C[a, b] = C[b, a] = d[f"cov_eta[{a + 1},{b + 1}]"]
        vx = np.array([d[f"var_xi[{m + 1}]"] for m in range(M)])
        return cls(tau, L, G, C, vx, ve, tuple((v.trait, v.method) for v in design.variables))


def random_linear_params(rng, n_traits, n_methods, method_factors=None) -> LinearParams:
    """A random valid parameter set with unit reference loadings."""
    T, M = n_traits, n_methods
    mf = (True,) * M if method_factors is None else tuple(method_factors)
    layout = tuple((t, m) for m in range(1, M + 1) for t in range(1, T + 1))
    V = len(layout)
    L, G = np.zeros((V, T)), np.zeros((V, M))
    for i, (t, m) in enumerate(layout):
        L[i, t - 1] = 1.0 if m == 1 else rng.uniform(0.5, 1.5)
        G[i, m - 1] = 0.0 if not mf[m - 1] else (1.0 if t == 1 else rng.uniform(0.5, 1.5))
    A = rng.normal(size=(T, T))
    C = A @ A.T / T + 0.5 * np.eye(T)
    vx = np.where(mf, rng.uniform(0.1, 0.6, M), 0.0)
    return LinearParams(rng.normal(size=V), L, G, C, vx, rng.uniform(0.2, 1.0, V), layout)


def implied_moments(params: LinearParams):
    """Model-implied mean vector and covariance matrix."""
    L, G = params.Lambda, params.Gamma
    with np.errstate(over="ignore", invalid="ignore"):
        S = L @ params.cov_eta @ L.T + (G * params.var_xi) @ G.T + np.diag(params.var_eps)
        return params.tau.copy(), 0.5 * (S + S.T)


def reliability_method_effects(params: LinearParams, labels=None) -> QualityReport:
    """lambda* = cor(y, eta_t) and gamma* = cor(y, xi_m) for every variable.

    lambda*_tm = lambda_tm sqrt(var(eta_t) / var(y_tm)) and likewise for the
    method effect, with variances taken from the implied moments.
    """
    _, S = implied_moments(params)
    vy = np.diag(S)
    if np.any(vy <= 0):
        raise NumericalError("zero implied variance")
    rel, meth = np.zeros(params.n_vars), np.zeros(params.n_vars)
    for i, (t, m) in enumerate(params.layout):
        rel[i] = params.Lambda[i, t - 1] * np.sqrt(params.cov_eta[t - 1, t - 1] / vy[i])
        meth[i] = params.Gamma[i, m - 1] * np.sqrt(params.var_xi[m - 1] / vy[i])
    labels = labels or tuple(f"y[{t},{m}]" for t, m in params.layout)
    return QualityReport(tuple(labels), rel, meth, source="analytic")


def implied_cross_correlation(params: LinearParams, a, b) -> float:
    """Correlation of variables a = (t, m) and b = (t', m') with t != t'.

    lambda*_a lambda*_b cor(eta_t, eta_t'), plus gamma*_a gamma*_b when the
    two share their method.
    """
    (t, m), (t2, m2) = a, b
    if t == t2:
        raise ValueError("cross correlation needs two different traits")
    q = reliability_method_effects(params)
    i, j = params.index(t, m), params.index(t2, m2)
    C = params.cov_eta
    r = q.reliability[i] * q.reliability[j] * C[t - 1, t2 - 1] / np.sqrt(C[t - 1, t - 1] * C[t2 - 1, t2 - 1])
    if m == m2:
        r += q.method_effect[i] * q.method_effect[j]
    return float(r)


# ----------------------------------------------------------------------------- moment Jacobian
def _moment_derivatives(design: MtmmDesign, lp: "LinearParams"):
    """d mu (P, V) and d Sigma (P, V, V) for every natural parameter (design order)."""
    L, G, C, vx = lp.Lambda, lp.Gamma, lp.cov_eta, lp.var_xi
    V, T = L.shape
    names = design.parameter_names
    idx = {n: k for k, n in enumerate(names)}
    dmu = np.zeros((len(names), V))
    dS = np.zeros((len(names), V, V))
    LC = L @ C
    GV = G * vx
    for i, v in enumerate(design.variables):
        nm = design.measurement_names(i)
        dmu[idx[nm["tau"]], i] = 1.0
        k = idx[nm["lambda"]]
        dS[k, i, :] += LC[:, v.trait - 1]
        dS[k, :, i] += LC[:, v.trait - 1]
        k = idx[nm["gamma"]]
        dS[k, i, :] += GV[:, v.method - 1]
        dS[k, :, i] += GV[:, v.method - 1]
        dS[idx[nm["var_eps"]], i, i] = 1.0
    for a in range(T):
        for b in range(a, T):
            k = idx[f"cov_eta[{a + 1},{b + 1}]"]
            dS[k] = np.outer(L[:, a], L[:, b])
            if a != b:
                dS[k] += dS[k].T
    for m in range(G.shape[1]):
        dS[idx[f"var_xi[{m + 1}]"]] = np.outer(G[:, m], G[:, m])
    return dmu, dS


def moment_jacobian(design: MtmmDesign, params: ParameterSet) -> np.ndarray:
    """d(mu, vech Sigma) / d(natural parameters), one column per design parameter."""
    lp = LinearParams.from_parameter_set(design, params)
    dmu, dS = _moment_derivatives(design, lp)
    iu = np.triu_indices(lp.n_vars)
    return np.concatenate([dmu, dS[:, iu[0], iu[1]]], axis=1).T


# ----------------------------------------------------------------------------- likelihood
@dataclass(frozen=True)
class _Pattern:
    obs: np.ndarray
    W: float
    ybar: np.ndarray
    S: np.ndarray


def _patterns(data: Dataset):
    keep = data.mask.any(axis=1)
    pats = []
    keys, inv = np.unique(data.mask[keep], axis=0, return_inverse=True)
    rows_all = np.flatnonzero(keep)
    inv = np.ravel(inv)
    for g, key in enumerate(keys):
        rows = rows_all[inv == g]
        obs = np.flatnonzero(key)
        w = data.weights[rows]
        W = float(w.sum())
        if W <= 0:
            continue
        Y = data.y[np.ix_(rows, obs)]
        ybar = w @ Y / W
        D = Y - ybar
        pats.append(_Pattern(obs, W, ybar, (D * w[:, None]).T @ D))
    return pats


def _loglik(pats, mu, Sigma, grad=False):
    V = len(mu)
    if not (np.all(np.isfinite(Sigma)) and np.all(np.isfinite(mu))):
        return -np.inf, None, None
    ll = 0.0
    Gs = np.zeros((V, V))
    gmu = np.zeros(V)
    for p in pats:
        o = p.obs
        So = Sigma[np.ix_(o, o)]
        try:
            cf = np.linalg.cholesky(So)
        except np.linalg.LinAlgError:
            return -np.inf, None, None
        d = p.ybar - mu[o]
        C = p.S + p.W * np.outer(d, d)
        inv = cho_solve((cf, True), np.eye(len(o)))
        logdet = 2.0 * np.sum(np.log(np.diag(cf)))
        if not np.all(np.isfinite(inv)):
            return -np.inf, None, None
        ll += -0.5 * (p.W * (len(o) * LOG_2PI + logdet) + np.sum(inv * C))
        if grad:
            Gs[np.ix_(o, o)] += 0.5 * (inv @ C @ inv - p.W * inv)
            gmu[o] += p.W * (inv @ d)
    return ll, gmu, Gs


def _natural_grad(design, lp: LinearParams, gmu, Gs):
    L, G, C, vx = lp.Lambda, lp.Gamma, lp.cov_eta, lp.var_xi
    names = design.parameter_names
    idx = {n: k for k, n in enumerate(names)}
    g = np.zeros(len(names))
    dL = 2.0 * Gs @ L @ C
    dG = 2.0 * (Gs @ G) * vx
    dC = L.T @ Gs @ L
    dvx = np.einsum("vm,vw,wm->m", G, Gs, G)
    for i, v in enumerate(design.variables):
        nm = design.measurement_names(i)
        g[idx[nm["tau"]]] = gmu[i]
        g[idx[nm["lambda"]]] = dL[i, v.trait - 1]
        g[idx[nm["gamma"]]] = dG[i, v.method - 1]
        g[idx[nm["var_eps"]]] = Gs[i, i]
    T = C.shape[0]
    for a in range(T):
        for b in range(a, T):
            g[idx[f"cov_eta[{a + 1},{b + 1}]"]] = dC[a, b] * (1.0 if a == b else 2.0)
    for m in range(len(vx)):
        g[idx[f"var_xi[{m + 1}]"]] = dvx[m]
    return g


def linear_loglik(params, design: MtmmDesign, data: Dataset) -> float:
    """Full-information Gaussian log-likelihood (missing entries skipped per unit)."""
    lp = params if isinstance(params, LinearParams) else LinearParams.from_parameter_set(design, params)
    mu, S = implied_moments(lp)
    return _loglik(_patterns(data), mu, S)[0]


def saturated_loglik(data: Dataset, max_iter=2000, tol=1e-12) -> float:
    """Maximized log-likelihood of an unrestricted multivariate normal (EM under missingness)."""
    pats = _patterns(data)
    V = data.n_vars
    W = data.weights
    obs = data.mask
    mu = np.array([np.average(data.y[obs[:, j], j], weights=W[obs[:, j]]) for j in range(V)])
    S = np.diag([np.average((data.y[obs[:, j], j] - mu[j]) ** 2, weights=W[obs[:, j]]) for j in range(V)])
    if obs.all():
        D = data.y - (W @ data.y) / W.sum()
        S = (D * W[:, None]).T @ D / W.sum()
        return _loglik(pats, (W @ data.y) / W.sum(), S)[0]
    Y = np.where(obs, data.y, 0.0)
    ll_old = -np.inf
    for _ in range(max_iter):
        EY = np.empty_like(Y)
        ExtraC = np.zeros((V, V))
        for i in range(data.n):
            o = obs[i]
            if not o.any():
                continue
            mis = ~o
            EY[i] = mu
            EY[i, o] = Y[i, o]
            if mis.any():
                B = S[np.ix_(mis, o)] @ np.linalg.inv(S[np.ix_(o, o)])
                EY[i, mis] = mu[mis] + B @ (Y[i, o] - mu[o])
                ExtraC[np.ix_(mis, mis)] += W[i] * (S[np.ix_(mis, mis)] - B @ S[np.ix_(o, mis)])
        keep = obs.any(axis=1)
        Wk = W[keep]
        mu = Wk @ EY[keep] / Wk.sum()
        D = EY[keep] - mu
        S = ((D * Wk[:, None]).T @ D + ExtraC) / Wk.sum()
        ll = _loglik(pats, mu, S)[0]
        if abs(ll - ll_old) < tol * max(1.0, abs(ll)):
            break
        ll_old = ll
    return ll


# ----------------------------------------------------------------------------- fitting
@dataclass(frozen=True)
class LinearControls:
    max_iter: int = 5000
    grad_tol: float = 1e-8
    newton_steps: int = 6
    fd_step: float = 1e-5
    variance_floor: float = 1e-8
    refit_boundary: bool = False


def linear_start(design: MtmmDesign, data: Dataset) -> LinearParams:
    """Moment-based start: reference indicators define factor scales."""
    obs, w = data.mask, data.weights
    V = design.n_vars
    mean, var = np.zeros(V), np.ones(V)
    for j in range(V):
        o = obs[:, j]
        if w[o].sum() > 0:
            mean[j] = np.average(data.y[o, j], weights=w[o])
            var[j] = max(np.average((data.y[o, j] - mean[j]) ** 2, weights=w[o]), 1e-8)
    lay = tuple((v.trait, v.method) for v in design.variables)
    T, M = design.n_traits, design.n_methods
    has = design.has_method_factor
    ref_t = {t: next(i for i, (tt, _) in enumerate(lay) if tt == t) for t in {t for t, _ in lay}}
    ref_m = {m: next(i for i, (_, mm) in enumerate(lay) if mm == m) for m in {m for _, m in lay}}
    L, G = np.zeros((V, T)), np.zeros((V, M))
    for i, (t, m) in enumerate(lay):
        L[i, t - 1] = np.sqrt(var[i] / var[ref_t[t]])
        G[i, m - 1] = np.sqrt(var[i] / var[ref_m[m]]) if has[m - 1] else 0.0
    C = np.eye(T)
    for t in range(1, T + 1):
        C[t - 1, t - 1] = 0.6 * var[ref_t.get(t, 0)]
    vx = np.array([0.15 * var[ref_m[m]] if has[m - 1] else 0.0 for m in range(1, M + 1)])
    lp = LinearParams(mean, L, G, C, vx, 0.3 * var, lay)
    ps = lp.to_parameter_set(design)
    from .params import enforce_constraints
    return LinearParams.from_parameter_set(design, enforce_constraints(design, ps))


def _expected_information(pats, Sigma, dmu, dS):
    """Gaussian expected information for parameters with moment derivatives dmu, dS."""
    P = len(dmu)
    info = np.zeros((P, P))
    for p in pats:
        o = p.obs
        try:
            cf = np.linalg.cholesky(Sigma[np.ix_(o, o)])
        except np.linalg.LinAlgError:
            return None
        inv = cho_solve((cf, True), np.eye(len(o)))
        A = np.einsum("ab,kbc->kac", inv, dS[:, o][:, :, o])
        info += 0.5 * p.W * np.einsum("kab,lba->kl", A, A)
        Dm = dmu[:, o]
        info += p.W * Dm @ inv @ Dm.T
    return 0.5 * (info + info.T)


def _fisher_scoring(fg, efi, u, lower, max_iter=500, tol=1e-9):
    """Projected Fisher scoring with step halving; returns (u, ll, n_iter, trace)."""
    ll, g = fg(u)
    trace = [ll]
    it = 0
    for it in range(1, max_iter + 1):
        active = (u <= lower + 1e-10) & (g < 0)
        free = ~active
        info = efi(u)
        if info is None:
            break
        sub = info[np.ix_(free, free)]
        try:
            step = np.zeros_like(u)
            step[free] = np.linalg.solve(sub + 1e-12 * np.trace(sub) / max(1, free.sum()) * np.eye(free.sum()),
                                         g[free])
        except np.linalg.LinAlgError:
            break
        t = min(1.0, 2.0 / max(np.max(np.abs(step)), 1e-300))
        for _ in range(40):
            un = np.maximum(u + t * step, lower)
            lln, gn = fg(un)
            if np.isfinite(lln) and lln >= ll - 1e-10:
                break
            t *= 0.5
        else:
            break
        gain = lln - ll
        u, ll, g = un, lln, gn
        trace.append(ll)
        if gain < tol * max(1.0, abs(ll)) and np.max(np.abs(t * step)) < 1e-8:
            break
    return u, ll, it, trace


def fit_ml(data: Dataset, design: MtmmDesign, start: LinearParams | None = None,
           controls: LinearControls = LinearControls()) -> FitResult:
    """Full-information maximum likelihood for a gaussian-latent design.

    Variances are optimized on the log scale with a floor at
    ``controls.variance_floor`` times the average observed variance; method
    variances that end on the floor are reported as boundary solutions and,
    with ``refit_boundary``, the model is refit without those method factors.
    """
    if design.latent != "gaussian":
        raise ConfigError("fit_ml needs a gaussian-latent (linear) design")
    data = data.retained()
    data.check(design)
    par = parameterization(design)
    if data.weights.sum() <= par.n_free:
        raise DataError(f"need more than {par.n_free} units (free parameters) for ML")
    start = linear_start(design, data) if start is None else start
    ps0 = start.to_parameter_set(design) if isinstance(start, LinearParams) else start
    rep = validate_design(design, ps0)
    if not rep.ok:
        raise ConfigError("invalid start values: " + "; ".join(rep.violations))
    pats = _patterns(data)
    scale = float(np.nanmean([np.nanvar(data.y[data.mask[:, j], j]) for j in range(design.n_vars)]))
    floor = np.log(controls.variance_floor * max(scale, 1e-300))
    lower = np.full(par.n_free, -np.inf)
    var_coord = np.array([n.startswith(("var_eps", "var_xi")) for n in par.free_names])
    lower[var_coord] = floor

    def fg(u):
        vals = par.to_values(u)
        lp = LinearParams.from_parameter_set(design, ParameterSet(design.parameter_names, vals))
        mu, S = implied_moments(lp)
        ll, gmu, Gs = _loglik(pats, mu, S, grad=True)
        if not np.isfinite(ll):
            return -np.inf, np.zeros_like(u)
        return ll, par.grad_free(vals, _natural_grad(design, lp, gmu, Gs), u)

    def info_fn(u):
        return fd_information(lambda x: fg(x)[1], u, controls.fd_step)

    names = design.parameter_names
    unit = np.eye(len(names))

    def efi(u):
        vals = par.to_values(u)
        lp = LinearParams.from_parameter_set(design, ParameterSet(names, vals))
        dmu, dS = _moment_derivatives(design, lp)
        D = np.array([par.grad_free(vals, e, u) for e in unit])  # d natural / d u
        _, S = implied_moments(lp)
        return _expected_information(pats, S, D.T @ dmu, np.einsum("pk,pab->kab", D, dS))

    u0 = np.maximum(par.to_free(ps0.values), lower)
    try:
        if not np.isfinite(fg(u0)[0]):
            raise ArithmeticError("non-finite log-likelihood")
        u1, _, n_fs, fs_trace = _fisher_scoring(fg, efi, u0, lower)
        opt = maximize(fg, u1, info_fn=info_fn, lower=lower, max_iter=controls.max_iter,
                       grad_tol=controls.grad_tol, newton_steps=controls.newton_steps,
                       scale=max(1.0, float(data.weights.sum())), trace=fs_trace)
        opt.n_iter += n_fs
    except ArithmeticError as exc:
        raise NumericalError(f"start values give a non-finite likelihood: {exc}") from None
    vals = par.to_values(opt.u)
    params = ParameterSet(design.parameter_names, vals)
    g_free = np.where(opt.active, 0.0, opt.grad)
    gmax = float(np.max(np.abs(g_free))) if len(g_free) else 0.0
    flags = list(opt.flags)
    converged = gmax < 1e-5 * max(1.0, float(data.weights.sum())) ** 0.5
    if not converged:
        flags.append(f"gradient max-norm {gmax:.3g} above tolerance")
    boundary_methods = []
    for k in np.flatnonzero(opt.u <= lower + 1e-6):
        flags.append(f"boundary: {par.free_names[k]} at the variance floor")
        if par.free_names[k].startswith("var_xi"):
            boundary_methods.append(int(par.free_names[k][len("var_xi["):-1]))
    result = FitResult(params=params, loglik=opt.loglik, n_iter=opt.n_iter, converged=converged,
                       grad_norm=gmax, n_params=par.n_free, n_obs=data.n, free_names=par.free_names,
                       information=opt.information, jacobian=par.jacobian(vals, opt.u), method="linear-ml",
                       trace=opt.trace, flags=flags, design=design)
    if boundary_methods and controls.refit_boundary:
        mf = list(design.has_method_factor)
        for m in boundary_methods:
            mf[m - 1] = False
        reduced = replace(design, method_factors=tuple(mf))
        refit = fit_ml(data, reduced, None, replace(controls, refit_boundary=False))
        refit.flags.insert(0, "refit without method factor(s) " + ", ".join(map(str, boundary_methods)))
        return refit
    return result
