"""Marginal likelihood by exact cell enumeration, EM and quasi-Newton fitting,
posterior cell probabilities, simulation, multistart and label canonicalization."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtri

from .core import CompiledModel, compiled
from .data import Dataset
from .design import MtmmDesign, validate_design
from .errors import ConfigError, DataError, NumericalError
from .params import ParameterSet, enforce_constraints
from .optim import fd_information, maximize
from .results import FitResult

log = logging.getLogger(__name__)

FLOOR = 1e-10
LOG_FLOOR = np.log(FLOOR)


@dataclass(frozen=True)
class FitControls:
    """Optimizer settings shared by :func:`em_fit`, :func:`direct_fit` and :func:`hybrid_fit`."""

    method: str = "hybrid"
    max_iter: int = 2000
    tol: float = 1e-8
    param_tol: float = 1e-6
    hybrid_em_iter: int = 100
    grad_tol: float = 1e-8
    newton_steps: int = 6
    fd_step: float = 1e-5
    information: bool = True


@dataclass
class _Eval:
    loglik: float
    unit_ll: np.ndarray
    post: np.ndarray | None = None
    grad: np.ndarray | None = None
    stats: dict | None = None


def _prepare(design, data):
    data = data.retained()
    data.check(design)
    return data


def _evaluate(cm: CompiledModel, values, data: Dataset, stats=False, grad=False, post=False,
              strict=True) -> _Eval:
    """One pass over the data: marginal log-likelihood and optionally the
    posterior, the natural-scale score and the M-step sufficient statistics."""
    n = data.n
    maps = _cell_maps(cm)
    A = np.broadcast_to(cm.log_prior(values).ravel(), (n, cm.n_cells)).copy()
    contracts = []
    for var, A_var in zip(cm.vars, maps):
        obs = data.mask[:, var.j]
        rows = np.flatnonzero(obs)
        if len(rows) == 0:
            continue
        y = data.y[rows, var.j]
        lf = np.empty((len(rows), var.K, var.L, cm.S))  # -inf is clipped so 0 * lf stays finite
        per = []
        for s in range(cm.S):
            logf, contract = var.terms(values, s, y, grad=grad)
            lf[..., s] = logf
            per.append(contract)
        contracts.append((var, rows, per))
        np.maximum(lf, -1e300, out=lf)
        if len(rows) == n:
            A += lf.reshape(n, -1) @ A_var.T
        else:
            A[rows] += lf.reshape(len(rows), -1) @ A_var.T
    flat = A
    mx = flat.max(axis=1)
    with np.errstate(invalid="ignore"):
        E = np.exp(flat - np.where(np.isfinite(mx), mx, 0.0)[:, None])
        total = E.sum(axis=1)
    with np.errstate(divide="ignore"):
        unit = np.log(total) + mx
    bad = ~np.isfinite(unit)
    if bad.any():
        if strict:
            raise NumericalError(f"likelihood underflow for {int(bad.sum())} unit(s), e.g. row {np.flatnonzero(bad)[0]}")
        return _Eval(-np.inf, unit)
    ll = float(data.weights @ unit)
    out = _Eval(ll, unit)
    if not (stats or grad or post):
        return out
    P = E / total[:, None]
    if post:
        out.post = P
    if not (stats or grad):
        return out
    tot = (data.weights @ P).reshape(cm.grid)
    st = {"trait": tot.sum(axis=tuple(range(cm.T, cm.T + cm.M + 1))),
          "method": [tot.sum(axis=tuple(a for a in range(cm.T + cm.M + 1) if a != cm.T + m))
                     for m in range(cm.M)],
          "comp": tot.sum(axis=tuple(range(cm.T + cm.M))),
          "var": []}
    for (var, rows, _), A_var in zip(contracts, maps):
        Pw = P[rows] * data.weights[rows, None]
        st["var"].append((Pw @ A_var).reshape(len(rows), var.K, var.L, cm.S))
    if stats:
        out.stats = st
    if grad:
        g = _prior_grad(cm, values, st)
        for (var, rows, per), W in zip(contracts, st["var"]):
            for s in range(cm.S):
                for i, x in per[s](W[..., s]).items():
                    g[i] += x
        out.grad = g
    return out


def _cell_maps(cm):
    """Per variable, a 0/1 matrix (n_cells, K*L*S) summing cells into (k_t, l_m, s)."""
    maps = getattr(cm, "_cell_maps", None)
    if maps is None:
        idx = np.indices(cm.grid).reshape(len(cm.grid), -1)
        maps = []
        for var in cm.vars:
            col = (idx[var.t] * var.L + idx[cm.T + var.m]) * cm.S + idx[-1]
            A = np.zeros((cm.n_cells, var.K * var.L * cm.S))
            A[np.arange(cm.n_cells), col] = 1.0
            maps.append(A)
        cm._cell_maps = maps
    return maps


def _prior_grad(cm, values, st):
    g = np.zeros(cm.n_full)
    n_tot = st["comp"].sum()
    if len(cm.trait_cols):
        p = np.exp(cm.trait_logprob(values)).ravel()
        g[cm.trait_cols] += cm.trait_X.T @ (st["trait"].ravel() - n_tot * p)
    for m in range(cm.M):
        if len(cm.kappa_cols[m]):
            p = np.exp(cm.method_logprob(values, m))
            g[cm.kappa_cols[m]] += (st["method"][m] - n_tot * p)[:-1]
    if len(cm.logit_cols):
        p = np.exp(cm.component_logprob(values))
        g[cm.logit_cols] += (st["comp"] - n_tot * p)[1:]
    return g


# --------------------------------------------------------------------------- public likelihood API
def marginal_loglik(params: ParameterSet, design: MtmmDesign, data: Dataset) -> float:
    """Weighted observed-data log-likelihood, summing exactly over latent cells."""
    cm = compiled(design)
    return _evaluate(cm, params.values, _prepare(design, data)).loglik


def unit_loglik(params: ParameterSet, design: MtmmDesign, data: Dataset) -> np.ndarray:
    """Per-unit (unweighted) marginal log-likelihood."""
    data.check(design)
    return _evaluate(compiled(design), params.values, data, strict=False).unit_ll


def score(params: ParameterSet, design: MtmmDesign, data: Dataset, free=True) -> np.ndarray:
    """Gradient of the marginal log-likelihood (free coordinates, or natural scale)."""
    cm = compiled(design)
    ev = _evaluate(cm, params.values, _prepare(design, data), grad=True)
    return cm.par.grad_free(params.values, ev.grad) if free else ev.grad


def posterior_cells(params: ParameterSet, design: MtmmDesign, data: Dataset) -> np.ndarray:
    """N x n_cells posterior probabilities, columns in :meth:`MtmmDesign.cells` order."""
    cm = compiled(design)
    data.check(design)
    if not data.mask.any(axis=1).all():
        raise DataError("posterior undefined for units without observations")
    return _evaluate(cm, params.values, data, post=True).post


# --------------------------------------------------------------------------- M-step
class _Blocks:
    """Groups of natural parameters whose expected complete-data terms separate."""

    def __init__(self, cm: CompiledModel):
        par = cm.par
        groups = [("trait",)] + [("method", m) for m in range(cm.M)] + [("comp",)]
        members = {("trait",): list(cm.trait_cols), ("comp",): list(cm.logit_cols)}
        for m in range(cm.M):
            members[("method", m)] = list(cm.kappa_cols[m])
        for var in cm.vars:
            for s in range(cm.S):
                g = ("var", var.j, s)
                groups.append(g)
                members[g] = [i for x in var.comps[s].values() for i in np.atleast_1d(x)]
        # union groups sharing a free coordinate
        parent = {g: g for g in groups}

        def find(g):
            while parent[g] != g:
                parent[g] = parent[parent[g]]
                g = parent[g]
            return g

        owner = {}
        for g in groups:
            for i in members[g]:
                c = par.coord_of[i]
                if c < 0:
                    continue
                if c in owner:
                    parent[find(g)] = find(owner[c])
                else:
                    owner[c] = g
        blocks = {}
        for g in groups:
            blocks.setdefault(find(g), []).append(g)
        self.blocks = []
        for gs in blocks.values():
            coords = sorted({par.coord_of[i] for g in gs for i in members[g] if par.coord_of[i] >= 0})
            if coords:
                self.blocks.append((gs, np.array(coords, dtype=int)))
        self.members = members


def _group_q(cm, g, values, st, data, grad=False):
    """Expected complete-data log-likelihood of one group (and natural gradient entries)."""
    kind = g[0]
    if kind == "trait":
        lp = cm.trait_logprob(values)
        q = float(np.sum(st["trait"] * np.maximum(lp, LOG_FLOOR)))
        if not grad:
            return q, None
        n_tot = st["trait"].sum()
        gr = cm.trait_X.T @ (st["trait"].ravel() - n_tot * np.exp(lp).ravel())
        return q, dict(zip(cm.trait_cols, gr))
    if kind == "method":
        m = g[1]
        lp = cm.method_logprob(values, m)
        n = st["method"][m]
        q = float(n @ np.maximum(lp, LOG_FLOOR))
        if not grad:
            return q, None
        return q, dict(zip(cm.kappa_cols[m], (n - n.sum() * np.exp(lp))[:-1]))
    if kind == "comp":
        lp = cm.component_logprob(values)
        n = st["comp"]
        q = float(n @ np.maximum(lp, LOG_FLOOR))
        if not grad:
            return q, None
        return q, dict(zip(cm.logit_cols, (n - n.sum() * np.exp(lp))[1:]))
    _, j, s = g
    var = cm.vars[j]
    rows = np.flatnonzero(data.mask[:, j])
    W = st["var"][j][..., s]
    logf, contract = var.terms(values, s, data.y[rows, j], grad=grad)
    with np.errstate(invalid="ignore"):
        q = float(np.sum(np.where(W > 0, W * logf, 0.0)))
    if not np.isfinite(q):
        q = -np.inf
    return q, (contract(W) if grad else None)


def _closed_form(cm, gs, values, st, data):
    """Exact maximizer for simple blocks, or None when the block needs a numerical step."""
    if len(gs) != 1:
        return None
    g = gs[0]
    par = cm.par
    vals = values.copy()
    if g[0] == "method":
        cols = cm.kappa_cols[g[1]]
        if not np.all(par.coord_of[cols] >= 0):
            return None
        n = st["method"][g[1]]
        p = np.maximum(n / n.sum(), FLOOR)
        vals[cols] = np.log(p[:-1]) - np.log(p[-1])
        return vals
    if g[0] == "comp":
        cols = cm.logit_cols
        if not np.all(par.coord_of[cols] >= 0):
            return None
        n = st["comp"]
        p = np.maximum(n / n.sum(), FLOOR)
        vals[cols] = np.log(p[1:]) - np.log(p[0])
        return vals
    if g[0] == "trait":
        if cm.phi_pairs or not np.all(par.coord_of[cm.trait_cols] >= 0):
            return None
        n = st["trait"]
        for t, K in enumerate(cm.Ks):
            if K == 1:
                continue
            nt = n.sum(axis=tuple(a for a in range(cm.T) if a != t))
            p = np.maximum(nt / nt.sum(), FLOOR)
            for k in range(K - 1):
                vals[cm.design.parameter_names.index(f"alpha[{t + 1},{k + 1}]")] = np.log(p[k]) - np.log(p[-1])
        return vals
    _, j, s = g
    var = cm.vars[j]
    if var.family.name != "gaussian":
        return None
    c = var.comps[s]
    rows = np.flatnonzero(data.mask[:, j])
    y = data.y[rows, j]
    W = st["var"][j][..., s]
    wkl = W.sum(0)
    if wkl.sum() <= 0:
        return None
    mkl = np.einsum("nkl,n->kl", W, y)
    X = np.stack(np.broadcast_arrays(np.ones((var.K, var.L)), var.s_eta[:, None], var.s_xi[None, :]), -1)
    idx = [c["tau"], c["lambda"], c["gamma"]]
    free = np.array([par.coord_of[i] >= 0 for i in idx])
    offset = sum(vals[i] * X[..., q] for q, i in enumerate(idx) if not free[q])
    Xf = X[..., free].reshape(-1, free.sum())
    w = wkl.ravel()
    r = (mkl - wkl * offset).ravel()
    if free.any():
        XtWX = Xf.T @ (w[:, None] * Xf)
        beta = np.linalg.lstsq(XtWX, Xf.T @ r, rcond=None)[0]
        for i, b in zip(np.array(idx)[free], beta):
            vals[i] = b
    if par.coord_of[c["sigma"]] >= 0:
        nu = var.predictor(vals, s)
        ss = np.einsum("nkl,nkl->", W, (y[:, None, None] - nu[None]) ** 2)
        vals[c["sigma"]] = max(np.sqrt(ss / W.sum()), 1e-8)
    return vals


def _m_step(cm, blocks, values, st, data):
    par = cm.par
    u = par.to_free(values)
    values = values.copy()
    for gs, coords in blocks.blocks:
        q_old = sum(_group_q(cm, g, values, st, data)[0] for g in gs)
        new = _closed_form(cm, gs, values, st, data)
        if new is None:
            new = _numeric_block(cm, gs, coords, u, values, st, data)
        else:
            new = par.to_values(par.to_free(new))
        q_new = sum(_group_q(cm, g, new, st, data)[0] for g in gs)
        if q_new >= q_old:
            values = new
            u = par.to_free(values)
    return values


def _numeric_block(cm, gs, coords, u, values, st, data):
    par = cm.par
    base = u.copy()

    def f(x):
        uu = base.copy()
        uu[coords] = x
        vals = par.to_values(uu)
        q, g_nat = 0.0, np.zeros(cm.n_full)
        for g in gs:
            qg, gd = _group_q(cm, g, vals, st, data, grad=True)
            q += qg
            for i, v in gd.items():
                g_nat[i] += v
        if not np.isfinite(q):
            return 1e100, np.zeros(len(coords))
        return -q, -par.grad_free(vals, g_nat)[coords]

    res = minimize(f, base[coords], jac=True, method="L-BFGS-B",
                   options={"maxiter": 100, "gtol": 1e-9, "ftol": 1e-14})
    uu = base.copy()
    uu[coords] = res.x
    return par.to_values(uu)


# --------------------------------------------------------------------------- fitters
def _n_obs(data):
    return int(data.n)


def observed_information(design, params, data, step=1e-5) -> np.ndarray:
    """Negative central-difference Jacobian of the analytic score (free coordinates)."""
    cm = compiled(design)
    par = cm.par

    def g(u):
        vals = par.to_values(u)
        return par.grad_free(vals, _evaluate(cm, vals, data, grad=True).grad)

    return fd_information(g, par.to_free(params.values), step)


def _finish(cm, values, data, ll, n_iter, converged, method, trace, flags, controls, grad=None):
    par = cm.par
    params = ParameterSet(cm.design.parameter_names, values)
    if grad is None:
        ev = _evaluate(cm, values, data, grad=True)
        grad = par.grad_free(values, ev.grad)
    info = jac = None
    if controls.information:
        info = observed_information(cm.design, params, data, controls.fd_step)
        jac = par.jacobian(values)
    flags = list(flags)
    _boundary_flags(cm, values, data, flags)
    return FitResult(params=params, loglik=ll, n_iter=n_iter, converged=converged,
                     grad_norm=float(np.max(np.abs(grad))) if len(grad) else 0.0,
                     n_params=par.n_free, n_obs=_n_obs(data), free_names=par.free_names,
                     information=info, jacobian=jac, method=method, trace=list(trace),
                     flags=flags, design=cm.design)


def _boundary_flags(cm, values, data, flags):
    ev = _evaluate(cm, values, data, stats=True)
    st = ev.stats
    if cm.S > 1 and np.any(st["comp"] < 1.0):
        flags.append("degenerate component: responsibility mass below one unit")
    for name, lp in [("trait", cm.trait_logprob(values).ravel())] + \
            [(f"method {m + 1}", cm.method_logprob(values, m)) for m in range(cm.M)] + \
            [("mixture", cm.component_logprob(values))]:
        if np.any(lp < np.log(1e-6)):
            flags.append(f"boundary: {name} latent probability below 1e-6")


def em_fit(data: Dataset, design: MtmmDesign, start: ParameterSet, controls: FitControls = FitControls(),
           finish=True) -> FitResult:
    """Expectation-maximization from ``start``.

    Each M-step maximizes the expected complete-data log-likelihood block by
    block (closed form where available, otherwise a bounded quasi-Newton
    step accepted only if it increases the block's objective), so the
    observed log-likelihood never decreases.
    """
    data = _prepare(design, data)
    _check_start(design, start)
    cm = compiled(design)
    blocks = _Blocks(cm)
    par = cm.par
    values = par.to_values(par.to_free(start.values))
    ev = _evaluate(cm, values, data, stats=True)
    trace = [ev.loglik]
    flags = []
    converged = False
    it = 0
    u = par.to_free(values)
    for it in range(1, controls.max_iter + 1):
        values = _m_step(cm, blocks, values, ev.stats, data)
        ev_new = _evaluate(cm, values, data, stats=True)
        trace.append(ev_new.loglik)
        if ev_new.loglik < ev.loglik - 1e-10:
            flags.append(f"EM log-likelihood decreased by {ev.loglik - ev_new.loglik:.3g} at iteration {it}")
        u_new = par.to_free(values)
        rel = abs(ev_new.loglik - ev.loglik) / max(1.0, abs(ev_new.loglik))
        step = float(np.max(np.abs(u_new - u))) if len(u) else 0.0
        ev, u = ev_new, u_new
        if rel < controls.tol and step < controls.param_tol:
            converged = True
            break
    if not converged:
        flags.append(f"EM did not converge within {controls.max_iter} iterations")
    if not finish:
        return FitResult(ParameterSet(design.parameter_names, values), ev.loglik, it, converged, np.nan,
                         par.n_free, _n_obs(data), par.free_names, method="em", trace=trace, flags=flags,
                         design=design)
    return _finish(cm, values, data, ev.loglik, it, converged, "em", trace, flags, controls)


def _check_start(design, start):
    rep = validate_design(design, start)
    if not rep.ok:
        raise ConfigError("invalid start values: " + "; ".join(rep.violations))


def direct_fit(data: Dataset, design: MtmmDesign, start: ParameterSet, controls: FitControls = FitControls(),
               _trace=None, _flags=None, _iters=0, _method="direct") -> FitResult:
    """Quasi-Newton maximization of the marginal likelihood on free coordinates,
    polished by Newton steps on the observed information."""
    data = _prepare(design, data)
    _check_start(design, start)
    cm = compiled(design)
    par = cm.par

    def fg(u):
        vals = par.to_values(u)
        ev = _evaluate(cm, vals, data, grad=True, strict=False)
        if not np.isfinite(ev.loglik):
            return -np.inf, np.zeros_like(u)
        return ev.loglik, par.grad_free(vals, ev.grad)

    def info_fn(u):
        return fd_information(lambda x: fg(x)[1], u, controls.fd_step)

    try:
        opt = maximize(fg, par.to_free(start.values), info_fn=info_fn if controls.newton_steps else None,
                       max_iter=controls.max_iter, grad_tol=controls.grad_tol,
                       newton_steps=controls.newton_steps, scale=max(1.0, float(data.weights.sum())),
                       trace=_trace)
    except ArithmeticError as exc:
        raise NumericalError(str(exc)) from None
    flags = list(_flags or []) + opt.flags
    vals = par.to_values(opt.u)
    gmax = float(np.max(np.abs(opt.grad))) if len(opt.grad) else 0.0
    converged = gmax < max(controls.grad_tol, 1e-6)
    if not converged:
        edge = []
        _boundary_flags(cm, vals, data, edge)
        if opt.stalled and any(f.startswith("boundary") for f in edge):
            converged = True
            flags.append(f"converged at the edge of the parameter space (gradient max-norm {gmax:.3g})")
        else:
            flags.append(f"gradient max-norm {gmax:.3g} above tolerance")
    out = _finish(cm, vals, data, opt.loglik, _iters + opt.n_iter, converged, _method, opt.trace, flags,
                  replace(controls, information=False), grad=opt.grad)
    if controls.information:
        out.information = opt.information if opt.information is not None else info_fn(opt.u)
        out.jacobian = par.jacobian(vals)
    return out


def hybrid_fit(data: Dataset, design: MtmmDesign, start: ParameterSet, controls: FitControls = FitControls()):
    """EM iterations to get close, then quasi-Newton/Newton to the stationary point."""
    em = em_fit(data, design, start, replace(controls, max_iter=controls.hybrid_em_iter), finish=False)
    flags = [f for f in em.flags if not f.startswith("EM did not converge")]
    return direct_fit(data, design, em.params, controls, _trace=em.trace, _flags=flags,
                      _iters=em.n_iter, _method="hybrid")


FITTERS = {"em": em_fit, "direct": direct_fit, "hybrid": hybrid_fit}


def fit(data, design, start=None, controls: FitControls = FitControls(), seed=0):
    """Fit with ``controls.method`` from ``start`` (or the default start)."""
    if start is None:
        start = start_values(design, data, seed=seed)
    try:
        fitter = FITTERS[controls.method]
    except KeyError:
        raise ConfigError(f"unknown fitter {controls.method!r}") from None
    return fitter(data, design, start, controls)


# --------------------------------------------------------------------------- starts
def start_values(design: MtmmDesign, data: Dataset, seed=0, jitter=1.0) -> ParameterSet:
    """Method-of-moments starting values with random perturbation.

    Latent priors start near uniform; loadings start proportional to each
    variable's observed standard deviation.
    """
    cm = compiled(design)
    rng = np.random.default_rng(seed)
    vals = ParameterSet.from_dict(design, {}).values.copy()
    names = design.parameter_names
    for i, n in enumerate(names):
        if n.startswith(("alpha[", "kappa[", "phi[")):
            vals[i] = 0.1 * jitter * rng.standard_normal()
        elif n.startswith("logit["):
            vals[i] = np.log(0.1 / 0.9) + 0.1 * jitter * rng.standard_normal()
    w = data.weights
    for var in cm.vars:
        obs = data.mask[:, var.j]
        y, wy = data.y[obs, var.j], w[obs]
        if wy.sum() <= 0:
            continue
        mu = np.average(y, weights=wy)
        sd = np.sqrt(max(np.average((y - mu) ** 2, weights=wy), 1e-8))
        for s, c in enumerate(var.comps):
            plain = s > 0 and design.mixture_policy == "random-response"
            z = rng.standard_normal(4)
            if var.kind == "continuous":
                lam = 0.0 if plain else sd * (1.0 + 0.25 * jitter * z[0])
                gam = 0.0 if plain else sd * 0.5 * jitter * z[1]
                vals[c["lambda"]] = lam
                vals[c["gamma"]] = gam
                vals[c["tau"]] = mu - lam * var.s_eta.mean() - gam * var.s_xi.mean()
                vals[c["sigma"]] = sd * (1.0 if plain else 0.5 * np.exp(0.25 * jitter * z[2]))
            elif var.kind == "ordinal":
                C = var.family.n_categories
                lam = 0.0 if plain else 1.0 + 0.25 * jitter * z[0]
                gam = 0.0 if plain else 0.5 * jitter * z[1]
                vals[c["lambda"]] = lam
                vals[c["gamma"]] = gam
                cum = np.array([np.average(y <= k, weights=wy) for k in range(C - 1)])
                thr = ndtri(np.clip(cum, 0.02, 0.98)) + lam * var.s_eta.mean() + gam * var.s_xi.mean()
                thr = np.maximum.accumulate(thr + np.arange(C - 1) * 1e-3)
                vals[c["thr"]] = thr
            else:
                C = var.family.n_categories
                p = np.array([np.average(y == k, weights=wy) for k in range(C)])
                p = np.clip(p, 0.01, None)
                vals[c["tau"]] = np.log(p[1:] / p[0])
                vals[c["lambda"]] = 0.0 if plain else np.arange(1, C) / (C - 1) + 0.5 * jitter * rng.standard_normal(C - 1)
                vals[c["gamma"]] = 0.0 if plain else 0.5 * jitter * rng.standard_normal(C - 1)
    return enforce_constraints(design, ParameterSet(names, vals))


# --------------------------------------------------------------------------- simulation
def simulate(params: ParameterSet, design: MtmmDesign, n: int, seed=0, return_latent=False):
    """Draw ``n`` units: latent cells from the prior, responses from the family conditionals."""
    if n < 1:
        raise ValueError("n must be positive")
    rep = validate_design(design, params)
    if not rep.ok:
        raise ConfigError("invalid parameters: " + "; ".join(rep.violations))
    cm = compiled(design)
    vals = params.values
    rng = np.random.default_rng(seed)
    pt = np.exp(cm.trait_logprob(vals)).ravel()
    combo = rng.choice(len(pt), size=n, p=pt / pt.sum())
    k = cm.trait_combos[combo]
    l = np.empty((n, cm.M), dtype=int)
    for m in range(cm.M):
        pm = np.exp(cm.method_logprob(vals, m))
        l[:, m] = rng.choice(len(pm), size=n, p=pm / pm.sum())
    pc = np.exp(cm.component_logprob(vals))
    s = rng.choice(len(pc), size=n, p=pc / pc.sum())
    y = np.empty((n, design.n_vars))
    for var in cm.vars:
        col = np.empty(n)
        for sc in range(cm.S):
            rows = np.flatnonzero(s == sc)
            col[rows] = var.sample(rng, vals, sc, k[rows, var.t], l[rows, var.m])
        y[:, var.j] = col
    data = Dataset(y)
    if return_latent:
        return data, {"trait": k, "method": l, "component": s}
    return data


# --------------------------------------------------------------------------- labels
def _reflect_trait(cm, vals, t):
    vals = vals.copy()
    for var in cm.vars:
        if var.t != t:
            continue
        for c in var.comps:
            lam = vals[c["lambda"]].copy() if np.ndim(c["lambda"]) else vals[c["lambda"]]
            if var.kind == "ordinal":
                vals[c["thr"]] = vals[c["thr"]] - lam
            else:
                vals[c["tau"]] = vals[c["tau"]] + lam
            vals[c["lambda"]] = -lam
    names = cm.design.parameter_names
    pot = [np.concatenate([[vals[names.index(f"alpha[{tt + 1},{k + 1}]")] for k in range(Kt - 1)], [0.0]])
           for tt, Kt in enumerate(cm.Ks)]
    for a, b, i in cm.phi_pairs:
        if t in (a, b):
            other = b if a == t else a
            pot[other] = pot[other] + vals[i] * cm.design.trait_scores(other + 1)
            vals[i] = -vals[i]
    pot[t] = pot[t][::-1]
    for tt, Kt in enumerate(cm.Ks):
        for k in range(Kt - 1):
            vals[names.index(f"alpha[{tt + 1},{k + 1}]")] = pot[tt][k] - pot[tt][-1]
    return vals


def _reflect_method(cm, vals, m):
    vals = vals.copy()
    for var in cm.vars:
        if var.m != m:
            continue
        for c in var.comps:
            gam = vals[c["gamma"]].copy() if np.ndim(c["gamma"]) else vals[c["gamma"]]
            if var.kind == "ordinal":
                vals[c["thr"]] = vals[c["thr"]] - gam
            else:
                vals[c["tau"]] = vals[c["tau"]] + gam
            vals[c["gamma"]] = -gam
    cols = cm.kappa_cols[m]
    pot = np.concatenate([vals[cols], [0.0]])[::-1]
    vals[cols] = pot[:-1] - pot[-1]
    return vals


def _permute_components(cm, vals, perm):
    vals = vals.copy()
    old = vals.copy()
    pot = np.concatenate([[0.0], old[cm.logit_cols]])[list(perm)]
    vals[cm.logit_cols] = pot[1:] - pot[0]
    for var in cm.vars:
        for s_new, s_old in enumerate(perm):
            for key, i in var.comps[s_new].items():
                vals[i] = old[var.comps[s_old][key]]
    return vals


def label_variants(params: ParameterSet, design: MtmmDesign):
    """All likelihood-equivalent relabelings reachable by reflecting ordered
    latent variables and, under a free mixture, permuting components."""
    cm = compiled(design)
    traits = [t for t in range(cm.T) if cm.Ks[t] > 1]
    methods = [m for m in range(cm.M) if cm.Ls[m] > 1]
    perms = list(itertools.permutations(range(cm.S))) if design.mixture_policy == "free" else [tuple(range(cm.S))]
    for rt in itertools.product([False, True], repeat=len(traits)):
        for rm in itertools.product([False, True], repeat=len(methods)):
            for perm in perms:
                v = params.values
                for t, r in zip(traits, rt):
                    if r:
                        v = _reflect_trait(cm, v, t)
                for m, r in zip(methods, rm):
                    if r:
                        v = _reflect_method(cm, v, m)
                if perm != tuple(range(cm.S)):
                    v = _permute_components(cm, v, perm)
                cand = ParameterSet(params.names, v)
                if validate_design(design, cand).ok:
                    yield cand


def cell_moments(params: ParameterSet, design: MtmmDesign):
    """Prior cell probabilities (grid) and per-variable conditional means and
    second moments broadcast to the grid."""
    cm = compiled(design)
    vals = params.values
    prior = np.exp(cm.log_prior(vals))
    means, seconds = [], []
    for var in cm.vars:
        mu = np.zeros((var.K, var.L, cm.S))
        m2 = np.zeros_like(mu)
        for s in range(cm.S):
            mu[..., s], m2[..., s] = var.moments(vals, s)
        shape = cm.var_axes(var)
        means.append(mu.reshape(shape))
        seconds.append(m2.reshape(shape))
    return prior, means, seconds


def canonicalize(params: ParameterSet, design: MtmmDesign, reference: ParameterSet | None = None) -> ParameterSet:
    """Pick one representative among label-equivalent parameter sets.

    With ``reference`` the variant closest to it (squared distance over free
    parameters) is returned. Otherwise each trait's categories are ordered so
    that the expected response of its first indicator increases with the
    category score (methods likewise), and free mixture components are sorted
    by decreasing size.
    """
    cm = compiled(design)
    if reference is not None:
        free = cm.par.free_index
        best, dist = params, np.inf
        for cand in label_variants(params, design):
            d = float(np.sum((cand.values[free] - reference.values[free]) ** 2))
            if d < dist - 1e-12:
                best, dist = cand, d
        return best
    vals = params.values
    for t in range(cm.T):
        if cm.Ks[t] > 1 and _slope(cm, ParameterSet(params.names, vals), design, t, trait=True) < 0:
            vals = _reflect_trait(cm, vals, t)
    for m in range(cm.M):
        if cm.Ls[m] > 1 and _slope(cm, ParameterSet(params.names, vals), design, m, trait=False) < 0:
            vals = _reflect_method(cm, vals, m)
    if cm.S > 1 and design.mixture_policy == "free":
        order = tuple(np.argsort(-cm.component_logprob(vals), kind="stable"))
        if order != tuple(range(cm.S)):
            vals = _permute_components(cm, vals, order)
    return ParameterSet(params.names, vals)


def _slope(cm, params, design, a, trait):
    var = next((v for v in cm.vars if (v.t if trait else v.m) == a), None)
    if var is None:
        return 0.0
    prior, means, _ = cell_moments(params, design)
    axis = a if trait else cm.T + a
    joint = np.broadcast_to(prior * means[var.j], prior.shape)
    others = tuple(x for x in range(prior.ndim) if x != axis)
    cond = joint.sum(axis=others) / np.maximum(prior.sum(axis=others), 1e-300)
    return float(cond[-1] - cond[0])


# --------------------------------------------------------------------------- multistart
@dataclass
class MultistartResult:
    best: FitResult
    logliks: list
    failures: list = field(default_factory=list)


def multistart(data: Dataset, design: MtmmDesign, n_starts: int = 5, seed=0, fitter=None,
               controls: FitControls = FitControls(), extra_starts=(), reference=None,
               jitter=1.0) -> MultistartResult:
    """Run ``fitter`` from ``n_starts`` randomized starts (plus ``extra_starts``)
    and keep the highest log-likelihood, canonically labeled."""
    if n_starts < 1 and not extra_starts:
        raise ValueError("need at least one start")
    fitter = fitter or FITTERS[controls.method]
    seeds = np.random.SeedSequence(seed).generate_state(max(n_starts, 1))
    starts = list(extra_starts) + [start_values(design, data, seed=int(s), jitter=jitter)
                                   for s in seeds[:n_starts]]
    results, lls, failures = [], [], []
    for i, st in enumerate(starts):
        try:
            r = fitter(data, design, st, controls)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            failures.append((i, str(exc)))
            lls.append(-np.inf)
            continue
        results.append(r)
        lls.append(r.loglik)
    if not results:
        raise NumericalError(f"all {len(starts)} starts failed: {failures[0][1]}")
    pool = [r for r in results if r.converged] or results
    best = max(pool, key=lambda r: r.loglik)
    canon = canonicalize(best.params, design, reference)
    if canon != best.params:
        best = _relabel(best, canon, _prepare(design, data))
    return MultistartResult(best, lls, failures)


def _relabel(fit: FitResult, params: ParameterSet, data: Dataset) -> FitResult:
    """Same fit expressed in an equivalent labeling; information is recomputed."""
    out = replace(fit, params=params)
    par = compiled(fit.design).par
    ev = _evaluate(compiled(fit.design), params.values, data, grad=True)
    out.grad_norm = float(np.max(np.abs(par.grad_free(params.values, ev.grad))))
    if fit.information is not None:
        out.information = observed_information(fit.design, params, data)
        out.jacobian = par.jacobian(params.values)
    return out
