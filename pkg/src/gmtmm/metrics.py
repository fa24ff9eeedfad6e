"""Model comparison grids, standard errors and model-implied quality coefficients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .design import MtmmDesign
from .engine import FitControls, cell_moments, multistart
from .errors import GmtmmError, NumericalError, SingularInformationError
from .identify import information_rank
from .params import ParameterSet, parameterization
from .results import FitResult, QualityReport, aic_bic

log = logging.getLogger(__name__)

__all__ = ["aic_bic", "QualityReport", "ModelGridResult", "model_grid", "implied_quality",
           "quality", "quality_intervals", "information_se", "bootstrap_se", "BootstrapResult",
           "linear_equivalent", "embed_components"]


# ----------------------------------------------------------------------------- quality
def implied_quality(params: ParameterSet, design: MtmmDesign) -> QualityReport:
    """Model-implied cor(y_tm, score(eta_t)) and cor(y_tm, score(xi_m)).

    Moments come from exact enumeration of the latent cells and the family
    conditional means, so mixtures are handled on their marginal joint
    distribution. Coefficients of a single-category latent are 0.
    """
    if design.latent != "discrete":
        return quality(params, design)
    prior, means, seconds = cell_moments(params, design)
    T = design.n_traits
    shape = prior.shape
    rel, meth = np.zeros(design.n_vars), np.zeros(design.n_vars)
    for j, v in enumerate(design.variables):
        ey = np.sum(prior * means[j])
        vy = np.sum(prior * seconds[j]) - ey ** 2
        if not vy > 0:
            raise NumericalError(f"zero response variance for {design.variable_label(j)}")
        for out, axis, scores in ((rel, v.trait - 1, design.trait_scores(v.trait)),
                                  (meth, T + v.method - 1, design.method_scores(v.method))):
            sh = [1] * len(shape)
            sh[axis] = len(scores)
            s = scores.reshape(sh)
            es = np.sum(prior * s)
            vs = np.sum(prior * s * s) - es ** 2
            if vs <= 1e-300:
                out[j] = 0.0
                continue
            cov = np.sum(prior * means[j] * s) - ey * es
            out[j] = np.clip(cov / np.sqrt(vy * vs), -1.0, 1.0)
    labels = tuple(design.variable_label(j) for j in range(design.n_vars))
    return QualityReport(labels, rel, meth, source="model-implied-moments")


def quality(params: ParameterSet, design: MtmmDesign) -> QualityReport:
    """Quality coefficients for either a linear or a discrete-latent design."""
    if design.latent == "gaussian":
        from .linear import LinearParams, reliability_method_effects
        labels = tuple(design.variable_label(j) for j in range(design.n_vars))
        return reliability_method_effects(LinearParams.from_parameter_set(design, params), labels)
    return implied_quality(params, design)


def linear_equivalent(params: ParameterSet, design: MtmmDesign):
    """Linear-model parameters with the same first two moments as a homogeneous
    discrete-latent design with gaussian responses (latent scores play the factors)."""
    from .families import Gaussian
    from .linear import LinearParams
    if design.n_components != 1 or not all(isinstance(v.family, Gaussian) for v in design.variables):
        raise ValueError("needs a homogeneous design with gaussian responses")
    prior = cell_moments(params, design)[0]
    T, M, V = design.n_traits, design.n_methods, design.n_vars
    axes = len(prior.shape)

    def score_grid(axis, scores):
        sh = [1] * axes
        sh[axis] = len(scores)
        return np.broadcast_to(scores.reshape(sh), prior.shape)

    S = [score_grid(t, design.trait_scores(t + 1)) for t in range(T)]
    X = [score_grid(T + m, design.method_scores(m + 1)) for m in range(M)]
    mean_s = np.array([np.sum(prior * s) for s in S])
    C = np.array([[np.sum(prior * a * b) for b in S] for a in S]) - np.outer(mean_s, mean_s)
    mean_x = np.array([np.sum(prior * x) for x in X])
    vx = np.array([np.sum(prior * x * x) for x in X]) - mean_x ** 2
    tau, ve = np.zeros(V), np.zeros(V)
    L, G = np.zeros((V, T)), np.zeros((V, M))
    d = params.as_dict()
    for i, v in enumerate(design.variables):
        nm = design.measurement_names(i)
        L[i, v.trait - 1] = d[nm["lambda"]]
        G[i, v.method - 1] = d[nm["gamma"]]
        tau[i] = d[nm["tau"]] + L[i, v.trait - 1] * mean_s[v.trait - 1] + G[i, v.method - 1] * mean_x[v.method - 1]
        ve[i] = d[nm["sigma"]] ** 2
    return LinearParams(tau, L, G, C, vx, ve, tuple((v.trait, v.method) for v in design.variables))


def quality_intervals(fit: FitResult, level: float = 0.95, step: float = 1e-6) -> QualityReport:
    """Delta-method intervals for the quality coefficients of a fit."""
    design = fit.design
    par = parameterization(design)
    u = par.to_free(fit.params.values)
    cov_u = _inverse_information(fit)

    def coef(x):
        q = quality(par.params(x), design)
        return np.concatenate([q.reliability, q.method_effect])

    base = coef(u)
    G = np.zeros((len(base), len(u)))
    for k in range(len(u)):
        h = step * (1.0 + abs(u[k]))
        e = np.zeros(len(u))
        e[k] = h
        G[:, k] = (coef(u + e) - coef(u - e)) / (2 * h)
    se = np.sqrt(np.maximum(np.einsum("ik,kl,il->i", G, cov_u, G), 0.0))
    z = norm.ppf(0.5 + level / 2)
    lo, hi = np.clip(base - z * se, -1, 1), np.clip(base + z * se, -1, 1)
    V = design.n_vars
    q = quality(fit.params, design)
    return replace(q, reliability_lower=lo[:V], reliability_upper=hi[:V],
                   method_lower=lo[V:], method_upper=hi[V:], source=q.source + "+delta")


# ----------------------------------------------------------------------------- standard errors
def _inverse_information(fit: FitResult) -> np.ndarray:
    if fit.information is None:
        raise ValueError("fit has no information matrix")
    ir = information_rank(fit.information, names=fit.free_names)
    if not ir.full_rank:
        raise SingularInformationError(
            f"information has rank {ir.rank} < {ir.n_params}; inspect the null directions "
            "with the identification tools", directions=ir.null_directions, names=fit.free_names)
    return np.linalg.inv(0.5 * (fit.information + fit.information.T))


def information_se(fit: FitResult) -> dict:
    """Standard errors of the free parameters on their natural scale.

    Inverse observed information on the unconstrained coordinates, mapped by
    the delta method through the coordinate Jacobian.
    """
    cov_u = _inverse_information(fit)
    J = fit.jacobian if fit.jacobian is not None else np.eye(len(cov_u))
    cov = J @ cov_u @ J.T
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return dict(zip(fit.free_names, se.tolist()))


# ----------------------------------------------------------------------------- bootstrap
@dataclass
class BootstrapResult:
    names: tuple
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    quality: QualityReport
    quality_se: np.ndarray
    failures: list = field(default_factory=list)
    B: int = 0
    flags: list = field(default_factory=list)

    @property
    def unreliable(self) -> bool:
        return len(self.failures) > 0.2 * self.B

    def to_dict(self) -> dict:
        return {"B": self.B, "failures": len(self.failures), "unreliable": self.unreliable,
                "flags": self.flags,
                "parameters": [{"name": n, "estimate": float(e), "se": float(s), "lower": float(lo),
                                "upper": float(hi)} for n, e, s, lo, hi in
                               zip(self.names, self.estimate, self.se, self.lower, self.upper)],
                "quality": self.quality.to_dict()}


def _default_fitter(design, controls, n_starts):
    if design.latent == "gaussian":
        from .linear import fit_ml

        def fit(data, start=None, seed=0):
            from .linear import LinearParams
            st = LinearParams.from_parameter_set(design, start) if start is not None else None
            return fit_ml(data, design, st)
        return fit

    def fit(data, start=None, seed=0):
        extra = (start,) if start is not None else ()
        return multistart(data, design, n_starts=n_starts, seed=seed, controls=controls,
                          extra_starts=extra, reference=start).best
    return fit


def bootstrap_se(data: Dataset, design: MtmmDesign, fitter=None, B: int = 200, seed: int = 0,
                 estimate: FitResult | None = None, n_starts: int = 1,
                 controls: FitControls = FitControls(information=False)) -> BootstrapResult:
    """Nonparametric bootstrap over units.

    Units are drawn with probability proportional to their weight. Each
    replicate is refit from the full-sample estimate (plus ``n_starts``
    random starts) and relabeled to be closest to it. Returns standard
    deviations and 2.5/97.5 percentiles of parameters and quality
    coefficients; more than 20% failed replicates marks the result unreliable.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    fitter = fitter or _default_fitter(design, controls, n_starts)
    data = data.retained()
    if estimate is None:
        estimate = fitter(data, None, seed)
    free = list(estimate.free_names)
    idx = [estimate.params.index(n) for n in free]
    p_w = data.weights / data.weights.sum()
    ss = np.random.SeedSequence(seed)
    reps, quals, failures = [], [], []
    for b, child in enumerate(ss.spawn(B)):
        rng = np.random.default_rng(child)
        rows = rng.choice(data.n, size=data.n, replace=True, p=p_w)
        boot = Dataset(data.y[rows], data.mask[rows])
        try:
            f = fitter(boot, estimate.params, int(child.generate_state(1)[0]))
            q = quality(f.params, design)
        except (GmtmmError, np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
            failures.append((b, str(exc)))
            continue
        reps.append(f.params.values[idx])
        quals.append(np.concatenate([q.reliability, q.method_effect]))
    flags = []
    if len(failures) > 0.2 * B:
        flags.append(f"unreliable: {len(failures)} of {B} replicates failed")
    R = np.array(reps) if reps else np.full((0, len(idx)), np.nan)
    Q = np.array(quals) if quals else np.full((0, 2 * design.n_vars), np.nan)

    def summarize(X):
        if len(X) < 2:
            n = X.shape[1]
            return np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan)
        return X.std(axis=0, ddof=1), np.percentile(X, 2.5, axis=0), np.percentile(X, 97.5, axis=0)

    se, lo, hi = summarize(R)
    qse, qlo, qhi = summarize(Q)
    q0 = quality(estimate.params, design)
    V = design.n_vars
    qrep = replace(q0, reliability_lower=qlo[:V], reliability_upper=qhi[:V],
                   method_lower=qlo[V:], method_upper=qhi[V:], source="bootstrap")
    return BootstrapResult(tuple(free), estimate.params.values[idx], se, lo, hi, R, qrep, qse,
                           failures, B, flags)


# ----------------------------------------------------------------------------- model grid
@dataclass
class ModelGridResult:
    rows: list
    criterion: str = "bic"
    selected: int | None = None

    def best(self):
        return None if self.selected is None else self.rows[self.selected]

    def table(self) -> str:
        head = f"{'K':>3} {'S':>3} {'LL':>12} {'BIC':>12} {'AIC':>12} {'p':>4} conv"
        out = [head]
        for i, r in enumerate(self.rows):
            mark = " *" if i == self.selected else ""
            if r.get("error"):
                out.append(f"{r['K']:>3} {r['S']:>3} failed: {r['error']}")
                continue
            out.append(f"{r['K']:>3} {r['S']:>3} {r['loglik']:12.1f} {r['bic']:12.1f} {r['aic']:12.1f} "
                       f"{r['n_params']:>4} {'yes' if r['converged'] else 'no'}{mark}")
        return "\n".join(out)

    def to_dict(self) -> dict:
        rows = [{k: v for k, v in r.items() if k != "fit"} for r in self.rows]
        return {"criterion": self.criterion, "selected": self.selected, "rows": rows}


def embed_components(params: ParameterSet, design: MtmmDesign, target: MtmmDesign,
                     data: Dataset, weight: float = 0.02) -> ParameterSet:
    """Start values for a design with more mixture components from a fitted
    smaller one: existing components are copied, new ones get small weight
    and marginal response moments."""
    from .engine import start_values
    base = start_values(target, data, seed=0, jitter=0.0).as_dict()
    src = params.as_dict()
    S0, S1 = design.n_components, target.n_components
    for n, v in src.items():
        if n.startswith(("alpha[", "kappa[", "phi[")):
            base[n] = v
    for j in range(design.n_vars):
        for s in range(1, S0 + 1):
            a, b = design.measurement_names(j, s), target.measurement_names(j, s)
            for key in a:
                for x, y in zip(np.atleast_1d(a[key]), np.atleast_1d(b[key])):
                    base[str(y)] = src[str(x)]
    p_old = np.exp(np.concatenate([[0.0], [src[f"logit[{s}]"] for s in range(2, S0 + 1)]]))
    p_old = (1 - weight * (S1 - S0)) * p_old / p_old.sum()
    for s in range(2, S1 + 1):
        base[f"logit[{s}]"] = np.log(p_old[s - 1] / p_old[0]) if s <= S0 else np.log(weight / p_old[0])
    return ParameterSet.from_dict(target, base)


def model_grid(data: Dataset, template: MtmmDesign, K_range, S_range, controls: FitControls = FitControls(),
               n_starts: int = 3, seed: int = 0, criterion: str = "bic", nested_starts: bool = True,
               keep_fits: bool = False) -> ModelGridResult:
    """Fit every (K, |S|) combination and select by ``criterion`` among converged rows.

    Failures are recorded per row and never abort the grid. With
    ``nested_starts`` each |S| > 1 model also starts from the |S| - 1
    solution at the same K, so its log-likelihood is at least as large.
    """
    K_range, S_range = list(K_range), list(S_range)
    if not K_range or not S_range:
        raise ValueError("K and S ranges must be nonempty")
    if criterion not in ("bic", "aic"):
        raise ValueError("criterion must be 'bic' or 'aic'")
    data = data.retained()
    rows = []
    ctl = replace(controls, information=False)
    for K in K_range:
        prev = None
        for S in sorted(S_range):
            row = {"K": K, "S": S}
            try:
                design = template.with_sizes(K, S)
                extra = ()
                if nested_starts and prev is not None:
                    extra = (embed_components(prev.params, prev.design, design, data),)
                seed_ks = int(np.random.SeedSequence([seed, K, S]).generate_state(1)[0])
                res = multistart(data, design, n_starts=n_starts, seed=seed_ks, controls=ctl, extra_starts=extra)
                f = res.best
                row.update(loglik=f.loglik, bic=f.bic, aic=f.aic, n_params=f.n_params,
                           converged=bool(f.converged), starts=res.logliks, error=None)
                if keep_fits:
                    row["fit"] = f
                prev = f
            except (GmtmmError, np.linalg.LinAlgError, ArithmeticError) as exc:
                log.warning("grid cell K=%s S=%s failed: %s", K, S, exc)
                row.update(loglik=np.nan, bic=np.nan, aic=np.nan, n_params=None, converged=False,
                           starts=[], error=str(exc))
                prev = None
            rows.append(row)
    ok = [i for i, r in enumerate(rows) if r["converged"]]
    sel = min(ok, key=lambda i: rows[i][criterion]) if ok else None
    return ModelGridResult(rows, criterion, sel)
