"""Numeric identifiability: Jacobian rank at random parameter points, information rank at an estimate."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .design import MtmmDesign
from .errors import ConfigError
from .params import CHOL_DIAG, LOG, THRI, ParameterSet, parameterization

MAX_PATTERNS = 100_000
SCALE_RANGE = (0.05, 20.0)


def numeric_rank(J: np.ndarray, rtol: float = 1e-10):
    """Rank of ``J`` with tolerance max_dim * sigma_max * rtol; also the null directions."""
    J = np.atleast_2d(np.asarray(J, float))
    if J.size == 0:
        return 0, np.zeros(0), np.eye(J.shape[1]), 0.0
    _, sv, Vt = np.linalg.svd(J, full_matrices=True)
    tol = max(J.shape) * (sv[0] if len(sv) else 0.0) * rtol
    rank = int(np.sum(sv > tol))
    return rank, sv, Vt[rank:].T, tol


@dataclass
class IdentReport:
    """Outcome of a rank scan over random parameter points."""

    n_points: int
    seed: int
    n_params: int
    names: tuple
    ranks: list = field(default_factory=list)
    full_rank: list = field(default_factory=list)
    tolerances: list = field(default_factory=list)
    directions: dict = field(default_factory=dict)
    verdict: str = "inconclusive"
    structural: bool = False
    rtol: float = 1e-10
    method: str = ""

    @property
    def deficiency(self) -> int:
        return self.n_params - min(self.ranks) if self.ranks else 0

    def summary(self) -> str:
        lines = [f"verdict: {self.verdict}",
                 f"points: {self.n_points} (seed {self.seed}); parameters: {self.n_params}; jacobian: {self.method}",
                 f"rank per point: {self.ranks}"]
        if self.directions:
            k, D = next(iter(self.directions.items()))
            tag = "structural" if self.structural else "possibly spurious"
            lines.append(f"deficiency ({tag}) at point {k}; null direction(s):")
            for col in D.T:
                top = np.argsort(-np.abs(col))[:4]
                lines.append("  " + ", ".join(f"{self.names[i]}:{col[i]:+.3f}" for i in top if abs(col[i]) > 1e-3))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "n_points": self.n_points, "seed": self.seed,
                "n_params": self.n_params, "ranks": self.ranks, "full_rank": self.full_rank,
                "tolerances": self.tolerances, "structural": self.structural, "rtol": self.rtol,
                "method": self.method, "names": list(self.names),
                "directions": {str(k): v.tolist() for k, v in self.directions.items()}}


def rank_scan(func, draw, n_points: int = 20, seed: int = 0, names=None, rtol: float = 1e-10,
              method: str = "custom") -> IdentReport:
    """Evaluate ``func(u)`` (a Jacobian with one column per parameter) at
    ``n_points`` draws ``draw(rng)`` and aggregate the ranks.

    The verdict is "identified" if every point has full column rank,
    "not-identified" if every point is deficient (structural deficiency) and
    "inconclusive" when only some points are deficient.
    """
    if n_points < 1:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(seed)
    rep = None
    for k in range(n_points):
        u = draw(rng)
        J = func(u)
        p = J.shape[1]
        if rep is None:
            rep = IdentReport(n_points, seed, p, tuple(names) if names is not None else
                              tuple(f"u[{i}]" for i in range(p)), rtol=rtol, method=method)
        r, _, null, tol = numeric_rank(J, rtol)
        rep.ranks.append(r)
        rep.full_rank.append(r == p)
        rep.tolerances.append(float(tol))
        if r < p:
            rep.directions[k] = null
    if all(rep.full_rank):
        rep.verdict = "identified"
    elif not any(rep.full_rank):
        rep.verdict = "not-identified"
        rep.structural = True
    else:
        rep.verdict = "inconclusive"
    return rep


def random_coordinates(design: MtmmDesign, rng) -> np.ndarray:
    """Standard normal free coordinates; scale coordinates kept within [0.05, 20]."""
    par = parameterization(design)
    u = rng.standard_normal(par.n_free)
    scale = np.isin(par.free_kind, [LOG, THRI, CHOL_DIAG])
    u[scale] = np.clip(u[scale], np.log(SCALE_RANGE[0]), np.log(SCALE_RANGE[1]))
    return u


def _fd_jacobian(f, u, rel=1e-6):
    """Central differences with step rel * (1 + |u_j|)."""
    cols = []
    for j in range(len(u)):
        h = rel * (1.0 + abs(u[j]))
        e = np.zeros(len(u))
        e[j] = h
        cols.append((f(u + e) - f(u - e)) / (2.0 * h))
    return np.column_stack(cols)


def _linear_func(design):
    from .linear import moment_jacobian
    par = parameterization(design)

    def func(u):
        vals = par.to_values(u)
        Jn = moment_jacobian(design, ParameterSet(design.parameter_names, vals))
        return np.array([par.grad_free(vals, row) for row in Jn])
    return func


def _patterns(design):
    sizes = [v.family.n_categories for v in design.variables]
    n = int(np.prod(sizes, dtype=float))
    if n > MAX_PATTERNS:
        raise ConfigError(f"{n} response patterns exceed {MAX_PATTERNS}; "
                          "use information_rank on a fitted model instead")
    return Dataset(np.array(list(itertools.product(*[range(c) for c in sizes])), dtype=float))


def _discrete_func(design, n_sim=None):
    from .engine import simulate, unit_loglik
    par = parameterization(design)
    categorical = all(v.family.categorical for v in design.variables)
    names = design.parameter_names
    if categorical:
        pats = _patterns(design)

        def func(u):
            return _fd_jacobian(lambda x: np.exp(unit_loglik(par.params(x), design, pats)), u)
        return func, "pattern-probabilities"

    n_sim = n_sim or max(500, 20 * par.n_free)

    def func(u):
        seed = int(np.abs(u[0]) * 1e6) % (2 ** 31)
        data = simulate(ParameterSet(names, par.to_values(u)), design, n_sim, seed=seed)
        return _fd_jacobian(lambda x: unit_loglik(par.params(x), design, data), u)
    return func, "unit-scores"


def jacobian_rank_scan(design: MtmmDesign, n_points: int = 20, seed: int = 0, rtol: float = 1e-10,
                       n_sim: int | None = None) -> IdentReport:
    """Rank of the observable-moment Jacobian at random parameter points.

    Linear designs use d(mu, vech Sigma)/du (analytic). Discrete designs with
    only categorical responses use the probabilities of every response
    pattern. Discrete designs with continuous responses use per-unit
    log-density scores at ``n_sim`` units simulated from each point, whose
    column rank equals the rank of the Fisher information.
    """
    par = parameterization(design)
    if design.latent == "gaussian":
        func, method = _linear_func(design), "moments"
    else:
        func, method = _discrete_func(design, n_sim)
    return rank_scan(func, lambda rng: random_coordinates(design, rng), n_points, seed,
                     par.free_names, rtol, method)


@dataclass
class InformationRank:
    rank: int
    n_params: int
    eigenvalues: np.ndarray
    tolerance: float
    null_directions: np.ndarray
    names: tuple = ()
    note: str = "rank of the observed information conditions on the data at hand"

    @property
    def full_rank(self) -> bool:
        return self.rank == self.n_params


def information_rank(fit_or_matrix, rtol: float = 1e-10, names=None) -> InformationRank:
    """Eigen-spectrum and numeric rank of an information matrix (or a fit's)."""
    if hasattr(fit_or_matrix, "information"):
        info = fit_or_matrix.information
        names = names or tuple(fit_or_matrix.free_names)
        if info is None:
            raise ValueError("fit has no information matrix")
    else:
        info = fit_or_matrix
    info = np.asarray(info, float)
    if info.ndim != 2 or info.shape[0] != info.shape[1]:
        raise ValueError("information must be square")
    asym = np.max(np.abs(info - info.T)) if info.size else 0.0
    if asym > 1e-8 * max(1.0, np.max(np.abs(info))):
        warnings.warn(f"information matrix asymmetric by {asym:.3g}; symmetrized", stacklevel=2)
    info = 0.5 * (info + info.T)
    w, V = np.linalg.eigh(info)
    order = np.argsort(-w)
    w, V = w[order], V[:, order]
    p = len(w)
    tol = p * (np.max(np.abs(w)) if p else 0.0) * rtol
    rank = int(np.sum(w > tol))
    return InformationRank(rank, p, w, tol, V[:, rank:], tuple(names or ()))
