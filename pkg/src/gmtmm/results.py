"""Fit results shared by the linear and the general engines."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


def aic_bic(loglik: float, n_params: int, n_obs: int) -> tuple[float, float]:
    """Akaike and Bayesian information criteria."""
    if n_params < 0 or n_obs < 1:
        raise ValueError("need n_params >= 0 and n_obs >= 1")
    aic = -2.0 * loglik + 2.0 * n_params
    bic = -2.0 * loglik + n_params * np.log(n_obs)
    return float(aic), float(bic)


@dataclass
class FitResult:
    """Outcome of a maximum-likelihood fit.

    ``information`` is the observed information on the free unconstrained
    coordinates; ``jacobian`` maps those coordinates to the natural values of
    the free parameters (rows follow ``free_names``).
    """

    params: Any
    loglik: float
    n_iter: int
    converged: bool
    grad_norm: float
    n_params: int
    n_obs: int
    free_names: tuple
    information: np.ndarray | None = None
    jacobian: np.ndarray | None = None
    method: str = ""
    trace: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    design: Any = None

    @property
    def aic(self) -> float:
        return aic_bic(self.loglik, self.n_params, self.n_obs)[0]

    @property
    def bic(self) -> float:
        return aic_bic(self.loglik, self.n_params, self.n_obs)[1]

    @property
    def estimates(self) -> dict:
        d = self.params.as_dict()
        return {n: d[n] for n in self.free_names}

    @property
    def max_decrease(self) -> float:
        """Largest drop in log-likelihood between consecutive iterations (0 if none)."""
        if len(self.trace) < 2:
            return 0.0
        return float(max(0.0, np.max(-np.diff(self.trace))))

    def to_dict(self) -> dict:
        out = {
            "loglik": self.loglik, "aic": self.aic, "bic": self.bic,
            "n_params": self.n_params, "n_obs": self.n_obs, "n_iter": self.n_iter,
            "converged": bool(self.converged), "grad_norm": self.grad_norm,
            "method": self.method, "flags": list(self.flags),
            "estimates": self.estimates, "parameters": self.params.as_dict(),
        }
        return out


@dataclass
class QualityReport:
    """Reliability (cor(y, trait)) and method effect (cor(y, method)) per observed variable.

    Interval bounds are NaN when no uncertainty estimate was requested.
    """

    labels: tuple
    reliability: np.ndarray
    method_effect: np.ndarray
    reliability_lower: np.ndarray | None = None
    reliability_upper: np.ndarray | None = None
    method_lower: np.ndarray | None = None
    method_upper: np.ndarray | None = None
    source: str = "analytic"

    def __post_init__(self):
        n = len(self.labels)
        self.reliability = np.asarray(self.reliability, float)
        self.method_effect = np.asarray(self.method_effect, float)
        for name in ("reliability_lower", "reliability_upper", "method_lower", "method_upper"):
            v = getattr(self, name)
            setattr(self, name, np.full(n, np.nan) if v is None else np.asarray(v, float))

    def rows(self) -> list:
        """Tidy rows (variable, coefficient, estimate, lower, upper)."""
        out = []
        for i, lab in enumerate(self.labels):
            out.append((lab, "reliability", self.reliability[i], self.reliability_lower[i],
                        self.reliability_upper[i]))
            out.append((lab, "method_effect", self.method_effect[i], self.method_lower[i],
                        self.method_upper[i]))
        return out

    def to_dict(self) -> dict:
        def clean(x):
            return None if not np.isfinite(x) else float(x)
        return {"source": self.source,
                "variables": [{"variable": v, "coefficient": c, "estimate": clean(e),
                               "lower": clean(lo), "upper": clean(hi)} for v, c, e, lo, hi in self.rows()]}
