"""Trait x method designs, parameter naming, latent cells and design validation."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import ConfigError
from .families import CumulativeProbit, Family, Gaussian, Multinomial

MAX_CELLS = 1_000_000


@dataclass(frozen=True)
class VariableSpec:
    """One observed variable: trait ``t`` measured by method ``m`` (both 1-based)."""

    trait: int
    method: int
    family: Family = Gaussian()

    @property
    def label(self) -> str:
        return f"{self.trait},{self.method}"


@dataclass(frozen=True)
class Constraint:
    """Fix a parameter at ``value`` or equate it to ``target`` (natural scale)."""

    kind: str
    name: str
    value: float | None = None
    target: str | None = None

    @classmethod
    def fix(cls, name, value):
        return cls("fix", name, value=float(value))

    @classmethod
    def equal(cls, name, target):
        return cls("equal", name, target=target)


def category_scores(n: int) -> np.ndarray:
    """Equally spaced scores on [0, 1]; a single category scores 0."""
    if n == 1:
        return np.zeros(1)
    return np.linspace(0.0, 1.0, n)


def _suffix(s, n_components):
    return f"|{s}" if n_components > 1 else ""


@dataclass(frozen=True)
class LatentCell:
    trait_categories: tuple
    method_categories: tuple
    component: int
    trait_scores: tuple
    method_scores: tuple


@dataclass(frozen=True)
class MtmmDesign:
    """A fully (or partially) crossed trait x method measurement design.

    Parameters
    ----------
    n_traits, n_methods : int
    variables : tuple of VariableSpec
        Observed variables in data-column order.
    trait_categories, method_categories : tuple of int
        Number of discrete latent categories per trait / method. Ignored for
        ``latent="gaussian"``.
    n_components : int
        Size of the error-process mixture; 1 is the homogeneous model.
    latent : {"discrete", "gaussian"}
        Discrete interval-level latents (general engine) or the linear
        Gaussian factor model.
    associations : bool
        Include linear-by-linear trait associations in the latent log-linear model.
    mixture_policy : {"random-response", "free"}
        How components after the first are constrained. Under
        ``"random-response"`` they carry no trait or method loadings.
    method_factors : tuple of bool, optional
        Gaussian designs only: which methods carry a method factor.
    constraints : tuple of Constraint
        User constraints, applied after the automatic identification ones.
    auto_identify : bool
        Generate the identification constraints automatically.
    """

    n_traits: int
    n_methods: int
    variables: tuple
    trait_categories: tuple = ()
    method_categories: tuple = ()
    n_components: int = 1
    latent: str = "discrete"
    associations: bool = True
    mixture_policy: str = "random-response"
    method_factors: tuple | None = None
    constraints: tuple = ()
    auto_identify: bool = True
    trait_names: tuple | None = None
    method_names: tuple | None = None

    def __post_init__(self):
        if self.n_traits < 1 or self.n_methods < 1:
            raise ConfigError("need at least one trait and one method")
        if self.latent not in ("discrete", "gaussian"):
            raise ConfigError(f"unknown latent kind {self.latent!r}")
        if self.mixture_policy not in ("random-response", "free"):
            raise ConfigError(f"unknown mixture policy {self.mixture_policy!r}")
        seen = set()
        for v in self.variables:
            if not (1 <= v.trait <= self.n_traits and 1 <= v.method <= self.n_methods):
                raise ConfigError(f"variable ({v.trait},{v.method}) outside the design")
            if (v.trait, v.method) in seen:
                raise ConfigError(f"variable ({v.trait},{v.method}) declared twice")
            seen.add((v.trait, v.method))
        if self.latent == "discrete":
            if len(self.trait_categories) != self.n_traits:
                raise ConfigError("trait_categories must have one entry per trait")
            if len(self.method_categories) != self.n_methods:
                raise ConfigError("method_categories must have one entry per method")
            if min(self.trait_categories + self.method_categories) < 1:
                raise ConfigError("latent cardinalities must be >= 1")
            if self.n_components < 1:
                raise ConfigError("n_components must be >= 1")
            if self.n_cells > MAX_CELLS:
                raise ConfigError(f"{self.n_cells} latent cells exceeds the limit of {MAX_CELLS}")
        else:
            if any(not isinstance(v.family, Gaussian) for v in self.variables):
                raise ConfigError("gaussian-latent designs need gaussian responses")
            if self.n_components != 1:
                raise ConfigError("gaussian-latent designs are homogeneous")
            if self.method_factors is not None and len(self.method_factors) != self.n_methods:
                raise ConfigError("method_factors must have one entry per method")

    # ------------------------------------------------------------------ builders
    @classmethod
    def crossed(cls, n_traits, n_methods, family=Gaussian(), trait_categories=3,
                method_categories=2, n_components=1, **kw):
        """All T*M crossings (method-major column order) with one family."""
        fams = family if isinstance(family, (list, tuple)) else None
        variables = []
        for m in range(1, n_methods + 1):
            for t in range(1, n_traits + 1):
                fam = fams[len(variables)] if fams else family
                variables.append(VariableSpec(t, m, fam))
        tk = trait_categories if isinstance(trait_categories, (list, tuple)) else (trait_categories,) * n_traits
        ml = method_categories if isinstance(method_categories, (list, tuple)) else (method_categories,) * n_methods
        return cls(n_traits, n_methods, tuple(variables), tuple(tk), tuple(ml), n_components, **kw)

    @classmethod
    def linear(cls, n_traits, n_methods, method_factors=None, **kw):
        variables = tuple(VariableSpec(t, m, Gaussian())
                          for m in range(1, n_methods + 1) for t in range(1, n_traits + 1))
        if method_factors is None:
            method_factors = (True,) * n_methods
        return cls(n_traits, n_methods, variables, latent="gaussian",
                   method_factors=tuple(method_factors), **kw)

    def with_sizes(self, trait_categories=None, n_components=None):
        """Same design with new latent trait cardinality and/or mixture size."""
        tk = self.trait_categories
        if trait_categories is not None:
            tk = (trait_categories,) * self.n_traits if np.isscalar(trait_categories) else tuple(trait_categories)
        return replace(self, trait_categories=tuple(tk),
                       n_components=self.n_components if n_components is None else n_components)

    # --------------------------------------------------------------- properties
    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_cells(self) -> int:
        if self.latent != "discrete":
            return 0
        return int(np.prod(self.trait_categories) * np.prod(self.method_categories) * self.n_components)

    @property
    def has_method_factor(self) -> tuple:
        if self.latent == "gaussian":
            return tuple(self.method_factors) if self.method_factors is not None else (True,) * self.n_methods
        return tuple(L > 1 for L in self.method_categories)

    def trait_scores(self, t: int) -> np.ndarray:
        return category_scores(self.trait_categories[t - 1])

    def method_scores(self, m: int) -> np.ndarray:
        return category_scores(self.method_categories[m - 1])

    def variable_index(self, t: int, m: int) -> int:
        for i, v in enumerate(self.variables):
            if v.trait == t and v.method == m:
                return i
        raise IndexError(f"no variable ({t},{m}) in design")

    def variable_label(self, i: int) -> str:
        v = self.variables[i]
        if self.trait_names and self.method_names:
            return f"{self.trait_names[v.trait - 1]}/{self.method_names[v.method - 1]}"
        return f"y[{v.trait},{v.method}]"

    @cached_property
    def parameter_names(self) -> tuple:
        return tuple(_names(self))

    @cached_property
    def auto_constraints(self) -> tuple:
        return tuple(_auto_constraints(self)) if self.auto_identify else ()

    @cached_property
    def all_constraints(self) -> tuple:
        user = {c.name for c in self.constraints}
        return tuple(c for c in self.auto_constraints if c.name not in user) + tuple(self.constraints)

    def measurement_names(self, i: int, s: int = 1) -> dict:
        """Parameter names of variable ``i`` (0-based) in component ``s``."""
        v = self.variables[i]
        key = f"{v.trait},{v.method}"
        suf = _suffix(s, self.n_components)
        fam = v.family
        if self.latent == "gaussian":
            return {"tau": f"tau[{key}]", "lambda": f"lambda[{key}]",
                    "gamma": f"gamma[{key}]", "var_eps": f"var_eps[{key}]"}
        if isinstance(fam, CumulativeProbit):
            return {"thr": [f"thr[{key}:{k}{suf}]" for k in range(1, fam.n_categories)],
                    "lambda": f"lambda[{key}{suf}]", "gamma": f"gamma[{key}{suf}]"}
        if isinstance(fam, Multinomial):
            ks = range(1, fam.n_categories)
            return {"tau": [f"tau[{key}:{k}{suf}]" for k in ks],
                    "lambda": [f"lambda[{key}:{k}{suf}]" for k in ks],
                    "gamma": [f"gamma[{key}:{k}{suf}]" for k in ks]}
        return {"tau": f"tau[{key}{suf}]", "lambda": f"lambda[{key}{suf}]",
                "gamma": f"gamma[{key}{suf}]", "sigma": f"sigma[{key}{suf}]"}

    def cells(self):
        """Enumerate every latent cell (trait categories, method categories, component)."""
        if self.latent != "discrete":
            raise ConfigError("cells exist only for discrete-latent designs")
        ranges = [range(K) for K in self.trait_categories] + \
                 [range(L) for L in self.method_categories] + [range(self.n_components)]
        T = self.n_traits
        for combo in itertools.product(*ranges):
            kt, lm, s = combo[:T], combo[T:-1], combo[-1]
            yield LatentCell(
                tuple(kt), tuple(lm), s,
                tuple(float(self.trait_scores(t + 1)[k]) for t, k in enumerate(kt)),
                tuple(float(self.method_scores(m + 1)[l]) for m, l in enumerate(lm)),
            )


def _flatten(x):
    return list(x) if isinstance(x, list) else [x]


def _names(d: MtmmDesign):
    out = []
    if d.latent == "gaussian":
        for i in range(d.n_vars):
            nm = d.measurement_names(i)
            out += [nm["tau"], nm["lambda"], nm["gamma"]]
        out += [f"cov_eta[{a},{b}]" for a in range(1, d.n_traits + 1) for b in range(a, d.n_traits + 1)]
        out += [f"var_xi[{m}]" for m in range(1, d.n_methods + 1)]
        out += [d.measurement_names(i)["var_eps"] for i in range(d.n_vars)]
        return out
    for t, K in enumerate(d.trait_categories, start=1):
        out += [f"alpha[{t},{k}]" for k in range(1, K)]
    for m, L in enumerate(d.method_categories, start=1):
        out += [f"kappa[{m},{l}]" for l in range(1, L)]
    if d.associations:
        out += [f"phi[{a},{b}]" for a in range(1, d.n_traits + 1) for b in range(a + 1, d.n_traits + 1)]
    out += [f"logit[{s}]" for s in range(2, d.n_components + 1)]
    for s in range(1, d.n_components + 1):
        for i in range(d.n_vars):
            nm = d.measurement_names(i, s)
            for key in ("tau", "thr", "lambda", "gamma", "sigma"):
                if key in nm:
                    out += _flatten(nm[key])
    return out


def _auto_constraints(d: MtmmDesign):
    if d.latent == "gaussian":
        has_mf = d.has_method_factor
        first_of_trait, first_of_method = set(), set()
        for v in d.variables:
            nm = d.measurement_names(d.variable_index(v.trait, v.method))
            if v.trait not in first_of_trait:
                first_of_trait.add(v.trait)
                yield Constraint.fix(nm["lambda"], 1.0)
            if not has_mf[v.method - 1]:
                yield Constraint.fix(nm["gamma"], 0.0)
            elif v.method not in first_of_method:
                first_of_method.add(v.method)
                yield Constraint.fix(nm["gamma"], 1.0)
        for m, present in enumerate(has_mf, start=1):
            if not present:
                yield Constraint.fix(f"var_xi[{m}]", 0.0)
        return
    for s in range(1, d.n_components + 1):
        random_response = s > 1 and d.mixture_policy == "random-response"
        for i, v in enumerate(d.variables):
            nm = d.measurement_names(i, s)
            if random_response or d.trait_categories[v.trait - 1] == 1:
                for n in _flatten(nm["lambda"]):
                    yield Constraint.fix(n, 0.0)
            if random_response or d.method_categories[v.method - 1] == 1:
                for n in _flatten(nm["gamma"]):
                    yield Constraint.fix(n, 0.0)


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_design(design: MtmmDesign, params) -> ValidationReport:
    """Check a parameter set against a design; never raises.

    ``params`` may be a :class:`~gmtmm.params.ParameterSet` or
    :class:`~gmtmm.linear.LinearParams`.
    """
    rep = ValidationReport()
    names = design.parameter_names
    if hasattr(params, "to_parameter_set"):
        try:
            params = params.to_parameter_set(design)
        except Exception as exc:  # shape mismatch
            rep.violations.append(f"shape mismatch: {exc}")
            return rep
    if tuple(params.names) != tuple(names):
        rep.violations.append(
            f"shape mismatch: parameter set has {len(params.names)} entries, design expects {len(names)}")
        return rep
    vals = dict(zip(params.names, np.asarray(params.values, float)))
    cons = {c.name: c for c in design.all_constraints}
    for c in design.all_constraints:
        if c.name not in vals:
            rep.violations.append(f"constraint on unknown parameter {c.name}")
            continue
        if c.kind == "fix" and not np.isclose(vals[c.name], c.value, rtol=0, atol=1e-12):
            rep.violations.append(f"fixed parameter {c.name}={vals[c.name]:g} differs from {c.value:g}")
        if c.kind == "equal":
            if c.target not in vals:
                rep.violations.append(f"equality target {c.target} unknown")
            elif not np.isclose(vals[c.name], vals[c.target], rtol=0, atol=1e-12):
                rep.violations.append(f"equated parameters {c.name} and {c.target} differ")

    def fixed_at(name, value):
        c = cons.get(name)
        return c is not None and c.kind == "fix" and c.value == value

    if design.latent == "gaussian":
        has_mf = design.has_method_factor
        for t in range(1, design.n_traits + 1):
            idx = [i for i, v in enumerate(design.variables) if v.trait == t]
            if idx and not any(fixed_at(design.measurement_names(i)["lambda"], 1.0) for i in idx):
                rep.violations.append(f"missing unit-loading constraint for trait {t}")
        for m in range(1, design.n_methods + 1):
            idx = [i for i, v in enumerate(design.variables) if v.method == m]
            if has_mf[m - 1] and idx and not any(
                    fixed_at(design.measurement_names(i)["gamma"], 1.0) for i in idx):
                rep.violations.append(f"missing unit-loading constraint for method {m}")
        for n, x in vals.items():
            if n.startswith("var_eps") and x <= 0:
                rep.violations.append(f"nonpositive error scale {n}={x:g}")
            if n.startswith("var_xi") and x < 0:
                rep.violations.append(f"negative method variance {n}={x:g}")
        T = design.n_traits
        cov = np.zeros((T, T))
        for a in range(1, T + 1):
            for b in range(a, T + 1):
                cov[a - 1, b - 1] = cov[b - 1, a - 1] = vals[f"cov_eta[{a},{b}]"]
        if np.linalg.eigvalsh(cov).min() <= 0:
            rep.violations.append("trait covariance not positive definite")
        return rep

    for s in range(1, design.n_components + 1):
        for i, v in enumerate(design.variables):
            nm = design.measurement_names(i, s)
            if "sigma" in nm and vals[nm["sigma"]] <= 0:
                rep.violations.append(f"nonpositive error scale {nm['sigma']}={vals[nm['sigma']]:g}")
            if "thr" in nm:
                thr = np.array([vals[n] for n in nm["thr"]])
                if np.any(np.diff(thr) <= 0):
                    rep.violations.append(f"thresholds of y[{v.label}] not strictly increasing")
            if design.trait_categories[v.trait - 1] == 1:
                for n in _flatten(nm["lambda"]):
                    if not fixed_at(n, 0.0):
                        rep.violations.append(f"loading {n} on a single-category trait is free")
            if design.method_categories[v.method - 1] == 1:
                for n in _flatten(nm["gamma"]):
                    if not fixed_at(n, 0.0):
                        rep.violations.append(f"loading {n} on a single-category method is free")
    return rep
