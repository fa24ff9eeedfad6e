"""Parameter containers and the map between free unconstrained coordinates and natural values."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import MtmmDesign
from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Named parameter values on the natural scale (fixed entries included)."""

    names: tuple
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (len(self.names),):
            raise ValueError(f"{len(self.names)} names but values of shape {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", vals)

    def __getitem__(self, name):
        return float(self.values[self.index(name)])

    def __eq__(self, other):
        return (isinstance(other, ParameterSet) and self.names == other.names
                and np.array_equal(self.values, other.values))

    def __len__(self):
        return len(self.names)

    def index(self, name) -> int:
        try:
            return self._index[name]
        except AttributeError:
            object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})
            return self._index[name]

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))

    def replace(self, updates: dict) -> "ParameterSet":
        vals = self.values.copy()
        for k, v in updates.items():
            vals[self.index(k)] = v
        return ParameterSet(self.names, vals)

    @classmethod
    def from_dict(cls, design: MtmmDesign, mapping: dict, base: "ParameterSet | None" = None):
        """Defaults for everything not in ``mapping``; constraints are then enforced."""
        base = default_parameters(design) if base is None else base
        unknown = set(mapping) - set(base.names)
        if unknown:
            raise ConfigError(f"unknown parameter(s): {sorted(unknown)}")
        return enforce_constraints(design, base.replace(mapping))


def default_parameters(design: MtmmDesign) -> ParameterSet:
    names = design.parameter_names
    vals = np.zeros(len(names))
    for i, n in enumerate(names):
        if n.startswith(("sigma[", "var_eps[", "var_xi[")):
            vals[i] = 1.0
        elif n.startswith("cov_eta["):
            a, b = n[len("cov_eta["):-1].split(",")
            vals[i] = 1.0 if a == b else 0.0
    for s in range(1, design.n_components + 1):
        for i in range(design.n_vars):
            nm = design.measurement_names(i, s)
            if "thr" in nm:
                thr = np.linspace(-1.0, 1.0, len(nm["thr"])) if len(nm["thr"]) > 1 else np.zeros(1)
                for n, x in zip(nm["thr"], thr):
                    vals[names.index(n)] = x
    return enforce_constraints(design, ParameterSet(names, vals))


def enforce_constraints(design: MtmmDesign, params: ParameterSet) -> ParameterSet:
    vals = params.values.copy()
    idx = {n: i for i, n in enumerate(params.names)}
    for c in design.all_constraints:
        if c.name not in idx:
            raise ConfigError(f"constraint on unknown parameter {c.name!r}")
        if c.kind == "fix":
            vals[idx[c.name]] = c.value
    for _ in range(len(design.all_constraints)):
        changed = False
        for c in design.all_constraints:
            if c.kind == "equal":
                if c.target not in idx:
                    raise ConfigError(f"equality target {c.target!r} unknown")
                if vals[idx[c.name]] != vals[idx[c.target]]:
                    vals[idx[c.name]] = vals[idx[c.target]]
                    changed = True
        if not changed:
            break
    return ParameterSet(params.names, vals)


# coordinate kinds
ID, LOG, THR0, THRI, CHOL_OFF, CHOL_DIAG = "id", "log", "thr0", "thri", "chol-off", "chol-diag"


class Parameterization:
    """Free-coordinate view of a design's parameters.

    Natural values map to coordinates element-wise (identity, log for scales)
    or group-wise (ordinal thresholds as first value plus log increments; the
    trait covariance as a Cholesky factor with log diagonal). Fixed entries
    are held at their natural value; equated entries share the coordinate of
    their target.
    """

    def __init__(self, design: MtmmDesign):
        self.design = design
        names = design.parameter_names
        self.names = names
        self.n_full = len(names)
        idx = {n: i for i, n in enumerate(names)}
        self.kind = np.array([ID] * self.n_full, dtype=object)
        self.thr_groups = []
        for i, n in enumerate(names):
            if n.startswith(("sigma[", "var_eps[", "var_xi[")):
                self.kind[i] = LOG
        for s in range(1, design.n_components + 1):
            for v in range(design.n_vars):
                nm = design.measurement_names(v, s)
                if "thr" in nm:
                    g = np.array([idx[n] for n in nm["thr"]])
                    self.kind[g[0]] = THR0
                    self.kind[g[1:]] = THRI
                    self.thr_groups.append(g)
        self.chol = None
        if design.latent == "gaussian":
            T = design.n_traits
            pos = []
            for a in range(1, T + 1):
                for b in range(a, T + 1):
                    i = idx[f"cov_eta[{a},{b}]"]
                    pos.append((i, b - 1, a - 1))
                    self.kind[i] = CHOL_DIAG if a == b else CHOL_OFF
            self.chol = (T, pos)

        fixed = {}
        parent = {}
        for c in design.all_constraints:
            if c.name not in idx:
                raise ConfigError(f"constraint on unknown parameter {c.name!r}")
            if c.kind == "fix":
                fixed[idx[c.name]] = c.value
                parent.pop(idx[c.name], None)
            elif c.kind == "equal":
                if c.target not in idx:
                    raise ConfigError(f"equality target {c.target!r} unknown")
                i, j = idx[c.name], idx[c.target]
                if self.kind[i] != self.kind[j]:
                    raise ConfigError(f"cannot equate {c.name} and {c.target}: different scales")
                parent[i] = j
                fixed.pop(i, None)
            else:
                raise ConfigError(f"unknown constraint kind {c.kind!r}")

        def root(i, depth=0):
            if depth > self.n_full:
                raise ConfigError("cyclic equality constraints")
            return root(parent[i], depth + 1) if i in parent else i

        owner = np.empty(self.n_full, dtype=int)
        for i in range(self.n_full):
            owner[i] = root(i)
        self.fixed_mask = np.zeros(self.n_full, bool)
        self.fixed_values = np.zeros(self.n_full)
        for i in range(self.n_full):
            r = owner[i]
            if r in fixed:
                self.fixed_mask[i] = True
                self.fixed_values[i] = fixed[r]
        # group transforms need whole groups fixed or whole groups not fixed
        groups = list(self.thr_groups)
        if self.chol is not None:
            groups.append(np.array([p[0] for p in self.chol[1]]))
        for g in groups:
            fm = self.fixed_mask[g]
            if fm.any() and not fm.all():
                raise ConfigError("thresholds and trait covariances can only be fixed as a whole block: "
                                  + ", ".join(names[i] for i in g))
        masters = [i for i in range(self.n_full) if not self.fixed_mask[i] and owner[i] == i]
        self.free_index = np.array(masters, dtype=int)
        col = {m: j for j, m in enumerate(masters)}
        self.coord_of = np.array([col.get(owner[i], -1) if not self.fixed_mask[i] else -1
                                  for i in range(self.n_full)], dtype=int)
        self.free_names = tuple(names[i] for i in masters)
        self.free_kind = self.kind[self.free_index]
        self.n_free = len(masters)

    # ------------------------------------------------------------ transforms
    def _coords(self, values):
        values = np.asarray(values, float)
        c = values.copy()
        m = self.kind == LOG
        with np.errstate(divide="ignore"):
            c[m] = np.log(values[m])
        for g in self.thr_groups:
            c[g[1:]] = np.log(np.diff(values[g]))
        if self.chol is not None and not self.fixed_mask[self.chol[1][0][0]]:
            T, pos = self.chol
            S = np.zeros((T, T))
            for i, r, k in pos:
                S[r, k] = S[k, r] = values[i]
            L = np.linalg.cholesky(S)
            for i, r, k in pos:
                c[i] = np.log(L[r, k]) if r == k else L[r, k]
        return c

    def to_free(self, values) -> np.ndarray:
        return self._coords(values)[self.free_index]

    def to_values(self, u) -> np.ndarray:
        u = np.asarray(u, float)
        c = np.where(self.coord_of >= 0, u[np.maximum(self.coord_of, 0)], 0.0)
        nat = c.copy()
        m = self.kind == LOG
        nat[m] = np.exp(c[m])
        for g in self.thr_groups:
            nat[g] = c[g[0]] + np.concatenate([[0.0], np.cumsum(np.exp(c[g[1:]]))])
        if self.chol is not None:
            T, pos = self.chol
            L = np.zeros((T, T))
            for i, r, k in pos:
                L[r, k] = np.exp(c[i]) if r == k else c[i]
            S = L @ L.T
            for i, r, k in pos:
                nat[i] = S[r, k]
        return np.where(self.fixed_mask, self.fixed_values, nat)

    def params(self, u) -> ParameterSet:
        return ParameterSet(self.names, self.to_values(u))

    def grad_free(self, values, g_nat, u=None) -> np.ndarray:
        """Chain a natural-scale gradient (full length) to the free coordinates.

        Pass the free vector ``u`` that produced ``values`` when available; it
        avoids refactoring a nearly singular trait covariance.
        """
        values = np.asarray(values, float)
        g = np.asarray(g_nat, float).copy()
        m = self.kind == LOG
        g[m] = g[m] * values[m]
        for grp in self.thr_groups:
            gg = g[grp]
            tail = np.cumsum(gg[::-1])[::-1]
            g[grp[0]] = tail[0]
            g[grp[1:]] = tail[1:] * np.diff(values[grp])
        if self.chol is not None:
            T, pos = self.chol
            if self.fixed_mask[pos[0][0]]:
                c = None
            elif u is not None:
                c = np.where(self.coord_of >= 0, np.asarray(u, float)[np.maximum(self.coord_of, 0)], 0.0)
            else:
                c = self._coords(values)
            if c is not None:
                L = np.zeros((T, T))
                Gs = np.zeros((T, T))
                for i, r, k in pos:
                    L[r, k] = np.exp(c[i]) if r == k else c[i]
                    if r == k:
                        Gs[r, k] = g[i]
                    else:
                        Gs[r, k] = Gs[k, r] = 0.5 * g[i]
                GL = 2.0 * Gs @ L
                for i, r, k in pos:
                    g[i] = GL[r, k] * (L[r, k] if r == k else 1.0)
        out = np.zeros(self.n_free)
        live = self.coord_of >= 0
        np.add.at(out, self.coord_of[live], g[live])
        return out

    def jacobian(self, values, u=None) -> np.ndarray:
        """d natural[free masters] / d free coordinates."""
        J = np.zeros((self.n_free, self.n_free))
        for j, i in enumerate(self.free_index):
            e = np.zeros(self.n_full)
            e[i] = 1.0
            J[j] = self.grad_free(values, e, u)
        return J

    def scale_coords(self) -> np.ndarray:
        """Mask of free coordinates that are logs of scales."""
        return np.isin(self.free_kind, [LOG, THRI, CHOL_DIAG])


_CACHE = {}


def parameterization(design: MtmmDesign) -> Parameterization:
    p = _CACHE.get(design)
    if p is None:
        if len(_CACHE) > 256:
            _CACHE.clear()
        p = _CACHE[design] = Parameterization(design)
    return p
