"""Declarative model configuration (YAML checked against a JSON schema) and delimited-text ingestion."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .data import Dataset
from .design import Constraint, MtmmDesign, VariableSpec
from .engine import FitControls
from .errors import ConfigError, DataError
from .families import CensoredGaussian, CumulativeProbit, Gaussian, Multinomial
from .params import ParameterSet, default_parameters, parameterization

log = logging.getLogger(__name__)

_NAMED = {"type": "object", "additionalProperties": False, "required": ["name"],
          "properties": {"name": {"type": "string"}, "categories": {"type": "integer", "minimum": 1},
                         "factor": {"type": "boolean"}}}
_LIST_OR_INT = {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "array", "minItems": 1, "items": _NAMED}]}
_FAMILY = {"enum": ["gaussian", "censored", "cumprobit", "multinomial"]}
_NUM_LIST = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "gmtmm model configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object", "additionalProperties": False, "required": ["traits", "methods"],
            "properties": {
                "traits": _LIST_OR_INT,
                "methods": _LIST_OR_INT,
                "latent": {"enum": ["discrete", "gaussian"]},
                "trait_categories": {"type": "integer", "minimum": 1},
                "method_categories": {"type": "integer", "minimum": 1},
                "components": {"type": "integer", "minimum": 1},
                "associations": {"type": "boolean"},
                "mixture_policy": {"enum": ["random-response", "free"]},
                "family": _FAMILY,
                "lower": {"type": "number"},
                "categories": {"type": "integer", "minimum": 2},
                "variables": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "additionalProperties": False, "required": ["trait", "method"],
                    "properties": {"trait": {"type": ["string", "integer"]},
                                   "method": {"type": ["string", "integer"]},
                                   "family": _FAMILY, "lower": {"type": "number"},
                                   "categories": {"type": "integer", "minimum": 2},
                                   "column": {"type": "string"}}}},
                "constraints": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"fix": {"type": "string"}, "value": {"type": "number"},
                                   "equal": {"type": "string"}, "to": {"type": "string"}}}},
            },
        },
        "fit": {
            "type": "object", "additionalProperties": False,
            "properties": {"method": {"enum": ["em", "direct", "hybrid"]},
                           "max_iter": {"type": "integer", "minimum": 1},
                           "tol": {"type": "number", "exclusiveMinimum": 0},
                           "hybrid_em_iter": {"type": "integer", "minimum": 0},
                           "n_starts": {"type": "integer", "minimum": 1},
                           "information": {"type": "boolean"}},
        },
        "data": {
            "type": "object", "additionalProperties": False, "required": ["path"],
            "properties": {"path": {"type": "string"}, "delimiter": {"type": "string", "minLength": 1},
                           "missing": {"type": "array", "items": {"type": "string"}},
                           "weights": {"type": "string"}},
        },
        "truth": {
            "type": "object", "additionalProperties": False,
            "properties": {"preset": {"enum": ["linked-income", "heterogeneous-income"]},
                           "values": {"type": "object", "additionalProperties": {"type": "number"}}},
        },
        "identify": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_points": {"type": "integer", "minimum": 1},
                           "rtol": {"type": "number", "exclusiveMinimum": 0},
                           "n_sim": {"type": "integer", "minimum": 10}},
        },
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {"K": _NUM_LIST, "S": _NUM_LIST, "criterion": {"enum": ["bic", "aic"]},
                           "n_starts": {"type": "integer", "minimum": 1}},
        },
        "bootstrap": {
            "type": "object", "additionalProperties": False,
            "properties": {"B": {"type": "integer", "minimum": 2}},
        },
        "simulate": {
            "type": "object", "additionalProperties": False,
            "properties": {"n": {"type": "integer", "minimum": 1}},
        },
        "study": {
            "type": "object", "additionalProperties": False,
            "properties": {"sample_sizes": _NUM_LIST, "R": {"type": "integer", "minimum": 2},
                           "n_starts": {"type": "integer", "minimum": 0},
                           "start_at_truth": {"type": "boolean"}},
        },
    },
}


def _describe(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<top level>"
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - allowed)
        return f"unknown key {extra[0]!r} in {where}" if extra else err.message
    return f"invalid value at {where}: {err.message}"


@dataclass
class ModelConfig:
    """A validated configuration file."""

    raw: dict
    path: str | None = None
    design: MtmmDesign = field(init=False)
    columns: tuple = field(init=False)

    def __post_init__(self):
        self.design, self.columns = build_design(self.raw["model"])

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    @property
    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def controls(self, information=True) -> FitControls:
        f = self.section("fit")
        kw = {k: f[k] for k in ("method", "max_iter", "tol", "hybrid_em_iter") if k in f}
        return FitControls(information=f.get("information", information), **kw)

    def truth(self) -> ParameterSet:
        from . import presets
        t = self.section("truth")
        if "preset" in t:
            ps = (presets.linked_income_truth() if t["preset"] == "linked-income"
                  else presets.heterogeneous_income_truth())
            if ps.names != self.design.parameter_names:
                raise ConfigError(f"truth preset {t['preset']!r} does not match the model section")
        else:
            ps = default_parameters(self.design)
        values = t.get("values", {})
        unknown = sorted(set(values) - set(self.design.parameter_names))
        if unknown:
            raise ConfigError(f"unknown parameter {unknown[0]!r} in truth/values")
        par = parameterization(self.design)
        for name, v in values.items():
            i = self.design.parameter_names.index(name)
            if par.fixed_mask[i] and not np.isclose(v, par.fixed_values[i]):
                raise ConfigError(f"truth/values sets {name!r} = {v}, but the model fixes it at "
                                  f"{par.fixed_values[i]:g}")
        return ps.replace(values) if values else ps

    def ingest_spec(self, path=None) -> "IngestSpec":
        d = self.section("data")
        if path is None and "path" not in d:
            raise ConfigError("no data file: give --data or a data/path entry")
        p = Path(path or d["path"])
        if path is None and self.path and not p.is_absolute():
            p = Path(self.path).parent / p
        return IngestSpec(str(p), self.columns, tuple(d.get("missing", ("NA", ""))),
                          d.get("weights"), d.get("delimiter", ","))


def load_config(source) -> ModelConfig:
    """Parse and validate a YAML file path, YAML text or mapping."""
    path = None
    if isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        if "\n" not in text and Path(text).exists():
            path = text
            text = Path(text).read_text()
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse configuration: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        raise ConfigError(_describe(errors[0]))
    return ModelConfig(raw, path)


def bundled_config(name: str) -> str:
    """Path of an example configuration shipped with the package."""
    p = resources.files("gmtmm") / "configs" / f"{name}.yaml"
    if not p.is_file():
        raise ConfigError(f"no bundled configuration {name!r}")
    return str(p)


def _named(spec, default_cats, prefix):
    if isinstance(spec, int):
        return [{"name": f"{prefix}{i + 1}", "categories": default_cats} for i in range(spec)]
    return [{"categories": default_cats, **s} for s in spec]


def _family(kind, entry, model):
    lower = entry.get("lower", model.get("lower", 0.0))
    cats = entry.get("categories", model.get("categories"))
    if kind == "gaussian":
        return Gaussian()
    if kind == "censored":
        return CensoredGaussian(float(lower))
    if cats is None:
        raise ConfigError(f"family {kind!r} needs 'categories'")
    return CumulativeProbit(n_categories=int(cats)) if kind == "cumprobit" else Multinomial(n_categories=int(cats))


def build_design(model: dict):
    """MtmmDesign and data-column names from the ``model`` section."""
    traits = _named(model["traits"], model.get("trait_categories", 3), "trait")
    methods = _named(model["methods"], model.get("method_categories", 2), "method")
    tnames, mnames = [t["name"] for t in traits], [m["name"] for m in methods]
    for kind, names in (("trait", tnames), ("method", mnames)):
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate {kind} names")

    def resolve(x, names, kind):
        if isinstance(x, int):
            if not 1 <= x <= len(names):
                raise ConfigError(f"{kind} index {x} out of range")
            return x
        if x not in names:
            raise ConfigError(f"unknown {kind} {x!r}")
        return names.index(x) + 1

    latent = model.get("latent", "discrete")
    entries = model.get("variables") or [{"trait": t, "method": m} for m in mnames for t in tnames]
    default_family = model.get("family", "gaussian")
    variables, columns, seen = [], [], set()
    for e in entries:
        t, m = resolve(e["trait"], tnames, "trait"), resolve(e["method"], mnames, "method")
        if (t, m) in seen:
            raise ConfigError(f"variable ({tnames[t - 1]}, {mnames[m - 1]}) listed twice")
        seen.add((t, m))
        kind = e.get("family", default_family)
        if latent == "gaussian" and kind != "gaussian":
            raise ConfigError("gaussian-latent models need gaussian responses")
        variables.append(VariableSpec(t, m, _family(kind, e, model)))
        columns.append(e.get("column", f"{tnames[t - 1]}_{mnames[m - 1]}"))
    constraints = []
    for c in model.get("constraints", []):
        if "fix" in c and "value" in c and "equal" not in c:
            constraints.append(Constraint.fix(c["fix"], c["value"]))
        elif "equal" in c and "to" in c and "fix" not in c:
            constraints.append(Constraint.equal(c["equal"], c["to"]))
        else:
            raise ConfigError(f"constraint needs fix+value or equal+to: {c}")
    kw = dict(constraints=tuple(constraints), trait_names=tuple(tnames), method_names=tuple(mnames))
    if latent == "gaussian":
        design = MtmmDesign(len(tnames), len(mnames), tuple(variables), latent="gaussian",
                            method_factors=tuple(m.get("factor", True) for m in methods), **kw)
    else:
        design = MtmmDesign(len(tnames), len(mnames), tuple(variables),
                            tuple(t["categories"] for t in traits), tuple(m["categories"] for m in methods),
                            model.get("components", 1), associations=model.get("associations", True),
                            mixture_policy=model.get("mixture_policy", "random-response"), **kw)
    names = set(design.parameter_names)
    for c in constraints:
        for n in (c.name, c.target):
            if n is not None and n not in names:
                raise ConfigError(f"constraint refers to unknown parameter {n!r}")
    return design, tuple(columns)


# ----------------------------------------------------------------------------- ingestion
@dataclass(frozen=True)
class IngestSpec:
    """Where and how to read a delimited response file.

    ``columns`` gives the header name of each design variable in design order.
    """

    path: str
    columns: tuple
    missing: tuple = ("NA", "")
    weights: str | None = None
    delimiter: str = ","


def ingest(spec: IngestSpec) -> Dataset:
    """Read a header-first delimited file into a Dataset.

    Missing sentinels become masked entries; a missing weight column means
    unit weights.
    """
    try:
        with open(spec.path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter=spec.delimiter))
    except OSError as exc:
        raise DataError(f"cannot read {spec.path}: {exc.strerror}") from None
    if not rows:
        raise DataError(f"{spec.path} is empty (a header row is required)")
    header = [h.strip() for h in rows[0]]
    pos = {h: i for i, h in enumerate(header)}
    unmapped = [c for c in spec.columns if c not in pos]
    if unmapped:
        raise DataError(f"design variable column {unmapped[0]!r} not found in {spec.path}")
    if spec.weights is not None and spec.weights not in pos:
        raise DataError(f"weight column {spec.weights!r} not found in {spec.path}")
    body = rows[1:]
    missing = set(spec.missing)
    y = np.full((len(body), len(spec.columns)), np.nan)
    w = np.ones(len(body))
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"row {r + 1}: expected {len(header)} fields, found {len(row)}")
        for j, c in enumerate(spec.columns):
            cell = row[pos[c]].strip()
            if cell in missing:
                continue
            try:
                y[r, j] = float(cell)
            except ValueError:
                raise DataError(f"row {r + 1}, column {c!r}: cannot parse {cell!r}") from None
        if spec.weights is not None:
            try:
                w[r] = float(row[pos[spec.weights]])
            except ValueError:
                raise DataError(f"row {r + 1}, column {spec.weights!r}: cannot parse weight") from None
            if w[r] < 0:
                raise DataError(f"row {r + 1}: negative weight {w[r]}")
    data = Dataset(y, weights=w)
    log.info("read %d rows from %s; %.1f%% of entries missing", data.n, spec.path,
             100.0 * (1 - data.mask.mean()) if data.n else 0.0)
    return data


def write_delimited(path, data: Dataset, columns, delimiter=",", missing="NA", weights: str | None = None):
    """Write a Dataset in the layout :func:`ingest` reads."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(list(columns) + ([weights] if weights else []))
        for i in range(data.n):
            row = [repr(float(v)) if m else missing for v, m in zip(data.y[i], data.mask[i])]
            w.writerow(row + ([repr(float(data.weights[i]))] if weights else []))
