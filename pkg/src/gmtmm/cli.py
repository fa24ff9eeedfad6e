"""Command-line entry point.

Every subcommand reads one YAML model configuration, writes ``result.json``
(self-describing: command, config hash, seed, results) and ``summary.txt``
into ``--out``, and exits 0 on success, 2 on configuration errors, 3 on data
errors and 4 on numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ModelConfig, ingest, load_config, write_delimited
from .errors import ConfigError, DataError, NumericalError
from .params import ParameterSet

log = logging.getLogger("gmtmm")

EXIT = {ConfigError: 2, DataError: 3, NumericalError: 4}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _demo_truth(cfg: ModelConfig) -> ParameterSet:
    """Configured truth, or unit trait loadings and 0.5 method loadings."""
    t = cfg.section("truth")
    if t:
        return cfg.truth()
    from .params import default_parameters
    d = cfg.design
    base = default_parameters(d)
    vals = {}
    for n in d.parameter_names:
        if n.startswith("lambda["):
            vals[n] = 1.0
        elif n.startswith("gamma["):
            vals[n] = 0.5
    return ParameterSet.from_dict(d, vals, base)


def _load_data(cfg: ModelConfig, args):
    data = ingest(cfg.ingest_spec(args.data))
    data.check(cfg.design)
    return data


def _fit(cfg: ModelConfig, data, seed, information=True):
    d = cfg.design
    if d.latent == "gaussian":
        from .linear import fit_ml
        return fit_ml(data, d)
    from .engine import multistart
    n_starts = cfg.section("fit").get("n_starts", 3)
    res = multistart(data, d, n_starts=n_starts, seed=seed, controls=cfg.controls(information))
    return res.best


def _se_or_note(fit):
    from .errors import SingularInformationError
    from .metrics import information_se
    try:
        return information_se(fit), None
    except SingularInformationError as exc:
        return {}, str(exc)


def _fit_report(fit, se):
    rows = [{"name": n, "estimate": v, "se": se.get(n)} for n, v in fit.estimates.items()]
    out = fit.to_dict()
    out["estimates"] = rows
    return out


def _fit_summary(fit, se, note=None):
    lines = [f"method: {fit.method}; converged: {'yes' if fit.converged else 'no'}; iterations: {fit.n_iter}",
             f"LL = {fit.loglik:.4f}  AIC = {fit.aic:.4f}  BIC = {fit.bic:.4f}  "
             f"p = {fit.n_params}  N = {fit.n_obs}",
             "", f"{'parameter':<16}{'estimate':>12}{'se':>12}"]
    for n, v in fit.estimates.items():
        s = se.get(n)
        lines.append(f"{n:<16}{v:12.4f}{(f'{s:12.4f}' if s is not None else '          --')}")
    if note:
        lines += ["", f"standard errors unavailable: {note}"]
    for f in fit.flags:
        lines.append(f"flag: {f}")
    return lines


def _quality_lines(q):
    w = max([8] + [len(v) for v in q.labels]) + 2
    lines = [f"{'variable':<{w}}{'coefficient':<15}{'estimate':>10}{'lower':>10}{'upper':>10}"]
    for v, c, e, lo, hi in q.rows():
        fmt = lambda x: f"{x:10.4f}" if np.isfinite(x) else f"{'--':>10}"  # noqa: E731
        lines.append(f"{v:<{w}}{c:<15}{fmt(e)}{fmt(lo)}{fmt(hi)}")
    return lines


def _plot_data(path, q):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "coefficient", "estimate", "lower", "upper"])
        for v, c, e, lo, hi in q.rows():
            w.writerow([v, c] + [repr(float(x)) if np.isfinite(x) else "NA" for x in (e, lo, hi)])


# ----------------------------------------------------------------------------- commands
def cmd_fit(cfg, args, seed):
    fit = _fit(cfg, _load_data(cfg, args), seed)
    se, note = _se_or_note(fit)
    from .metrics import quality
    q = quality(fit.params, cfg.design)
    res = {"fit": _fit_report(fit, se), "se_note": note, "quality": q.to_dict()}
    return res, _fit_summary(fit, se, note) + ["", "quality (point estimates):"] + _quality_lines(q), q


def cmd_fit_linear(cfg, args, seed):
    if cfg.design.latent != "gaussian":
        raise ConfigError("fit-linear needs model/latent: gaussian")
    return cmd_fit(cfg, args, seed)


def cmd_identify(cfg, args, seed):
    from .identify import jacobian_rank_scan
    s = cfg.section("identify")
    rep = jacobian_rank_scan(cfg.design, n_points=args.n_points or s.get("n_points", 20), seed=seed,
                             rtol=args.rtol or s.get("rtol", 1e-10), n_sim=s.get("n_sim"))
    return {"identify": rep.to_dict()}, rep.summary().splitlines(), None


def cmd_grid(cfg, args, seed):
    from .metrics import model_grid
    g = cfg.section("grid")
    data = _load_data(cfg, args)
    K = g.get("K", [cfg.design.trait_categories[0]])
    S = g.get("S", [cfg.design.n_components])
    if cfg.design.latent != "discrete":
        raise ConfigError("grid needs a discrete-latent model")
    res = model_grid(data, cfg.design, K, S, controls=cfg.controls(False), n_starts=g.get("n_starts", 3),
                     seed=seed, criterion=g.get("criterion", "bic"))
    return {"grid": res.to_dict()}, res.table().splitlines(), None


def cmd_bootstrap(cfg, args, seed):
    from .metrics import bootstrap_se
    data = _load_data(cfg, args)
    est = _fit(cfg, data, seed, information=False)
    b = bootstrap_se(data, cfg.design, B=args.B or cfg.section("bootstrap").get("B", 200), seed=seed,
                     estimate=est, n_starts=0, controls=cfg.controls(False))
    lines = [f"bootstrap replicates: {b.B}; failed: {len(b.failures)}"
             + ("; UNRELIABLE (more than 20% failed)" if b.unreliable else ""),
             "", f"{'parameter':<16}{'estimate':>12}{'se':>12}{'2.5%':>12}{'97.5%':>12}"]
    for n, e, s, lo, hi in zip(b.names, b.estimate, b.se, b.lower, b.upper):
        lines.append(f"{n:<16}{e:12.4f}{s:12.4f}{lo:12.4f}{hi:12.4f}")
    lines += ["", "quality (bootstrap percentile intervals):"] + _quality_lines(b.quality)
    return {"bootstrap": b.to_dict(), "fit": est.to_dict()}, lines, b.quality


def cmd_quality(cfg, args, seed):
    from .metrics import quality, quality_intervals
    if args.at_truth:
        q = quality(_demo_truth(cfg), cfg.design)
        return {"quality": q.to_dict(), "at": "truth"}, _quality_lines(q), q
    fit = _fit(cfg, _load_data(cfg, args), seed)
    try:
        q, note = quality_intervals(fit), None
    except NumericalError as exc:
        q, note = quality(fit.params, cfg.design), str(exc)
    lines = [f"LL = {fit.loglik:.4f}"] + _quality_lines(q) + ([f"intervals unavailable: {note}"] if note else [])
    return {"quality": q.to_dict(), "fit": fit.to_dict(), "interval_note": note}, lines, q


def cmd_simulate(cfg, args, seed):
    d = cfg.design
    truth = _demo_truth(cfg)
    n = args.n or cfg.section("simulate").get("n", 1000)
    if d.latent == "gaussian":
        from .linear import LinearParams, implied_moments
        from .data import Dataset
        mu, Sigma = implied_moments(LinearParams.from_parameter_set(d, truth))
        data = Dataset(np.random.default_rng(seed).multivariate_normal(mu, Sigma, size=n))
    else:
        from .engine import simulate
        data = simulate(truth, d, n, seed=seed)
    path = Path(args.data or (Path(args.out) / "data.csv"))
    path.parent.mkdir(parents=True, exist_ok=True)
    write_delimited(path, data, cfg.columns)
    return ({"simulate": {"n": n, "path": str(path), "truth": truth.as_dict()}},
            [f"wrote {n} simulated units to {path}"], None)


def cmd_simulate_study(cfg, args, seed):
    from .study import StudySpec, emit_table, run_study
    s = cfg.section("study")
    spec = StudySpec(_demo_truth(cfg), cfg.design, tuple(s.get("sample_sizes", (200, 2000))),
                     R=args.R or s.get("R", 200), seed=seed, controls=cfg.controls(True),
                     n_starts=s.get("n_starts", 0), start_at_truth=s.get("start_at_truth", True))
    res = run_study(spec, keep_replicates=False)
    out = Path(args.out)
    (out / "study.csv").write_text(emit_table(res, "csv"))
    return {"study": res.to_dict()}, emit_table(res, "text").splitlines(), None


COMMANDS = {"fit": cmd_fit, "fit-linear": cmd_fit_linear, "identify": cmd_identify, "grid": cmd_grid,
            "bootstrap": cmd_bootstrap, "simulate-study": cmd_simulate_study, "quality": cmd_quality,
            "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmtmm", description="Generalized multitrait-multimethod measurement-error models")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="YAML model configuration")
        s.add_argument("--data", help="delimited data file (overrides data/path; output path for simulate)")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, help="overrides the configuration seed")
        s.add_argument("--plot-data", action="store_true", help="also write quality_long.csv")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "identify":
            s.add_argument("--n-points", type=int)
            s.add_argument("--rtol", type=float)
        if name == "bootstrap":
            s.add_argument("--B", type=int)
        if name == "simulate":
            s.add_argument("--n", type=int)
        if name == "simulate-study":
            s.add_argument("--R", type=int)
        if name == "quality":
            s.add_argument("--at-truth", action="store_true", help="report at the configured truth, no fit")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result, lines, q = COMMANDS[args.command](cfg, args, seed)
    except Exception as exc:
        for cls, code in EXIT.items():
            if isinstance(exc, cls):
                print(f"error ({cls.__name__}): {exc}", file=sys.stderr)
                return code
        raise
    doc = {"command": args.command, "config_hash": cfg.hash, "seed": seed, "config": cfg.raw, **result}
    (out / "result.json").write_text(json.dumps(_jsonable(doc), indent=2) + "\n")
    text = "\n".join([f"gmtmm {args.command} (seed {seed}, config {cfg.hash[:12]})", ""] + lines) + "\n"
    (out / "summary.txt").write_text(text)
    if args.plot_data:
        if q is None:
            print("note: --plot-data applies to fit, quality and bootstrap", file=sys.stderr)
        else:
            _plot_data(out / "quality_long.csv", q)
    print(text, end="")
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
