"""Generate-fit-summarize simulation studies: bias and se/sd tables per sample size."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .design import MtmmDesign
from .engine import FitControls, multistart, simulate
from .errors import GmtmmError
from .metrics import information_se
from .params import ParameterSet

log = logging.getLogger(__name__)

__all__ = ["StudySpec", "StudyResult", "run_study", "emit_table", "parse_table"]


@dataclass
class StudySpec:
    """A simulation study: data from ``truth`` at each sample size, ``R`` times.

    Each replicate is fit by multistart from ``n_starts`` random starts plus,
    when ``start_at_truth``, the generating values; estimates are relabeled
    to be closest to the truth before summarizing.
    """

    truth: ParameterSet
    design: MtmmDesign
    sample_sizes: tuple = (200, 2000)
    R: int = 200
    seed: int = 0
    controls: FitControls = field(default_factory=FitControls)
    n_starts: int = 0
    start_at_truth: bool = True
    identical_replicates: bool = False

    def __post_init__(self):
        if self.R < 2:
            raise ValueError("R must be at least 2")
        self.sample_sizes = tuple(int(n) for n in self.sample_sizes)
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise ValueError("sample sizes must be positive")
        if self.n_starts < 1 and not self.start_at_truth:
            raise ValueError("need start_at_truth or at least one random start")

    def replicate_seed(self, i_n: int, r: int) -> int:
        key = [self.seed, i_n] if self.identical_replicates else [self.seed, i_n, r]
        return int(np.random.SeedSequence(key).generate_state(1)[0])


@dataclass
class StudyResult:
    """Per (parameter, sample size) summaries; arrays have shape (n_sizes, n_params)."""

    names: tuple
    sample_sizes: tuple
    truth: np.ndarray
    mean_estimate: np.ndarray
    sd: np.ndarray
    mean_se: np.ndarray
    n_ok: tuple
    failures: tuple
    flags: list = field(default_factory=list)
    estimates: list | None = None
    ses: list | None = None
    max_em_decrease: float = 0.0

    @property
    def bias(self) -> np.ndarray:
        return self.mean_estimate - self.truth

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.mean_se / self.sd

    @property
    def mc_se(self) -> np.ndarray:
        """Monte Carlo standard error of the mean estimate."""
        return self.sd / np.sqrt(np.maximum(np.array(self.n_ok, float), 1.0))[:, None]

    def row(self, name: str, n: int) -> dict:
        i, j = self.sample_sizes.index(n), self.names.index(name)
        return {"parameter": name, "n": n, "true": float(self.truth[j]),
                "mean": float(self.mean_estimate[i, j]), "bias": float(self.bias[i, j]),
                "sd": float(self.sd[i, j]), "mean_se": float(self.mean_se[i, j]),
                "ratio": float(self.ratio[i, j]), "failures": int(self.failures[i])}

    def to_dict(self) -> dict:
        def arr(x):
            return [[None if not np.isfinite(v) else float(v) for v in r] for r in np.atleast_2d(x)]
        return {"names": list(self.names), "sample_sizes": list(self.sample_sizes),
                "truth": [float(v) for v in self.truth], "mean_estimate": arr(self.mean_estimate),
                "sd": arr(self.sd), "mean_se": arr(self.mean_se), "n_ok": list(self.n_ok),
                "failures": list(self.failures), "flags": list(self.flags),
                "max_em_decrease": self.max_em_decrease}

    @classmethod
    def from_dict(cls, d: dict) -> "StudyResult":
        def arr(x):
            return np.array([[np.nan if v is None else v for v in r] for r in x], float)
        return cls(tuple(d["names"]), tuple(d["sample_sizes"]), np.array(d["truth"], float),
                   arr(d["mean_estimate"]), arr(d["sd"]), arr(d["mean_se"]), tuple(d["n_ok"]),
                   tuple(d["failures"]), list(d.get("flags", [])),
                   max_em_decrease=d.get("max_em_decrease", 0.0))

    def __eq__(self, other):
        if not isinstance(other, StudyResult):
            return NotImplemented
        same = (self.names == other.names and self.sample_sizes == other.sample_sizes
                and self.n_ok == other.n_ok and self.failures == other.failures)
        return same and all(np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
                            for k in ("truth", "mean_estimate", "sd", "mean_se"))


def _one_replicate(spec: StudySpec, n: int, seed: int, idx):
    data = simulate(spec.truth, spec.design, n, seed=seed)
    extra = (spec.truth,) if spec.start_at_truth else ()
    res = multistart(data, spec.design, n_starts=spec.n_starts, seed=seed, controls=spec.controls,
                     extra_starts=extra, reference=spec.truth)
    f = res.best
    if not f.converged:
        raise GmtmmError(f"not converged (gradient {f.grad_norm:.2g})")
    se = information_se(f)
    return f.params.values[idx], np.array([se[nm] for nm in f.free_names]), f.max_decrease


def run_study(spec: StudySpec, keep_replicates: bool = True, progress=None) -> StudyResult:
    """Simulate, fit and summarize every replicate at every sample size.

    Replicates that fail to converge or have a singular information matrix
    are excluded from the summaries and counted in ``failures``.
    """
    from .params import parameterization
    names = tuple(parameterization(spec.design).free_names)
    idx = [spec.truth.index(nm) for nm in names]
    truth = spec.truth.values[idx]
    p = len(names)
    means, sds, ses, n_ok, fails, all_est, all_se = [], [], [], [], [], [], []
    flags, worst = [], 0.0
    for i_n, n in enumerate(spec.sample_sizes):
        est, se, failed = [], [], 0
        for r in range(spec.R):
            seed = spec.replicate_seed(i_n, r)
            try:
                e, s, dec = _one_replicate(spec, n, seed, idx)
            except (GmtmmError, np.linalg.LinAlgError, ArithmeticError) as exc:
                failed += 1
                log.info("n=%d replicate %d failed: %s", n, r, exc)
                continue
            worst = max(worst, dec)
            est.append(e)
            se.append(s)
            if progress:
                progress(n, r)
        E = np.array(est) if est else np.full((0, p), np.nan)
        S = np.array(se) if se else np.full((0, p), np.nan)
        if len(E) >= 2:
            means.append(E.mean(0))
            sds.append(E.std(0, ddof=1))
            ses.append(S.mean(0))
        else:
            means.append(np.full(p, np.nan))
            sds.append(np.full(p, np.nan))
            ses.append(np.full(p, np.nan))
            flags.append(f"n={n}: fewer than 2 successful replicates")
        if len(E) >= 2 and np.all(sds[-1] == 0):
            flags.append(f"n={n}: degenerate, zero simulation SD (identical replicates)")
        if failed:
            flags.append(f"n={n}: {failed} of {spec.R} replicates excluded")
        n_ok.append(len(E))
        fails.append(failed)
        all_est.append(E)
        all_se.append(S)
    return StudyResult(names, spec.sample_sizes, truth, np.array(means), np.array(sds), np.array(ses),
                       tuple(n_ok), tuple(fails), flags,
                       all_est if keep_replicates else None, all_se if keep_replicates else None, worst)


def _header(result):
    cols = ["parameter"]
    for n in result.sample_sizes:
        cols += [f"bias_{n}", f"se_sd_{n}"]
    return cols


def _cells(result):
    for j, nm in enumerate(result.names):
        row = [nm]
        for i in range(len(result.sample_sizes)):
            row += [result.bias[i, j], result.ratio[i, j]]
        yield row


def emit_table(result: StudyResult, fmt: str = "text") -> str:
    """Parameter rows by (bias, se/sd) column pairs per sample size.

    ``fmt`` is "text", "csv" or "json"; json carries the full result and
    parses back with :func:`parse_table`.
    """
    if not result.names:
        raise ValueError("empty study result")
    if fmt == "json":
        return json.dumps(result.to_dict(), indent=2)
    header = _header(result)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in _cells(result):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    width = max(12, max(len(h) for h in header[1:]) + 1)
    namew = max(len("parameter"), max(len(n) for n in result.names))
    lines = [f"{header[0]:<{namew}}" + "".join(f"{h:>{width}}" for h in header[1:])]
    for row in _cells(result):
        lines.append(f"{row[0]:<{namew}}" + "".join(f"{v:>{width}.3f}" for v in row[1:]))
    foot = ", ".join(f"n={n}: {k} ok, {f} excluded" for n, k, f in
                     zip(result.sample_sizes, result.n_ok, result.failures))
    lines.append(foot)
    lines.extend(result.flags)
    return "\n".join(lines)


def parse_table(text: str) -> StudyResult:
    """Inverse of ``emit_table(result, "json")``."""
    return StudyResult.from_dict(json.loads(text))
