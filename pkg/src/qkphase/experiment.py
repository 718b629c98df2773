"""Experiment configuration, training-set selection and the end-to-end pipeline."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .ising import ChainSpec
from .kernel import (
    KernelKind,
    alignment,
    build_gram,
    center,
    extrapolate_f_alignment,
)
from .scaling import (
    BoundaryPeakError,
    CriticalEstimate,
    FitError,
    Method,
    MultipleCrossingsWarning,
    NoSignChangeError,
    ScalingFit,
    fit_scaling,
    lambda_derivative_peak,
    sign_changes,
    zero_crossing,
)
from .svm import ConvergenceError, Protocol, SvmModel, TrainingSet, decision_scan, train

log = logging.getLogger(__name__)

DEFAULT_LADDER = (64, 128, 256, 512, 1024, 2048, 4096, 8192)
DEFAULT_ALIGN_LADDER = (10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000)
INTERVALS = {
    Protocol.INTERVAL_D1: ((0.8, 0.9), (1.2, 1.3)),
    Protocol.INTERVAL_D2: ((0.6, 0.7), (1.6, 1.7)),
}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    grid_min: float = 0.25
    grid_max: float = 1.75
    grid_points: int = 1000
    protocol: Protocol = Protocol.RANDOM
    kernel: KernelKind = KernelKind.FIDELITY_PER_SITE
    n_ladder: tuple = DEFAULT_LADDER
    c_param: float = 1.0
    seed: Optional[int] = 0
    m_random: int = 133
    svm_tol: float = 1e-6
    svm_max_iter: int = 1_000_000
    include_unreliable: bool = False
    bench: bool = False
    j_ref: float = 1.75
    align: bool = False
    align_ladder: tuple = DEFAULT_ALIGN_LADDER
    align_reference_n: int = 10_000

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        try:
            set_("protocol", Protocol(self.protocol))
            set_("kernel", KernelKind(self.kernel))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        set_("n_ladder", tuple(int(n) for n in self.n_ladder))
        set_("align_ladder", tuple(int(n) for n in self.align_ladder))
        if not self.grid_min < self.grid_max:
            raise ConfigError("grid_min must be below grid_max")
        if self.grid_points < 2:
            raise ConfigError("grid_points must be at least 2")
        if not self.n_ladder:
            raise ConfigError("n_ladder is empty")
        for n in self.n_ladder + self.align_ladder + (self.align_reference_n,):
            if n < 2 or n % 2:
                raise ConfigError(f"system sizes must be even and >= 2, got {n}")
        if self.kernel is KernelKind.IDEAL:
            raise ConfigError("the ideal kernel cannot be used for training")
        if self.protocol is Protocol.RANDOM:
            if self.seed is None:
                raise ConfigError("RANDOM protocol requires a seed")
            if not 2 <= self.m_random <= self.grid_points:
                raise ConfigError("m_random must lie in [2, grid_points]")
        if self.c_param <= 0 or self.svm_tol <= 0:
            raise ConfigError("c_param and svm_tol must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["protocol"] = self.protocol.value
        d["kernel"] = self.kernel.value
        d["n_ladder"] = list(self.n_ladder)
        d["align_ladder"] = list(self.align_ladder)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config_file(path) -> dict:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


# --- grid and training sets -------------------------------------------------


def make_grid(config: ExperimentConfig) -> np.ndarray:
    """``grid_points`` equally spaced couplings, both ends included."""
    i = np.arange(config.grid_points, dtype=float)
    step = (config.grid_max - config.grid_min) / (config.grid_points - 1)
    grid = config.grid_min + i * step
    grid[-1] = config.grid_max
    return grid


def select_training(
    grid: Sequence[float], protocol: Protocol, seed: Optional[int] = None, m: int = 133
) -> TrainingSet:
    """Pick training couplings from the grid.

    Interval protocols keep every grid point inside the closed subintervals.
    RANDOM draws ``m`` distinct grid points with
    ``numpy.random.default_rng(seed).choice(len(grid), m, replace=False)``
    (PCG64) and keeps them in grid order.
    """
    grid = np.asarray(grid, dtype=float)
    protocol = Protocol(protocol)
    if protocol is Protocol.RANDOM:
        if seed is None:
            raise ConfigError("RANDOM protocol requires a seed")
        if m > grid.size:
            raise ConfigError(f"cannot draw {m} points from a grid of {grid.size}")
        idx = np.sort(np.random.default_rng(seed).choice(grid.size, size=m, replace=False))
    else:
        mask = np.zeros(grid.size, dtype=bool)
        for lo, hi in INTERVALS[protocol]:
            mask |= (grid >= lo) & (grid <= hi)
        idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ConfigError(f"{protocol.value}: empty training selection")
    pts = grid[idx]
    labels = np.where(pts > 1.0, 1.0, -1.0)
    if np.all(labels > 0) or np.all(labels < 0):
        raise ConfigError(f"{protocol.value}: training selection holds a single class")
    return TrainingSet(pts, labels, protocol, seed if protocol is Protocol.RANDOM else None)


# --- pipeline ---------------------------------------------------------------


@dataclass
class SizeResult:
    n_sites: int
    estimate: Optional[CriticalEstimate] = None
    scan: Optional[list] = None
    model: Optional[SvmModel] = None
    n_crossings: int = 0
    error: Optional[str] = None


@dataclass
class ExperimentBundle:
    config: ExperimentConfig
    grid: np.ndarray
    training: TrainingSet
    sizes: list = field(default_factory=list)
    fit: Optional[ScalingFit] = None
    fit_error: Optional[str] = None
    bench: list = field(default_factory=list)
    bench_fit: Optional[ScalingFit] = None
    bench_fit_error: Optional[str] = None
    alignment_rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def estimates(self) -> list:
        return [s.estimate for s in self.sizes if s.estimate is not None]


def run_size(config: ExperimentConfig, grid, training: TrainingSet, n: int, threads: int = 1) -> SizeResult:
    """Train at one system size and locate the decision zero crossing."""
    res = SizeResult(n)
    try:
        chain = ChainSpec(n)
        gram = build_gram(config.kernel, training.points, chain, threads=threads)
        model = train(gram, training.labels, config.c_param, config.svm_tol, config.svm_max_iter)
        scan = decision_scan(model, grid, threads=threads)
        roots = sign_changes(scan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MultipleCrossingsWarning)
            j_c = zero_crossing(scan)
        res.model, res.scan, res.n_crossings = model, scan, len(roots)
        res.estimate = CriticalEstimate(
            n_sites=n,
            j_c_n=j_c,
            method=Method.SVM_ZERO_CROSSING,
            protocol=training.protocol.value,
            reliable=len(roots) == 1,
            kernel=config.kernel.value,
        )
    except (NoSignChangeError, ConvergenceError, FloatingPointError, ValueError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _fit_or_error(estimates, include_unreliable):
    use = [e for e in estimates if include_unreliable or e.reliable]
    try:
        return fit_scaling(use), None
    except (ValueError, FitError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_bench(config: ExperimentConfig, grid) -> tuple:
    """Fidelity-per-site derivative peaks over the ladder, plus failures."""
    out, failures = [], []
    for n in config.n_ladder:
        try:
            j = lambda_derivative_peak(ChainSpec(n), grid, config.j_ref)
            out.append(CriticalEstimate(n, j, Method.LAMBDA_DERIVATIVE, None, True, KernelKind.FIDELITY_PER_SITE.value))
        except (BoundaryPeakError, ValueError) as exc:
            failures.append({"N": n, "stage": "bench", "error": f"{type(exc).__name__}: {exc}"})
    return out, failures


def run_alignment(config: ExperimentConfig, grid, extrapolation_points: int = 61) -> list:
    """Rows ``(kernel, N, A, extrapolated_A)`` for the alignment study.

    One seeded random draw of ``m_random`` points is shared by every N.
    """
    pts = select_training(grid, Protocol.RANDOM, config.seed, config.m_random).points
    ideal_c = center(build_gram(KernelKind.IDEAL, pts))
    ref = build_gram(KernelKind.FIDELITY_PER_SITE, pts, ChainSpec(config.align_reference_n))
    rows = []
    for n in config.align_ladder:
        chain = ChainSpec(n)
        for kind in (KernelKind.FIDELITY, KernelKind.FIDELITY_PER_SITE):
            a = alignment(center(build_gram(kind, pts, chain)), ideal_c)
            extra = extrapolate_f_alignment(ref, ideal_c, n) if kind is KernelKind.FIDELITY else None
            rows.append((kind.value, n, a, extra))
    for n in np.logspace(1, math.log10(config.align_reference_n), extrapolation_points):
        rows.append(("FIDELITY_EXTRAPOLATED", float(n), None, extrapolate_f_alignment(ref, ideal_c, float(n))))
    rows.append(("LIMIT", "inf", None, 1.0 / math.sqrt(len(pts))))
    return rows


def run_pipeline(config: ExperimentConfig, threads: int = 1, out_dir=None) -> ExperimentBundle:
    grid = make_grid(config)
    training = select_training(grid, config.protocol, config.seed, config.m_random)
    bundle = ExperimentBundle(config, grid, training)

    if threads > 1 and len(config.n_ladder) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sizes = list(pool.map(lambda n: run_size(config, grid, training, n), config.n_ladder))
    else:
        sizes = [run_size(config, grid, training, n, threads) for n in config.n_ladder]
    bundle.sizes = sizes
    for s in sizes:
        if s.error:
            bundle.failures.append({"N": s.n_sites, "stage": "svm", "error": s.error})
    bundle.fit, bundle.fit_error = _fit_or_error(bundle.estimates, config.include_unreliable)

    if config.bench:
        bundle.bench, fails = run_bench(config, grid)
        bundle.failures.extend(fails)
        bundle.bench_fit, bundle.bench_fit_error = _fit_or_error(bundle.bench, True)
    if config.align:
        bundle.alignment_rows = run_alignment(config, grid)
    if out_dir is not None:
        write_outputs(bundle, out_dir)
    return bundle


# --- output -----------------------------------------------------------------


def header_lines(config: ExperimentConfig) -> list:
    return [f"qkphase {__version__} config={config.digest()}"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def estimate_rows(estimates) -> list:
    return [
        (Method(e.method).value, e.protocol or "NONE", e.kernel or "", e.n_sites, e.j_c_n, int(e.reliable))
        for e in estimates
    ]


def scan_rows(size: SizeResult, grid) -> list:
    grid = np.asarray(grid)
    sv_mark = np.zeros(grid.size, dtype=int)
    for p in size.model.points[size.model.support_indices]:
        sv_mark[int(np.argmin(np.abs(grid - p)))] = 1
    b = size.model.bias
    return [(j, d, int(sv_mark[i]), d - b) for i, (j, d) in enumerate(size.scan)]


def write_outputs(bundle: ExperimentBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = bundle.config
    notes = header_lines(cfg)

    write_csv(
        out / "estimates.csv",
        ("method", "protocol", "kernel", "N", "J_c_N", "reliable"),
        estimate_rows(bundle.estimates + bundle.bench),
        notes,
    )
    for s in bundle.sizes:
        if s.scan is not None:
            write_csv(
                out / f"scan_N{s.n_sites}.csv",
                ("J", "decision", "is_support_vector_nearest", "decision_without_bias"),
                scan_rows(s, bundle.grid),
                notes,
            )
    fit_doc = {
        "tool": f"qkphase {__version__}",
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "svm": bundle.fit.to_dict() if bundle.fit else None,
        "svm_error": bundle.fit_error,
        "failures": bundle.failures,
    }
    if cfg.bench:
        fit_doc["bench"] = bundle.bench_fit.to_dict() if bundle.bench_fit else None
        fit_doc["bench_error"] = bundle.bench_fit_error
    (out / "fit.json").write_text(json.dumps(fit_doc, indent=2, sort_keys=True) + "\n")
    if bundle.alignment_rows:
        write_csv(out / "alignment.csv", ("kernel", "N", "A", "extrapolated_A"), bundle.alignment_rows, notes)
