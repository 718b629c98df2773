"""Fidelity kernels, the ideal target kernel, centering and alignment."""
from __future__ import annotations

import csv
import enum
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .ising import ChainSpec, angle_table, log_fidelity_block

__all__ = [
    "KernelKind",
    "GramMatrix",
    "AlignmentError",
    "ideal_labels",
    "log_gram",
    "build_gram",
    "kernel_rows",
    "center",
    "alignment",
    "extrapolate_f_alignment",
    "write_gram_csv",
    "read_gram_csv",
]

CRITICAL_COUPLING = 1.0


class KernelKind(str, enum.Enum):
    FIDELITY = "FIDELITY"
    FIDELITY_PER_SITE = "FIDELITY_PER_SITE"
    IDEAL = "IDEAL"


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """An M x M kernel matrix over a list of couplings.

    ``n_sites`` is ``None`` for the ideal kernel.  ``entries`` is stored
    read-only so instances can be shared between threads.
    """

    kind: KernelKind
    n_sites: Optional[int]
    points: tuple
    entries: np.ndarray
    centered: bool = False

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        m = len(self.points)
        if entries.shape != (m, m):
            raise ValueError(f"entries shape {entries.shape} does not match {m} points")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "points", tuple(float(p) for p in self.points))
        object.__setattr__(self, "kind", KernelKind(self.kind))

    @property
    def size(self) -> int:
        return len(self.points)


def ideal_labels(points: Iterable[float]) -> np.ndarray:
    """Phase labels for the target kernel; J >= 1 is the ferromagnet (+1)."""
    return np.where(np.asarray(list(points), dtype=float) >= CRITICAL_COUPLING, 1.0, -1.0)


def _map_rows(fn, n_rows: int, threads: int):
    if threads <= 1 or n_rows < 2:
        return [fn(i) for i in range(n_rows)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_rows)))


def log_gram(chain: ChainSpec, points: Sequence[float], threads: int = 1) -> np.ndarray:
    """Symmetric matrix of ``log F(J_i, J_j)``.

    Only ``j >= i`` is evaluated; the lower triangle is a copy, so the
    result is exactly symmetric whatever the thread schedule.
    """
    theta = angle_table(chain, points)
    m = theta.shape[0]

    def row(i):
        try:
            return log_fidelity_block(theta[i], theta[i:])[0]
        except Exception as exc:  # pragma: no cover - angles are pre-validated
            raise type(exc)(f"entry ({i}, >={i}): {exc}") from exc

    out = np.empty((m, m))
    for i, r in enumerate(_map_rows(row, m, threads)):
        out[i, i:] = r
        out[i:, i] = r
        out[i, i] = 0.0
    return out


def _from_log(kind: KernelKind, log_f: np.ndarray, n_sites: int) -> np.ndarray:
    if kind is KernelKind.FIDELITY:
        return np.exp(log_f)
    if kind is KernelKind.FIDELITY_PER_SITE:
        return np.exp(log_f / n_sites)
    raise ValueError(f"{kind} is not a quantum kernel")


def build_gram(
    kind: KernelKind,
    points: Sequence[float],
    chain: Optional[ChainSpec] = None,
    threads: int = 1,
) -> GramMatrix:
    kind = KernelKind(kind)
    points = [float(p) for p in points]
    if not points:
        raise ValueError("points must be non-empty")
    if kind is KernelKind.IDEAL:
        y = ideal_labels(points)
        return GramMatrix(kind, None, tuple(points), np.outer(y, y))
    if chain is None:
        raise ValueError(f"{kind.value} kernel needs a ChainSpec")
    entries = _from_log(kind, log_gram(chain, points, threads), chain.n_sites)
    return GramMatrix(kind, chain.n_sites, tuple(points), entries)


def kernel_rows(
    kind: KernelKind,
    chain: ChainSpec,
    queries: Sequence[float],
    points: Sequence[float],
    threads: int = 1,
) -> np.ndarray:
    """``K(q, p)`` for every query ``q`` (rows) and reference point ``p``."""
    kind = KernelKind(kind)
    theta_q = angle_table(chain, queries)
    theta_p = angle_table(chain, points)
    rows = _map_rows(lambda i: log_fidelity_block(theta_q[i], theta_p)[0], len(theta_q), threads)
    log_f = np.array(rows).reshape(len(theta_q), len(theta_p))
    return _from_log(kind, log_f, chain.n_sites)


def center(g: GramMatrix) -> GramMatrix:
    """Double centering ``K - rowmean - colmean + grandmean``."""
    if g.centered:
        raise ValueError("Gram matrix is already centered")
    k = g.entries
    kc = k - k.mean(axis=1, keepdims=True) - k.mean(axis=0, keepdims=True) + k.mean()
    # symmetrise away the rounding difference between row and column means
    kc = 0.5 * (kc + kc.T)
    return GramMatrix(g.kind, g.n_sites, g.points, kc, centered=True)


def alignment(a: GramMatrix, b: GramMatrix) -> float:
    """Normalised Frobenius inner product of two centered Gram matrices."""
    if not (a.centered and b.centered):
        raise AlignmentError("alignment requires centered matrices")
    if a.points != b.points:
        raise AlignmentError("matrices are built on different point lists")
    ka, kb = a.entries, b.entries
    norm_a = np.sum(ka * ka)
    norm_b = np.sum(kb * kb)
    if norm_a == 0.0 or norm_b == 0.0:
        raise AlignmentError("alignment undefined for an all-zero matrix")
    value = np.sum(ka * kb) / np.sqrt(norm_a * norm_b)
    return float(np.clip(value, -1.0, 1.0))


def extrapolate_f_alignment(
    lambda_gram_ref: GramMatrix, ideal: GramMatrix, n_target: float
) -> float:
    """Alignment of ``[K_lambda]^n_target`` (elementwise) with the ideal kernel.

    Approximates the fidelity kernel at size ``n_target`` from a
    fidelity-per-site Gram computed at one large reference size.
    """
    if lambda_gram_ref.kind is not KernelKind.FIDELITY_PER_SITE or lambda_gram_ref.centered:
        raise ValueError("reference must be an uncentered FIDELITY_PER_SITE Gram")
    if n_target <= 0:
        raise ValueError("n_target must be positive")
    with np.errstate(divide="ignore"):
        log_lam = np.log(lambda_gram_ref.entries)
    powered = GramMatrix(
        KernelKind.FIDELITY,
        int(n_target) if float(n_target).is_integer() else None,
        lambda_gram_ref.points,
        np.exp(n_target * log_lam),
    )
    ideal_c = ideal if ideal.centered else center(ideal)
    return alignment(center(powered), ideal_c)


# --- CSV round trip ---------------------------------------------------------


def write_gram_csv(path, g: GramMatrix, comments: Sequence[str] = ()) -> None:
    """Header ``kind,N,M,centered,J_1..J_M`` then M rows of 17-digit floats."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    n = "" if g.n_sites is None else str(g.n_sites)
    w.writerow([g.kind.value, n, g.size, int(g.centered)] + [f"{p:.17g}" for p in g.points])
    for row in g.entries:
        w.writerow([f"{v:.17g}" for v in row])
    with open(os.fspath(path), "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_gram_csv(path) -> GramMatrix:
    with open(os.fspath(path), newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    head, body = rows[0], rows[1:]
    kind, n, m, centered = head[:4]
    m = int(m)
    points = [float(p) for p in head[4:]]
    if len(points) != m or len(body) != m:
        raise ValueError(f"malformed Gram CSV {path}: expected {m} points and rows")
    entries = np.array([[float(v) for v in r] for r in body])
    return GramMatrix(KernelKind(kind), int(n) if n else None, points, entries, bool(int(centered)))
