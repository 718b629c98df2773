"""Soft-margin SVM trained in the dual on a precomputed Gram matrix.

The solver is SMO with first-order working-set selection (the maximal
violating pair).  Fidelity-per-site Grams need not be positive
semidefinite, so a non-positive curvature along the pair direction is
handled by comparing the objective at the two ends of the feasible segment.
"""
from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ising import ChainSpec
from .kernel import GramMatrix, KernelKind, build_gram, kernel_rows

__all__ = [
    "Protocol",
    "TrainingSet",
    "SvmModel",
    "ConvergenceError",
    "train",
    "decision",
    "decision_scan",
    "dual_objective",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 1_000_000


class ConvergenceError(RuntimeError):
    def __init__(self, message, iterations, violation):
        super().__init__(f"{message} (iterations={iterations}, KKT violation={violation:.3e})")
        self.iterations = iterations
        self.violation = violation


class Protocol(str, enum.Enum):
    INTERVAL_D1 = "d1"
    INTERVAL_D2 = "d2"
    RANDOM = "random"


@dataclass(frozen=True, eq=False)
class TrainingSet:
    points: np.ndarray
    labels: np.ndarray
    protocol: Protocol
    seed: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        lab = np.asarray(self.labels, dtype=float)
        if pts.shape != lab.shape or pts.ndim != 1:
            raise ValueError("points and labels must be 1-d and of equal length")
        if not (np.any(lab > 0) and np.any(lab < 0)):
            raise ValueError("training set must contain both classes")
        if not np.array_equal(lab, np.where(pts > 1.0, 1.0, -1.0)):
            raise ValueError("labels must be +1 exactly for J > 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "protocol", Protocol(self.protocol))

    def __len__(self):
        return self.points.size


@dataclass(frozen=True, eq=False)
class SvmModel:
    alphas: np.ndarray
    labels: np.ndarray
    bias: float
    support_indices: np.ndarray
    c_param: float
    gram: GramMatrix
    iterations: int = 0
    kkt_violation: float = 0.0
    min_gram_eigenvalue: float = float("nan")
    metadata: dict = field(default_factory=dict)

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.gram.points)

    @property
    def coef(self) -> np.ndarray:
        """``alpha_j y_j``."""
        return self.alphas * self.labels


def dual_objective(alphas, labels, k) -> float:
    """``sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij``."""
    ay = np.asarray(alphas) * np.asarray(labels)
    return float(np.sum(alphas) - 0.5 * ay @ np.asarray(k) @ ay)


def _violating_pair(grad, y, alpha, c):
    """Indices of the maximal violating pair and the violation.

    With ``G`` the gradient of ``1/2 a'Qa - e'a``:
    ``I_up = {y=+1, a<C} | {y=-1, a>0}``, ``I_low = {y=+1, a>0} | {y=-1, a<C}``.
    """
    score = -y * grad
    up = ((y > 0) & (alpha < c)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < c))
    if not up.any() or not low.any():
        return -1, -1, 0.0, up, low, score
    i = int(np.argmax(np.where(up, score, -np.inf)))
    j = int(np.argmin(np.where(low, score, np.inf)))
    return i, j, float(score[i] - score[j]), up, low, score


def train(
    gram: GramMatrix,
    labels: Sequence[float],
    c_param: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SvmModel:
    """Solve the SVM dual ``max sum a - 1/2 a'Qa`` s.t. ``0<=a<=C``, ``y'a=0``."""
    if gram.centered:
        raise ValueError("train expects an uncentered Gram matrix")
    k = np.asarray(gram.entries, dtype=float)
    y = np.asarray(labels, dtype=float)
    m = y.size
    if k.shape != (m, m):
        raise ValueError(f"Gram is {k.shape}, labels have length {m}")
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("labels must be +/-1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("degenerate training set: only one class present")
    if c_param <= 0 or tol <= 0:
        raise ValueError("c_param and tol must be positive")

    c = float(c_param)
    min_eig = float(np.linalg.eigvalsh(k)[0])
    if min_eig < 0:
        log.info("Gram matrix is indefinite: smallest eigenvalue %.3e", min_eig)

    alpha = np.zeros(m)
    grad = -np.ones(m)
    diag = np.diag(k)
    it = 0
    while True:
        i, j, viol, *_ = _violating_pair(grad, y, alpha, c)
        if i < 0 or viol < tol:
            break
        if it >= max_iter:
            raise ConvergenceError("SMO iteration cap exceeded", it, viol)
        # move along d with d_i = y_i, d_j = -y_j; f(t) = -viol t + eta t^2 / 2
        eta = diag[i] + diag[j] - 2.0 * k[i, j]
        room_i = c - alpha[i] if y[i] > 0 else alpha[i]
        room_j = alpha[j] if y[j] > 0 else c - alpha[j]
        t_max = min(room_i, room_j)
        if eta > 0:
            t = min(viol / eta, t_max)
        else:
            # Platt: the segment minimum sits at an endpoint; t=0 gives 0
            t = t_max if (-viol * t_max + 0.5 * eta * t_max * t_max) < 0 else 0.0
        if t <= 0.0:
            raise ConvergenceError("SMO made no progress", it, viol)
        if __debug__:
            gain = viol * t - 0.5 * eta * t * t
            assert gain >= -1e-12 * max(1.0, abs(viol * t)), "dual objective decreased"

        alpha[i] = (c if y[i] > 0 else 0.0) if t == room_i else alpha[i] + y[i] * t
        alpha[j] = (0.0 if y[j] > 0 else c) if t == room_j else alpha[j] - y[j] * t
        grad += y * (k[:, i] - k[:, j]) * t
        it += 1

    bias = _bias(grad, y, alpha, c)
    alpha_tol = 1e-8 * c
    support = np.flatnonzero(alpha > alpha_tol)
    log.debug("SMO finished: %d iterations, violation %.2e, %d SVs", it, viol, support.size)
    return SvmModel(
        alphas=alpha,
        labels=y.copy(),
        bias=bias,
        support_indices=support,
        c_param=c,
        gram=gram,
        iterations=it,
        kkt_violation=max(viol, 0.0),
        min_gram_eigenvalue=min_eig,
    )


def _bias(grad, y, alpha, c) -> float:
    # y_j - sum_i a_i y_i K_ij == -y_j G_j
    score = -y * grad
    free = (alpha > 0.0) & (alpha < c)
    if free.any():
        return float(np.mean(score[free]))
    _, _, _, up, low, _ = _violating_pair(grad, y, alpha, c)
    hi = np.max(score[up]) if up.any() else np.min(score[low])
    lo = np.min(score[low]) if low.any() else np.max(score[up])
    return float(0.5 * (hi + lo))


def decision(model: SvmModel, j: Optional[float], kernel_row: Sequence[float]) -> float:
    """Signed distance ``sum_j a_j y_j K(J, J_j) + b`` for the coupling ``j``.

    ``kernel_row[i]`` must be ``K(j, J_i)`` with the training kernel; ``j``
    itself is only used in error messages.
    """
    row = np.asarray(kernel_row, dtype=float)
    if row.shape != model.alphas.shape:
        raise ValueError(
            f"kernel row for J={j} has length {row.size}, model has {model.alphas.size}"
        )
    return float(row @ model.coef + model.bias)


def decision_scan(model: SvmModel, grid: Sequence[float], threads: int = 1):
    """Decision values over ``grid`` as a list of ``(J, d(J))`` pairs."""
    g = model.gram
    if g.kind is KernelKind.IDEAL or g.n_sites is None:
        raise ValueError("decision_scan needs a quantum-kernel model")
    rows = kernel_rows(g.kind, ChainSpec(g.n_sites), grid, g.points, threads=threads)
    values = rows @ model.coef + model.bias
    return [(float(j), float(v)) for j, v in zip(grid, values)]


# --- JSON -------------------------------------------------------------------


def model_to_dict(model: SvmModel) -> dict:
    g = model.gram
    return {
        "metadata": model.metadata,
        "kernel": g.kind.value,
        "n_sites": g.n_sites,
        "c_param": model.c_param,
        "points": [float(p) for p in g.points],
        "labels": [int(v) for v in model.labels],
        "alphas": [float(a) for a in model.alphas],
        "bias": model.bias,
        "support_indices": [int(i) for i in model.support_indices],
        "diagnostics": {
            "iterations": model.iterations,
            "kkt_violation": model.kkt_violation,
            "min_gram_eigenvalue": model.min_gram_eigenvalue,
        },
    }


def save_model(path, model: SvmModel) -> None:
    with open(os.fspath(path), "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)


def load_model(path) -> SvmModel:
    """Rebuild a model; the training Gram is recomputed from the saved points."""
    with open(os.fspath(path)) as fh:
        d = json.load(fh)
    gram = build_gram(KernelKind(d["kernel"]), d["points"], ChainSpec(d["n_sites"]))
    diag = d.get("diagnostics", {})
    return SvmModel(
        alphas=np.array(d["alphas"], dtype=float),
        labels=np.array(d["labels"], dtype=float),
        bias=float(d["bias"]),
        support_indices=np.array(d["support_indices"], dtype=int),
        c_param=float(d["c_param"]),
        gram=gram,
        iterations=int(diag.get("iterations", 0)),
        kkt_violation=float(diag.get("kkt_violation", 0.0)),
        min_gram_eigenvalue=float(diag.get("min_gram_eigenvalue", float("nan"))),
        metadata=d.get("metadata", {}),
    )
