"""Pseudo-critical points and the finite-size scaling fit ``J_c(N) = J_c + a N^-nu``."""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .ising import ChainSpec, angle_table, log_fidelity_block

__all__ = [
    "Method",
    "CriticalEstimate",
    "ScalingFit",
    "NoSignChangeError",
    "BoundaryPeakError",
    "FitError",
    "MultipleCrossingsWarning",
    "sign_changes",
    "zero_crossing",
    "log_lambda_profile",
    "lambda_derivative_peak",
    "scaling_model",
    "scaling_jacobian",
    "fit_scaling",
]


class Method(str, enum.Enum):
    SVM_ZERO_CROSSING = "SVM_ZERO_CROSSING"
    LAMBDA_DERIVATIVE = "LAMBDA_DERIVATIVE"


class NoSignChangeError(ValueError):
    pass


class BoundaryPeakError(ValueError):
    pass


class FitError(RuntimeError):
    pass


class MultipleCrossingsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CriticalEstimate:
    n_sites: int
    j_c_n: float
    method: Method
    protocol: Optional[str] = None
    reliable: bool = True
    kernel: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = Method(self.method).value
        return d


@dataclass(frozen=True)
class ScalingFit:
    j_c: float
    a: float
    nu: float
    std_errors: tuple
    residual_norm: float
    points_used: tuple = field(default=())
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "j_c": self.j_c,
            "a": self.a,
            "nu": self.nu,
            "std_errors": {"j_c": self.std_errors[0], "a": self.std_errors[1], "nu": self.std_errors[2]},
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "points_used": [e.to_dict() for e in self.points_used],
        }


# --- zero crossings ---------------------------------------------------------


def _as_arrays(scan):
    scan = list(scan)
    j = np.array([p[0] for p in scan], dtype=float)
    d = np.array([p[1] for p in scan], dtype=float)
    if j.size and np.any(np.diff(j) <= 0):
        raise ValueError("scan must be sorted by strictly increasing J")
    return j, d


def sign_changes(scan) -> list:
    """All roots of the piecewise-linear interpolant of a scan.

    Exact zeros at grid nodes count once; strict sign flips between
    neighbours are linearly interpolated.
    """
    j, d = _as_arrays(scan)
    roots = [float(x) for x in j[d == 0.0]]
    flips = np.flatnonzero(d[:-1] * d[1:] < 0.0)
    for i in flips:
        roots.append(float(j[i] - d[i] * (j[i + 1] - j[i]) / (d[i + 1] - d[i])))
    return sorted(roots)


def zero_crossing(scan, target: float = 1.0) -> float:
    """Root of the decision curve nearest ``target`` (J = 1 by default)."""
    roots = sign_changes(scan)
    if not roots:
        _, d = _as_arrays(scan)
        profile = "".join("+" if v > 0 else "-" for v in d)
        raise NoSignChangeError(f"decision values never change sign: {profile[:80]}")
    best = min(roots, key=lambda r: abs(r - target))
    if len(roots) > 1:
        warnings.warn(
            f"{len(roots)} sign changes; using J={best:.6f}", MultipleCrossingsWarning, stacklevel=2
        )
    return best


# --- fidelity-per-site benchmark --------------------------------------------


def log_lambda_profile(chain: ChainSpec, grid: Sequence[float], j_ref: float = 1.75) -> np.ndarray:
    """``log lambda(J_i, j_ref)`` over the grid."""
    theta = angle_table(chain, grid)
    ref = angle_table(chain, [j_ref])
    return log_fidelity_block(theta, ref)[:, 0] / chain.n_sites


def lambda_derivative_peak(chain: ChainSpec, grid: Sequence[float], j_ref: float = 1.75) -> float:
    """Grid point maximising ``d/dJ log lambda(J, j_ref)``.

    Central differences inside the grid, one-sided at the ends, no
    sub-grid refinement.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size < 3:
        raise ValueError("grid needs at least 3 points")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    deriv = np.gradient(log_lambda_profile(chain, grid, j_ref), grid, edge_order=1)
    k = int(np.argmax(deriv))
    if k in (0, grid.size - 1):
        raise BoundaryPeakError(
            f"derivative maximum at grid boundary J={grid[k]} (N={chain.n_sites})"
        )
    return float(grid[k])


# --- scaling fit ------------------------------------------------------------


def scaling_model(n, params) -> np.ndarray:
    j_c, a, nu = params
    return j_c + a * np.asarray(n, dtype=float) ** (-nu)


def scaling_jacobian(n, params) -> np.ndarray:
    """Columns d/dJ_c, d/da, d/dnu of ``J_c + a N^-nu``."""
    _, a, nu = params
    n = np.asarray(n, dtype=float)
    p = n ** (-nu)
    return np.column_stack([np.ones_like(n), p, -a * np.log(n) * p])


def _levenberg_marquardt(n, y, x0, max_iter=500, xtol=1e-10, ftol=1e-12):
    x = np.array(x0, dtype=float)
    r = scaling_model(n, x) - y
    cost = float(r @ r)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        jac = scaling_jacobian(n, x)
        if not np.all(np.isfinite(jac)):
            raise FitError(f"non-finite Jacobian at iterate {x}")
        jtj = jac.T @ jac
        g = jac.T @ r
        scale = np.diag(jtj).copy()
        if np.any(scale == 0.0):
            raise FitError(f"singular Jacobian at iterate {x}")
        while True:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError as exc:
                raise FitError(f"singular normal equations at iterate {x}") from exc
            x_new = x + step
            r_new = scaling_model(n, x_new) - y
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                break
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left: converged to machine precision
                return x, r, cost, it
        rel_step = np.linalg.norm(step) / (np.linalg.norm(x) + xtol)
        rel_cost = (cost - cost_new) / cost if cost > 0 else 0.0
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        if rel_step < xtol or rel_cost < ftol or cost == 0.0:
            return x, r, cost, it
    raise FitError(f"Levenberg-Marquardt did not converge in {max_iter} iterations; iterate {x}")


def fit_scaling(estimates: Iterable[CriticalEstimate], max_iter: int = 500) -> ScalingFit:
    """Least-squares fit of ``J_c(N) = J_c + a N^-nu`` by Levenberg-Marquardt.

    Starts from ``J_c`` = value at the largest N, ``nu = 1`` and ``a`` set so
    the smallest-N point is matched.  Standard errors come from
    ``s^2 (J'J)^-1`` with ``s^2 = RSS / (n - 3)``.
    """
    est = sorted(estimates, key=lambda e: e.n_sites)
    n = np.array([e.n_sites for e in est], dtype=float)
    if n.size < 4:
        raise ValueError(f"need at least 4 estimates, got {n.size}")
    if np.unique(n).size != n.size:
        raise ValueError("estimates must have distinct N")
    y = np.array([e.j_c_n for e in est], dtype=float)

    x0 = np.array([y[-1], (y[0] - y[-1]) * n[0], 1.0])
    x, r, cost, iters = _levenberg_marquardt(n, y, x0, max_iter=max_iter)
    if not x[2] > 0:
        raise FitError(f"fit converged to non-positive nu={x[2]}")

    jac = scaling_jacobian(n, x)
    dof = n.size - 3
    s2 = cost / dof if dof > 0 else 0.0
    try:
        cov = np.linalg.inv(jac.T @ jac) * s2
        errs = tuple(float(math.sqrt(max(v, 0.0))) for v in np.diag(cov))
    except np.linalg.LinAlgError:
        errs = (float("inf"),) * 3
    return ScalingFit(
        j_c=float(x[0]),
        a=float(x[1]),
        nu=float(x[2]),
        std_errors=errs,
        residual_norm=float(math.sqrt(cost)),
        points_used=tuple(est),
        iterations=iters,
    )
