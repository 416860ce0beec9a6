"""Damped linear solves for the three execution lanes.

All solvers target (H + lam*I) s = g where the supplied matvec applies the
undamped operator H; the lam*v term is added here. The iterative solvers
stop on the relative residual ||r|| <= tol * ||g|| or at the iteration cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ContractError
from .numeric import ParamVector

DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class CgConfig:
    tol: float = 1e-5
    maxiter: int = 10
    stabilise_every: int = 10  # recompute the true residual every k iterations; 0 = never
    warm_start: bool = True
    floor: float = DIAG_FLOOR  # preconditioner diagonal floor

    def __post_init__(self):
        if self.tol <= 0:
            raise ContractError("cg tol must be positive")
        if self.maxiter < 1:
            raise ContractError("cg maxiter must be >= 1")


@dataclass(frozen=True)
class SolveResult:
    direction: ParamVector
    iterations: int
    converged: bool
    final_relative_residual: float
    negative_curvature: bool = False


def solve_diag(diag: ParamVector, g: ParamVector, lam: float, floor: float = DIAG_FLOOR) -> ParamVector:
    """Explicit diagonal inverse: s_i = g_i / (max(diag_i, floor) + lam)."""
    if diag.layout != g.layout:
        raise ContractError("diag and gradient layouts differ")
    denom = np.maximum(diag.data, floor) + lam
    return g.like(g.data / denom)


def damping_to_row(lam: float, b: int) -> float:
    """Row-space damping matching parameter-space lam under mean reduction."""
    if lam < 0 or b < 1:
        raise ContractError("damping_to_row requires lam >= 0 and b >= 1")
    return float(b) * float(lam)


def _cg_core(matvec, rhs, lam, config, precond_diag=None, x0=None, floor=DIAG_FLOOR):
    """Shared (P)CG loop on raw arrays. Returns (x, iters, converged, relres, negcurv)."""

    def apply_a(x):
        out = matvec(x)
        out += lam * x
        return out

    norm_b = float(np.linalg.norm(rhs))
    if norm_b == 0.0:
        return np.zeros_like(rhs), 0, True, 0.0, False
    m_inv = None
    if precond_diag is not None:
        m_inv = 1.0 / (np.maximum(precond_diag, floor) + lam)
    if x0 is not None and np.any(x0):
        x = np.array(x0, dtype=np.float64)
        r = rhs - apply_a(x)
    else:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    relres = float(np.linalg.norm(r)) / norm_b
    if relres <= config.tol:
        return x, 0, True, relres, False
    z = m_inv * r if m_inv is not None else r
    p = z.copy()
    rz = float(np.dot(r, z))
    for k in range(1, config.maxiter + 1):
        ap = apply_a(p)
        pap = float(np.dot(p, ap))
        if not np.isfinite(pap):
            return x, k, False, relres, False
        if pap <= 0.0:
            # Indefinite operator reached: stop at the current iterate.
            return x, k, False, relres, True
        alpha = rz / pap
        step = alpha * p
        if not np.all(np.isfinite(step)):
            return x, k, False, relres, False
        x += step
        if config.stabilise_every and k % config.stabilise_every == 0:
            r = rhs - apply_a(x)
        else:
            r -= alpha * ap
        relres = float(np.linalg.norm(r)) / norm_b
        if not np.isfinite(relres):
            return x, k, False, relres, False
        if relres <= config.tol:
            return x, k, True, relres, False
        z = m_inv * r if m_inv is not None else r
        rz_next = float(np.dot(r, z))
        beta = rz_next / rz
        rz = rz_next
        p *= beta
        p += z
    return x, config.maxiter, False, relres, False


def cg_solve(
    matvec,
    g: ParamVector,
    lam: float,
    config: CgConfig,
    precond: ParamVector | None = None,
    x0: ParamVector | None = None,
) -> SolveResult:
    """Parameter-space (P)CG on a matrix-free matvec.

    With precond, runs PCG with the diagonal preconditioner M = precond + lam
    (floored). Warm starting is the caller's choice via x0.
    """

    def mv(arr):
        return matvec(g.like(arr)).data

    x, iters, conv, relres, negcurv = _cg_core(
        mv,
        g.data,
        lam,
        config,
        precond_diag=None if precond is None else precond.data,
        x0=None if x0 is None else x0.data,
        floor=config.floor,
    )
    return SolveResult(g.like(x), iters, conv, relres, negcurv)


def row_solve_cholesky(gram: np.ndarray, rhs: np.ndarray, mu: float) -> np.ndarray:
    """Direct solve of (gram + mu*I) v = rhs via Cholesky."""
    gram = np.asarray(gram, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ContractError("gram must be a square matrix")
    if rhs.shape != (gram.shape[0],):
        raise ContractError("rhs length does not match gram")
    a = gram + mu * np.eye(gram.shape[0])
    try:
        cf = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise ContractError(
            "row system is not positive definite; mu too small or gram invalid"
        ) from exc
    return scipy.linalg.cho_solve(cf, rhs, check_finite=False)


def row_solve_cg(
    gram_matvec,
    rhs: np.ndarray,
    mu: float,
    config: CgConfig,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, int, bool, float]:
    """Row-space CG on (gram + mu*I) v = rhs; returns (v, iterations, converged, relres)."""
    rhs = np.asarray(rhs, dtype=np.float64)
    x, iters, conv, relres, _ = _cg_core(gram_matvec, rhs, mu, config, x0=x0)
    return x, iters, conv, relres
