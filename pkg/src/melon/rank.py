"""Singular spectra of learning-rate matrices and optimality-gap checks.

A one-directional strategy produces ``W = w 1^T`` (per-interaction weights)
or ``W = 1 r^T`` (per-parameter rates), both rank one, so by Eckart-Young
its spectral distance to any target ``W*`` is at least ``sigma_2(W*)``.
A dense two-directional matrix has no such floor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class RankError(ValueError):
    pass


@dataclass
class Spectrum:
    values: np.ndarray  # non-increasing, non-negative

    def numerical_rank(self, tol: float = 1e-10) -> int:
        if self.values.size == 0 or self.values[0] == 0.0:
            return 0
        return int((self.values / self.values[0] > tol).sum())

    def ratio(self, k: int = 2) -> float:
        """``sigma_k / sigma_1`` (0 when undefined)."""
        if self.values.size < k or self.values[0] == 0.0:
            return 0.0
        return float(self.values[k - 1] / self.values[0])


def jacobi_svd(A, tol: float = 1e-15, max_sweeps: int = 100):
    """One-sided Jacobi SVD: ``A = U @ diag(s) @ Vt`` with ``s`` sorted descending.

    Thin factors: for an ``m x n`` input, ``U`` is ``m x r``, ``Vt`` is ``r x n``
    with ``r = min(m, n)``.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2:
        raise RankError(f"expected a matrix, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise RankError("non-finite entries in matrix")
    transpose = A.shape[0] < A.shape[1]
    X = A.T.copy() if transpose else A
    m, n = X.shape
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                xp, xq = X[:, p], X[:, q]
                alpha, beta, gamma = float(xp @ xp), float(xq @ xq), float(xp @ xq)
                scale = math.sqrt(alpha) * math.sqrt(beta)
                if scale == 0.0 or abs(gamma) <= tol * scale:
                    continue
                off = max(off, abs(gamma) / scale)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                rot = np.array([[c, c * t], [-c * t, c]])
                X[:, [p, q]] = X[:, [p, q]] @ rot
                V[:, [p, q]] = V[:, [p, q]] @ rot
        if off <= tol:
            break
    sig = np.linalg.norm(X, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, X, V = sig[order], X[:, order], V[:, order]
    U = np.zeros_like(X)
    nz = sig > 0
    U[:, nz] = X[:, nz] / sig[nz]
    if transpose:
        return V, sig, U.T
    return U, sig, V.T


def svd(W):
    return jacobi_svd(W)


def spectrum(W) -> Spectrum:
    return Spectrum(jacobi_svd(W)[1])


def spectral_norm(A) -> float:
    s = jacobi_svd(A)[1]
    return float(s[0]) if s.size else 0.0


def truncate(W, k: int) -> np.ndarray:
    U, s, Vt = jacobi_svd(W)
    return (U[:, :k] * s[:k]) @ Vt[:k]


def best_rank_k_error(W, k: int) -> float:
    """``sigma_{k+1}(W)``: spectral error of the best rank-``k`` approximation."""
    W = np.asarray(W, dtype=np.float64)
    r = min(W.shape)
    if not 1 <= k <= r:
        raise RankError(f"k must be in [1, {r}], got {k}")
    s = jacobi_svd(W)[1]
    return float(s[k]) if k < r else 0.0


# -- structured approximations -------------------------------------------


_FIT_CACHE: dict = {}


def _fit_problem(shape: tuple[int, int], structure: str):
    """Compiled-once convex program per (shape, structure); ``W*`` is a parameter."""
    import cvxpy as cp

    key = (shape, structure)
    if key not in _FIT_CACHE:
        m, n = shape
        target = cp.Parameter((m, n))
        if structure == "row":
            v = cp.Variable((m, 1))
            fit = v @ np.ones((1, n))
        elif structure == "column":
            v = cp.Variable((1, n))
            fit = np.ones((m, 1)) @ v
        else:
            raise ValueError(f"structure must be 'row' or 'column', got {structure!r}")
        prob = cp.Problem(cp.Minimize(cp.sigma_max(target - fit)))
        _FIT_CACHE[key] = (prob, target, v)
    return _FIT_CACHE[key]


def structured_fit(W_star, structure: str, solver: str | None = None):
    """Best spectral-norm fit of ``W*`` by ``w 1^T`` ("row") or ``1 r^T`` ("column").

    Solved as a convex program; returns ``(fit matrix, gap)`` with the gap
    recomputed from the SVD of the residual, so it never under-reports.
    """
    W_star = np.asarray(W_star, dtype=np.float64)
    m, n = W_star.shape
    prob, target, v = _fit_problem((m, n), structure)
    target.value = W_star
    prob.solve(solver=solver)
    if v.value is None:
        raise RankError(f"structured fit failed: {prob.status}")
    F = np.broadcast_to(v.value, (m, n)).copy()
    return F, spectral_norm(W_star - F)


def dense_fit(W_star, steps: int = 200, lr: float = 0.5) -> np.ndarray:
    """Unconstrained two-directional fit by gradient descent on ``||W - W*||_F^2 / 2``."""
    W_star = np.asarray(W_star, dtype=np.float64)
    W = np.zeros_like(W_star)
    for _ in range(steps):
        W -= lr * (W - W_star)
    return W


def planted(m: int, n: int, K: int, rng: np.random.Generator, low: float = 0.1) -> np.ndarray:
    """Random rank-``K`` matrix with singular values drawn from [low, 1]."""
    U, _ = np.linalg.qr(rng.standard_normal((m, K)))
    V, _ = np.linalg.qr(rng.standard_normal((n, K)))
    s = np.sort(rng.uniform(low, 1.0, K))[::-1]
    return (U * s) @ V.T


def theorem1_check(W_star, one_dir: list | None = None, two_dir=None, tol: float = 1e-6,
                   solver: str | None = None) -> dict:
    """Instance check of: one-directional gap >= sigma_2(W*) and a dense fit beats it.

    ``one_dir``: extra rank-one matrices (e.g. produced by baseline
    strategies) whose gaps are also checked; ``two_dir``: a dense matrix, by
    default fitted by gradient descent.
    """
    W_star = np.asarray(W_star, dtype=np.float64)
    sig = jacobi_svd(W_star)[1]
    sigma2 = float(sig[1]) if sig.size > 1 else 0.0
    _, gap_row = structured_fit(W_star, "row", solver)
    _, gap_col = structured_fit(W_star, "column", solver)
    gaps_1d = [gap_row, gap_col]
    extra = [spectral_norm(W_star - np.asarray(M)) for M in (one_dir or [])]
    gaps_1d += extra
    rank1_gap = spectral_norm(W_star - truncate(W_star, 1))
    W2 = dense_fit(W_star) if two_dir is None else np.asarray(two_dir)
    gap_2d = spectral_norm(W_star - W2)
    best_1d = min(gaps_1d)
    one_dir_ok = best_1d >= sigma2 - tol
    two_dir_ok = gap_2d < sigma2 if sigma2 > tol else gap_2d <= tol
    return {
        "sigma": sig.tolist(),
        "sigma2": sigma2,
        "gap_row_fit": gap_row,
        "gap_column_fit": gap_col,
        "gap_extra_one_dir": extra,
        "gap_rank1_svd": rank1_gap,
        "best_one_dir_gap": best_1d,
        "two_dir_gap": gap_2d,
        "one_dir_ok": bool(one_dir_ok),
        "two_dir_ok": bool(two_dir_ok),
        "pass": bool(one_dir_ok and two_dir_ok and best_1d >= gap_2d - tol),
    }


# -- learning-rate matrix capture ------------------------------------------


def densified(strategy, W: np.ndarray, coords: np.ndarray, columns=None):
    """Dense rate matrix over ``columns`` (default: all coordinates the batch touches)."""
    cols = np.unique(coords) if columns is None else np.sort(np.asarray(columns))
    return strategy.densify(W, coords, cols), cols


def write_heatmap(M: np.ndarray, path: str | Path) -> None:
    """Matrix rows (each followed by its row mean) plus one marginal row of column means."""
    M = np.asarray(M, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in M:
            w.writerow([repr(float(x)) for x in row] + [repr(float(row.mean()))])
        w.writerow([repr(float(x)) for x in M.mean(axis=0)] + [repr(float(M.mean()))])


class Capture:
    """``run_online`` hook recording densified W over a slice of flat coordinates.

    ``columns``: flat coordinates to keep (e.g. one embedding row); ``None``
    keeps every coordinate the batch touches. Only the first ``limit``
    batches are captured.
    """

    def __init__(self, columns=None, limit: int = 1):
        self.columns = columns
        self.limit = limit
        self.matrices: list[np.ndarray] = []

    def __call__(self, state, batch, grads, W) -> None:
        if len(self.matrices) >= self.limit:
            return
        M, _ = densified(state.strategy, W, grads.coords, self.columns)
        self.matrices.append(M)
