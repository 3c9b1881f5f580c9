"""Dense/matrix-free GMRES, quadrature-weight symmetrization, conditioning."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import svdvals
from scipy.sparse.linalg import LinearOperator, aslinearoperator


@dataclass
class IterationLog:
    """Relative residual history of one GMRES run."""

    residuals: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    @property
    def iterations(self):
        return len(self.residuals)


def gmres(A, b, tol=1e-12, maxiter=None, restart=None, x0=None):
    """Solve A x = b with GMRES (modified Gram-Schmidt, one reorthogonalization).

    A may be a dense matrix, a LinearOperator, or any object with a matvec /
    __matmul__.  Residuals are tracked relative to ||b||.  Returns (x, log).
    """
    if hasattr(A, "matvec"):
        matvec = A.matvec
        n = A.shape[0]
    else:
        A = np.asarray(A)
        matvec = lambda v: A @ v
        n = A.shape[0]
    b = np.asarray(b, dtype=complex).ravel()
    if b.shape[0] != n:
        raise ValueError(f"rhs length {b.shape[0]} != operator size {n}")
    if maxiter is None:
        maxiter = n
    m = restart if restart is not None else maxiter

    bnorm = np.linalg.norm(b)
    log = IterationLog()
    t0 = time.perf_counter()
    if bnorm == 0.0:
        log.converged = True
        log.wall_time = time.perf_counter() - t0
        return np.zeros(n, dtype=complex), log

    x = np.zeros(n, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex).copy()
    total = 0
    while True:
        r = b - matvec(x) if (total > 0 or x0 is not None) else b.copy()
        beta = np.linalg.norm(r)
        V = np.empty((m + 1, n), dtype=complex)
        H = np.zeros((m + 1, m), dtype=complex)
        V[0] = r / beta
        # Givens-updated least squares state
        cs = np.zeros(m, dtype=complex)
        sn = np.zeros(m, dtype=complex)
        g = np.zeros(m + 1, dtype=complex)
        g[0] = beta
        j = 0
        while j < m and total < maxiter:
            w = matvec(V[j])
            h = V[: j + 1].conj() @ w
            w = w - h @ V[: j + 1]
            # one round of reorthogonalization for numerical robustness
            h2 = V[: j + 1].conj() @ w
            w = w - h2 @ V[: j + 1]
            h = h + h2
            H[: j + 1, j] = h
            hj1 = np.linalg.norm(w)
            H[j + 1, j] = hj1
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -np.conj(sn[i]) * H[i, j] + np.conj(cs[i]) * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(abs(H[j, j]), hj1)
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j] = np.conj(H[j, j]) / denom
                sn[j] = hj1 / denom
            # rotate so H[j+1, j] -> 0
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -np.conj(sn[j]) * g[j]
            g[j] = cs[j] * g[j]
            res = abs(g[j + 1]) / bnorm
            log.residuals.append(res)
            total += 1
            j += 1
            if res <= tol:
                break
            if hj1 <= 1e-14 * bnorm:  # lucky breakdown: exact solution in span
                break
            V[j] = w / hj1
        # solve the triangular system for the Krylov coefficients
        if j > 0:
            y = np.linalg.solve(H[:j, :j], g[:j])
            x = x + y @ V[:j]
        if log.residuals and log.residuals[-1] <= tol:
            log.converged = True
            break
        if total >= maxiter:
            break
    log.wall_time = time.perf_counter() - t0
    return x, log


def weight_scale(A, weights, n_constants=0):
    """Similarity-transform A by the square roots of the quadrature weights.

    With W = diag(weights), returns W^{1/2} A W^{-1/2} so that the Euclidean
    inner product of scaled vectors matches the surface L^2 product.  The
    unknown vector may carry `n_constants` trailing auxiliary entries (coupling
    constants); those rows/columns are left unscaled.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("quadrature weights must be positive for scaling")
    A = np.asarray(A)
    n = A.shape[0]
    if n != len(w) + n_constants:
        raise ValueError(
            f"operator size {n} != {len(w)} weights + {n_constants} constants")
    s = np.concatenate([np.sqrt(w), np.ones(n_constants)])
    return A * (s[:, None] / s[None, :])


def scaled_operator(A, weights, n_constants=0):
    """Matrix-free form of weight_scale for LinearOperator inputs."""
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("quadrature weights must be positive for scaling")
    Aop = aslinearoperator(A) if not hasattr(A, "matvec") else A
    n = Aop.shape[0]
    if n != len(w) + n_constants:
        raise ValueError(
            f"operator size {n} != {len(w)} weights + {n_constants} constants")
    s = np.concatenate([np.sqrt(w), np.ones(n_constants)])
    mv = lambda v: s * Aop.matvec(np.asarray(v).ravel() / s)
    return LinearOperator((n, n), matvec=mv, dtype=complex)


def condition_number(A):
    """2-norm condition number of a dense matrix."""
    sv = svdvals(np.asarray(A))
    if sv[-1] == 0:
        return np.inf
    return sv[0] / sv[-1]
