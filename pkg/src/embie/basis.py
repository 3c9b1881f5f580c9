"""Koornwinder polynomials on the reference triangle and interpolatory node sets.

The reference triangle is T = {(u,v) : u >= 0, v >= 0, u + v <= 1}.  The
(unnormalized) Koornwinder polynomial of index (n, m), 0 <= m <= n, is

    P_{n,m}(u,v) = (1-v)^m  J^{0,2m+1}_{n-m}(1-2v)  L_m(2u/(1-v) - 1)

where J^{a,b} is a Jacobi polynomial and L_m a Legendre polynomial.  All
public evaluation routines return the L2(T)-normalized family, ordered
lexicographically by n then m.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import qr


def npol(order: int) -> int:
    """Dimension p = (order+1)(order+2)/2 of polynomials of total degree <= order."""
    return (order + 1) * (order + 2) // 2


def index_pairs(order: int) -> list[tuple[int, int]]:
    """(n, m) index pairs in the fixed lexicographic-by-n ordering."""
    return [(n, m) for n in range(order + 1) for m in range(n + 1)]


def _check_in_triangle(u, v, tol=1e-12):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u < -tol) or np.any(v < -tol) or np.any(u + v > 1 + tol):
        raise ValueError("point outside the reference triangle")
    return u, v


def _jacobi_table(nmax, beta, x):
    """Values and x-derivatives of Jacobi P^{(0,beta)}_j(x) for j = 0..nmax.

    Three-term recurrence; returns two arrays of shape (nmax+1,) + x.shape.
    """
    x = np.asarray(x, dtype=float)
    vals = np.zeros((nmax + 1,) + x.shape)
    ders = np.zeros_like(vals)
    vals[0] = 1.0
    if nmax >= 1:
        vals[1] = ((beta + 2) * x - beta) / 2.0
        ders[1] = (beta + 2) / 2.0
    a = 0.0
    for j in range(2, nmax + 1):
        c = 2 * j + a + beta
        a1 = 2 * j * (j + a + beta) * (c - 2)
        a2 = (c - 1) * (a * a - beta * beta)
        a3 = (c - 1) * c * (c - 2)
        a4 = 2 * (j + a - 1) * (j + beta - 1) * c
        vals[j] = ((a2 + a3 * x) * vals[j - 1] - a4 * vals[j - 2]) / a1
        ders[j] = ((a2 + a3 * x) * ders[j - 1] + a3 * vals[j - 1]
                   - a4 * ders[j - 2]) / a1
    return vals, ders


def _legendre_homog(mmax, a, b, with_grad):
    """Homogenized Legendre L_m(a,b) = b^m Leg_m(a/b) and (optionally) partials.

    a = 2u - 1 + v and b = 1 - v, so the b -> 0 limit is handled without
    division.  Returns (L, dLda, dLdb); gradients are None if not requested.
    """
    a = np.asarray(a, dtype=float)
    L = np.zeros((mmax + 1,) + a.shape)
    L[0] = 1.0
    da = np.zeros_like(L) if with_grad else None
    db = np.zeros_like(L) if with_grad else None
    if mmax >= 1:
        L[1] = a
        if with_grad:
            da[1] = 1.0
    for m in range(1, mmax):
        L[m + 1] = ((2 * m + 1) * a * L[m] - m * b * b * L[m - 1]) / (m + 1)
        if with_grad:
            da[m + 1] = ((2 * m + 1) * (L[m] + a * da[m])
                         - m * b * b * da[m - 1]) / (m + 1)
            db[m + 1] = ((2 * m + 1) * a * db[m]
                         - m * (2 * b * L[m - 1] + b * b * db[m - 1])) / (m + 1)
    return L, da, db


def _norm_const(n, m):
    # ||P_{n,m}||_{L2(T)}^2 = 1 / ((2n+2)(2m+1))
    return np.sqrt((2.0 * n + 2.0) * (2.0 * m + 1.0))


def koornwinder_eval(order, u, v):
    """Normalized Koornwinder values; shape u.shape + (p,)."""
    u, v = _check_in_triangle(u, v)
    a = 2.0 * u - 1.0 + v
    b = 1.0 - v
    x = 1.0 - 2.0 * v
    L, _, _ = _legendre_homog(order, a, b, with_grad=False)
    out = np.zeros(np.shape(u) + (npol(order),))
    idx = {pair: i for i, pair in enumerate(index_pairs(order))}
    for m in range(order + 1):
        J, _ = _jacobi_table(order - m, 2 * m + 1, x)
        for n in range(m, order + 1):
            out[..., idx[(n, m)]] = _norm_const(n, m) * J[n - m] * L[m]
    return out


def koornwinder_eval_grad(order, u, v):
    """Normalized values and (d/du, d/dv); three arrays of shape u.shape + (p,)."""
    u, v = _check_in_triangle(u, v)
    a = 2.0 * u - 1.0 + v
    b = 1.0 - v
    x = 1.0 - 2.0 * v
    L, La, Lb = _legendre_homog(order, a, b, with_grad=True)
    # chain rule: da/du = 2, da/dv = 1, db/dv = -1, dx/dv = -2
    Lu = 2.0 * La
    Lv = La - Lb
    p = npol(order)
    vals = np.zeros(np.shape(u) + (p,))
    dus = np.zeros_like(vals)
    dvs = np.zeros_like(vals)
    idx = {pair: i for i, pair in enumerate(index_pairs(order))}
    for m in range(order + 1):
        J, Jx = _jacobi_table(order - m, 2 * m + 1, x)
        for n in range(m, order + 1):
            i = idx[(n, m)]
            c = _norm_const(n, m)
            vals[..., i] = c * J[n - m] * L[m]
            dus[..., i] = c * J[n - m] * Lu[m]
            dvs[..., i] = c * (-2.0 * Jx[n - m] * L[m] + J[n - m] * Lv[m])
    return vals, dus, dvs


def tri_gauss(n):
    """Collapsed tensor Gauss rule on T exact for polynomials of degree <= 2n-2.

    Returns (uv, w) with uv of shape (n*n, 2).
    """
    xs, ws = leggauss(n)
    s = 0.5 * (xs + 1.0)
    w1 = 0.5 * ws
    S, Tt = np.meshgrid(s, s, indexing="ij")
    W = np.outer(w1, w1) * (1.0 - Tt)
    uv = np.stack([(S * (1.0 - Tt)).ravel(), Tt.ravel()], axis=1)
    return uv, W.ravel()


@dataclass(frozen=True)
class NodeSet:
    """Interpolatory nodes/weights on T, exact to degree `order`.

    V[i, j] is the j-th normalized Koornwinder polynomial at node i and
    V_inv maps node samples to expansion coefficients.
    """

    order: int
    nodes: np.ndarray      # (p, 2)
    weights: np.ndarray    # (p,)
    V: np.ndarray          # (p, p)
    V_inv: np.ndarray      # (p, p)

    @property
    def p(self):
        return npol(self.order)

    def vals_to_coefs(self, samples):
        return np.tensordot(self.V_inv, samples, axes=(1, 0))

    def coefs_to_vals(self, coefs):
        return np.tensordot(self.V, coefs, axes=(1, 0))

    def interp_matrix(self, targets):
        """Rows evaluate the Koornwinder interpolant at the target points."""
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        vals = koornwinder_eval(self.order, targets[:, 0], targets[:, 1])
        return vals @ self.V_inv


def _candidate_grid(m):
    pts = []
    for i in range(m):
        for j in range(m - i):
            u = (i + 0.5) / (m + 1)
            v = (j + 0.5) / (m + 1)
            if u + v < 1.0 - 0.25 / (m + 1):
                pts.append((u, v))
    return np.array(pts)


def _monomial_exactness_error(nodes, weights, order):
    err = 0.0
    from math import factorial
    for k in range(order + 1):
        for l in range(order + 1 - k):
            exact = factorial(k) * factorial(l) / factorial(k + l + 2)
            approx = np.sum(weights * nodes[:, 0] ** k * nodes[:, 1] ** l)
            err = max(err, abs(approx - exact))
    return err


@lru_cache(maxsize=None)
def build_nodeset(order: int) -> NodeSet:
    """Interior interpolatory rule by approximate Fekete selection + moment fitting.

    Greedy determinant maximization of the Koornwinder Vandermonde over a
    fine strictly-interior candidate grid (QR with column pivoting), then
    weights from the basis moments.  Retries with denser grids until the
    weights are positive, cond(V) <= 1e3, and monomials of degree <= order
    integrate to 1e-12.
    """
    if not 1 <= order <= 8:
        raise ValueError(f"unsupported order {order}; supported range is 1..8")
    p = npol(order)
    moments = np.zeros(p)
    moments[0] = 1.0 / np.sqrt(2.0)   # integral of the normalized constant
    last_err = None
    for m in (8 * order + 8, 12 * order + 12, 16 * order + 24):
        cand = _candidate_grid(m)
        A = koornwinder_eval(order, cand[:, 0], cand[:, 1])  # (ncand, p)
        _, _, piv = qr(A.T, mode="economic", pivoting=True)
        sel = list(np.sort(piv[:p]))

        def fit(selection):
            Vs = A[list(selection)]
            return np.linalg.solve(Vs.T, moments), Vs

        weights, V = fit(sel)
        # Fekete selection occasionally yields a slightly negative weight;
        # repair by greedy single-node exchange maximizing the minimum weight.
        for _ in range(20):
            if weights.min() > 0:
                break
            bad = int(np.argmin(weights))
            chosen = set(sel)
            best_min, best_sel = weights.min(), None
            for c in range(len(cand)):
                if c in chosen:
                    continue
                trial = list(sel)
                trial[bad] = c
                try:
                    wt, Vt = fit(trial)
                except np.linalg.LinAlgError:
                    continue
                if wt.min() > best_min and np.linalg.cond(Vt) <= 1e3:
                    best_min, best_sel = wt.min(), trial
            if best_sel is None:
                break
            sel = best_sel
            weights, V = fit(sel)
        nodes = cand[list(sel)]
        condV = np.linalg.cond(V)
        exact_err = _monomial_exactness_error(nodes, weights, order)
        if np.all(weights > 0) and condV <= 1e3 and exact_err <= 1e-12:
            return NodeSet(order=order, nodes=nodes, weights=weights,
                           V=V, V_inv=np.linalg.inv(V))
        last_err = (condV, exact_err, float(weights.min()))
    raise RuntimeError(
        f"node construction failed for order {order}: cond/exactness/minweight = {last_err}")


def _as_nodeset(order_or_nodeset):
    if isinstance(order_or_nodeset, NodeSet):
        return order_or_nodeset
    return build_nodeset(order_or_nodeset)


def vals_to_coefs(order, samples):
    return _as_nodeset(order).vals_to_coefs(samples)


def coefs_to_vals(order, coefs):
    return _as_nodeset(order).coefs_to_vals(coefs)


def interp_matrix(order, u, v):
    """Matrix mapping node values to values at (u, v)."""
    return _as_nodeset(order).interp_matrix(np.column_stack([u, v]))


def vector_basis(frame, scalar_values):
    """Tangential fields U_j = scalar_values[j] * uhat, V_j = scalar_values[j] * vhat.

    Returns (U, V) of shape (p, 3) for a single frame point.
    """
    scalar_values = np.asarray(scalar_values)
    U = scalar_values[:, None] * frame.uhat[None, :]
    V = scalar_values[:, None] * frame.vhat[None, :]
    return U, V
