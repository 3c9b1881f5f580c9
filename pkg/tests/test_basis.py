import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embie.basis import (build_nodeset, index_pairs, koornwinder_eval,
                         koornwinder_eval_grad, npol, tri_gauss, vals_to_coefs,
                         coefs_to_vals, interp_matrix)

ORDERS = list(range(1, 9))


def test_npol():
    assert [npol(n) for n in (1, 2, 4, 8)] == [3, 6, 15, 45]


def test_index_pairs_ordering():
    pairs = index_pairs(3)
    assert pairs[0] == (0, 0)
    assert pairs == sorted(pairs)
    assert len(pairs) == npol(3)


def test_constant_polynomial_value():
    # normalized (0,0) polynomial is the constant sqrt(2)
    v = koornwinder_eval(2, np.array([0.3]), np.array([0.2]))
    assert v[0, 0] == pytest.approx(np.sqrt(2), abs=1e-14)


def test_first_degree_polynomial():
    # unnormalized (1,0) polynomial is 1 - 3v; normalization is sqrt(4*1) = 2
    u = np.array([0.1, 0.4, 0.25])
    v = np.array([0.2, 0.3, 0.5])
    vals = koornwinder_eval(2, u, v)
    idx = index_pairs(2).index((1, 0))
    assert vals[:, idx] == pytest.approx(2.0 * (1 - 3 * v), abs=1e-13)


@pytest.mark.parametrize("order", ORDERS)
def test_orthonormality(order):
    uv, w = tri_gauss(2 * order + 2)
    V = koornwinder_eval(order, uv[:, 0], uv[:, 1])
    G = (V * w[:, None]).T @ V
    assert np.abs(G - np.eye(npol(order))).max() < 1e-12


@pytest.mark.parametrize("order", [2, 5, 8])
def test_gradient_matches_finite_differences(order):
    rng = np.random.default_rng(3)
    u = 0.1 + 0.5 * rng.random(6)
    v = (1 - u) * (0.1 + 0.7 * rng.random(6))
    _, du, dv = koornwinder_eval_grad(order, u, v)
    h = 1e-6
    du_fd = (koornwinder_eval(order, u + h, v) - koornwinder_eval(order, u - h, v)) / (2 * h)
    dv_fd = (koornwinder_eval(order, u, v + h) - koornwinder_eval(order, u, v - h)) / (2 * h)
    assert np.abs(du - du_fd).max() < 1e-5
    assert np.abs(dv - dv_fd).max() < 1e-5


@pytest.mark.parametrize("order", ORDERS)
def test_nodeset_invariants(order):
    ns = build_nodeset(order)
    assert ns.p == npol(order)
    assert np.all(ns.weights > 0)
    assert abs(ns.weights.sum() - 0.5) < 1e-12
    assert np.linalg.cond(ns.V) <= 1e3
    # nodes strictly inside T
    assert np.all(ns.nodes > 0)
    assert np.all(ns.nodes.sum(axis=1) < 1)


@pytest.mark.parametrize("order", ORDERS)
def test_nodeset_monomial_exactness(order):
    import math
    ns = build_nodeset(order)
    u, v = ns.nodes[:, 0], ns.nodes[:, 1]
    for k in range(order + 1):
        for l in range(order + 1 - k):
            exact = (math.factorial(k) * math.factorial(l)
                     / math.factorial(k + l + 2))
            assert abs((ns.weights * u**k * v**l).sum() - exact) < 1e-12


def test_tri_gauss_degree_exactness():
    uv, w = tri_gauss(6)
    u, v = uv[:, 0], uv[:, 1]
    import math
    for k in range(7):
        for l in range(7 - k):
            exact = math.factorial(k) * math.factorial(l) / math.factorial(k + l + 2)
            assert abs((w * u**k * v**l).sum() - exact) < 1e-13


@pytest.mark.parametrize("order", [2, 4, 7])
def test_vals_coefs_roundtrip(order):
    rng = np.random.default_rng(0)
    vals = rng.standard_normal(npol(order)) + 1j * rng.standard_normal(npol(order))
    coefs = vals_to_coefs(order, vals)
    back = coefs_to_vals(order, coefs)
    assert np.abs(back - vals).max() < 1e-10


def test_interp_matrix_reproduces_polynomials():
    order = 4
    ns = build_nodeset(order)
    u = np.array([0.05, 0.3, 0.61])
    v = np.array([0.8, 0.33, 0.2])
    E = interp_matrix(order, u, v)
    f = lambda uu, vv: uu**3 * vv - 2 * uu * vv**2 + 0.5
    vals = f(ns.nodes[:, 0], ns.nodes[:, 1])
    assert E @ vals == pytest.approx(f(u, v), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.95), st.floats(0.01, 0.95))
def test_interpolation_exact_on_basis_span(a, b):
    # interpolation at the node set reproduces any degree-<=order polynomial
    order = 3
    u = np.array([0.95 * a])
    v = np.array([0.95 * b * (1 - 0.95 * a)])
    ns = build_nodeset(order)
    g = lambda uu, vv: (uu - vv)**3 + uu * vv
    vals = g(ns.nodes[:, 0], ns.nodes[:, 1])
    E = interp_matrix(order, u, v)
    assert abs((E @ vals)[0] - g(u[0], v[0])) < 1e-11


def test_smooth_function_interpolation_converges_with_order():
    # non-polynomial target: error decreases substantially as order grows
    f = lambda u, v: np.sin(u + 2 * v)
    uv, w = tri_gauss(12)
    errs = []
    for order in (2, 4, 6):
        ns = build_nodeset(order)
        E = interp_matrix(order, uv[:, 0], uv[:, 1])
        vals = f(ns.nodes[:, 0], ns.nodes[:, 1])
        err = np.sqrt((w * (E @ vals - f(uv[:, 0], uv[:, 1]))**2).sum())
        errs.append(err)
    assert errs[1] < 1e-2 * errs[0]
    assert errs[2] < 1e-2 * errs[1]
