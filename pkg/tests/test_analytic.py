import numpy as np
import pytest

from embie.analytic import (dipole_exact, mie_coefficients, mie_far_field,
                            mie_scattered)
from embie.layerpot import EMParams


def _fibonacci_sphere(n, radius=1.0):
    i = np.arange(n)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1 - 2 * (i + 0.5) / n
    s = np.sqrt(1 - z * z)
    return radius * np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def _plane_wave(params, d, p, points):
    ph = np.exp(1j * params.k * points @ np.asarray(d, float))
    E = np.asarray(p, float)[None, :] * ph[:, None]
    H = np.cross(d, p)[None, :] * ph[:, None] / params.impedance
    return E, H


def _curl_fd(field, x, h=1e-5):
    """Central-difference curl of field(points)->(n,3) at a single point x."""
    c = np.zeros(3, dtype=complex)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        dF = (field(np.array([x + e]))[0] - field(np.array([x - e]))[0]) / (2 * h)
        # accumulate epsilon_{ijk} d_j F_k
        c[(j + 2) % 3] += dF[(j + 1) % 3]
        c[(j + 1) % 3] += -dF[(j + 2) % 3]
    return c


def test_coefficient_truncation_rules():
    ser = mie_coefficients(1.0, 5.0)
    assert ser.L >= 5 + 15 - 3
    mag = np.abs(ser.a) + np.abs(ser.b)
    assert mag[-1] < 1e-12 * mag.max()
    ser10 = mie_coefficients(1.0, 5.0, L=ser.L + 10)
    assert np.allclose(ser10.a[:ser.L], ser.a)


def test_boundary_trace_vanishes_on_sphere():
    # PEC condition nhat x (E_in + E_sc) = 0 at the surface validates the
    # whole harmonic expansion against the plane-wave phase factor
    params = EMParams.from_k(2.0)
    pts = _fibonacci_sphere(80, radius=1.0)
    d, p = np.array([0, 0, 1.0]), np.array([1.0, 0, 0])
    Ei, _ = _plane_wave(params, d, p, pts)
    ser = mie_coefficients(1.0, params.k)
    ser = mie_coefficients(1.0, params.k, L=ser.L + 10)
    Es, _ = mie_scattered(1.0, params, p, pts, direction=d, series=ser)
    resid = np.linalg.norm(np.cross(pts, Ei + Es), axis=1)
    assert resid.max() < 1e-12


def test_boundary_trace_stable_under_longer_series():
    params = EMParams.from_k(2.0)
    pts = _fibonacci_sphere(40, radius=1.0)
    d, p = np.array([0, 0, 1.0]), np.array([1.0, 0, 0])
    Ei, _ = _plane_wave(params, d, p, pts)

    def resid(L):
        ser = mie_coefficients(1.0, params.k, L=L)
        Es, _ = mie_scattered(1.0, params, p, pts, direction=d, series=ser)
        return np.abs(np.cross(pts, Ei + Es)).max()

    L0 = mie_coefficients(1.0, params.k).L
    assert abs(resid(L0) - resid(L0 + 10)) < 1e-13


def test_optical_theorem_extinction_equals_scattering():
    for k in (0.5, 2.0, 6.0):
        c_ext, c_sca = mie_coefficients(1.0, k).cross_sections()
        assert abs(c_ext - c_sca) < 1e-10 * max(1.0, c_ext)


def test_mie_fields_satisfy_maxwell_curl_equations():
    params = EMParams.from_k(1.3)
    p = np.array([1.0, 0, 0])
    x = np.array([0.9, -1.1, 1.4])
    ser = mie_coefficients(1.0, params.k)
    fE = lambda pts: mie_scattered(1.0, params, p, pts, series=ser)[0]
    fH = lambda pts: mie_scattered(1.0, params, p, pts, series=ser)[1]
    E1, H1 = mie_scattered(1.0, params, p, np.array([x]), series=ser)
    curlE = _curl_fd(fE, x)
    curlH = _curl_fd(fH, x)
    om = params.omega
    assert np.abs(curlE - 1j * om * params.mu * H1[0]).max() < 1e-7
    assert np.abs(curlH + 1j * om * params.eps * E1[0]).max() < 1e-7


def test_mie_scattered_rotation_invariance():
    params = EMParams.from_k(1.7)
    rng = np.random.default_rng(3)
    # random rotation via QR
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    pts = _fibonacci_sphere(20, radius=2.5)
    d, p = np.array([0, 0, 1.0]), np.array([1.0, 0, 0])
    E0, H0 = mie_scattered(1.0, params, p, pts, direction=d)
    E1, H1 = mie_scattered(1.0, params, Q @ p, pts @ Q.T, direction=Q @ d)
    assert np.abs(E1 - E0 @ Q.T).max() < 1e-12
    assert np.abs(H1 - H0 @ Q.T).max() < 1e-12


def test_mie_rejects_interior_targets():
    params = EMParams.from_k(1.0)
    with pytest.raises(ValueError):
        mie_scattered(1.0, params, [1, 0, 0], [[0.3, 0.0, 0.0]])


def test_mie_far_field_matches_scaled_near_field():
    params = EMParams.from_k(2.0)
    p = np.array([1.0, 0, 0])
    dirs = _fibonacci_sphere(12)
    F = mie_far_field(1.0, params, p, dirs)
    # transversality
    assert np.abs(np.einsum("ij,ij->i", dirs, F)).max() < 1e-13
    for r in (2e3, 4e3):
        E, _ = mie_scattered(1.0, params, p, r * dirs)
        Fr = r * np.exp(-1j * params.k * r) * E
        assert np.abs(Fr - F).max() < 2.0 / r


def test_dipole_matches_series_expansion_of_green():
    # spot-check against the explicit 1/r, 1/r^2, 1/r^3 magnetic dipole field
    params = EMParams.from_k(1.4)
    k = params.k
    m = np.array([0.3, -1.0, 0.7])
    x0 = np.array([0.1, 0.2, -0.1])
    x = np.array([1.3, -0.8, 0.5])
    dx = x - x0
    r = np.linalg.norm(dx)
    rh = dx / r
    g = np.exp(1j * k * r) / (4 * np.pi * r)
    Href = (k**2 * np.cross(np.cross(rh, m), rh) * g
            + (3 * rh * (rh @ m) - m) * (1 / r**2 - 1j * k / r) * g)
    Eref = -params.omega * params.mu * k * np.cross(rh, m) \
        * (1 + 1j / (k * r)) * g
    E, H = dipole_exact(x0, m, params, np.array([x]))
    assert np.abs(H[0] - Href).max() < 1e-12
    assert np.abs(E[0] - Eref).max() < 1e-12


def test_dipole_field_decays_like_one_over_r():
    params = EMParams.from_k(1.0)
    m = np.array([0, 0, 1.0])
    d = np.array([1.0, 1.0, 0.5])
    d /= np.linalg.norm(d)
    rs = np.array([1e3, 2e3])
    E, _ = dipole_exact(np.zeros(3), m, params, rs[:, None] * d)
    ratio = np.linalg.norm(E[1]) / np.linalg.norm(E[0])
    assert abs(ratio - 0.5) < 1e-3


def test_dipole_satisfies_maxwell_curl_equations():
    params = EMParams.from_k(0.9)
    m = np.array([0.2, 0.5, -1.0])
    x0 = np.zeros(3)
    x = np.array([0.8, -0.6, 1.1])
    fE = lambda pts: dipole_exact(x0, m, params, pts)[0]
    fH = lambda pts: dipole_exact(x0, m, params, pts)[1]
    E1, H1 = dipole_exact(x0, m, params, np.array([x]))
    om = params.omega
    assert np.abs(_curl_fd(fE, x) - 1j * om * params.mu * H1[0]).max() < 1e-6
    assert np.abs(_curl_fd(fH, x) + 1j * om * params.eps * E1[0]).max() < 1e-6


def test_dipole_rejects_source_point():
    params = EMParams.from_k(1.0)
    with pytest.raises(ValueError):
        dipole_exact([0.0, 0, 0], [0, 0, 1.0], params, [[0.0, 0, 0]])
