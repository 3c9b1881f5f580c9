"""Closed-form exterior solutions used as reference data.

Mie series for plane-wave scattering from a perfectly conducting sphere
(vector spherical harmonic expansion, e^{-i omega t} convention), plus the
exact field of a magnetic point dipole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import spherical_jn, spherical_yn


@dataclass(frozen=True)
class MieSeries:
    """Scattering coefficients a_n, b_n (n = 1..L) for a PEC sphere."""

    radius: float
    k: float
    L: int
    a: np.ndarray
    b: np.ndarray

    def cross_sections(self):
        """(C_ext, C_sca); equal for a lossless scatterer."""
        n = np.arange(1, self.L + 1)
        pref = 2 * np.pi / self.k**2
        c_ext = pref * np.sum((2 * n + 1) * np.real(self.a + self.b))
        c_sca = pref * np.sum((2 * n + 1) * (np.abs(self.a)**2 + np.abs(self.b)**2))
        return c_ext, c_sca


def _riccati(n_max, x):
    """psi_n = x j_n, xi_n = x h1_n and their derivatives for n = 0..n_max."""
    n = np.arange(n_max + 1)
    jn = spherical_jn(n, x)
    jnp = spherical_jn(n, x, derivative=True)
    yn = spherical_yn(n, x)
    ynp = spherical_yn(n, x, derivative=True)
    hn = jn + 1j * yn
    hnp = jnp + 1j * ynp
    psi, psip = x * jn, jn + x * jnp
    xi, xip = x * hn, hn + x * hnp
    return psi, psip, xi, xip


def mie_coefficients(radius, k, L=None):
    """PEC sphere coefficients a_n = psi_n'(kR)/xi_n'(kR), b_n = psi_n/xi_n.

    The series is truncated adaptively: at least kR + 15 terms, then extended
    until |a_n| + |b_n| drops below 1e-16 of the running maximum for three
    consecutive orders (unless an explicit L is given).
    """
    if k <= 0 or radius <= 0:
        raise ValueError("mie_coefficients requires k > 0 and radius > 0")
    x = k * radius
    if L is not None:
        psi, psip, xi, xip = _riccati(L, x)
        return MieSeries(radius, k, L, a=psip[1:] / xip[1:], b=psi[1:] / xi[1:])
    L_min = int(np.ceil(x + 15))
    n_max = L_min + 5
    while True:
        with np.errstate(all="ignore"):
            psi, psip, xi, xip = _riccati(n_max, x)
            a = psip[1:] / xip[1:]
            b = psi[1:] / xi[1:]
        # xi overflow means the true ratio has underflowed to zero
        a[~np.isfinite(a)] = 0.0
        b[~np.isfinite(b)] = 0.0
        mag = np.abs(a) + np.abs(b)
        tol = 1e-16 * mag.max()
        run = 0
        for i in range(L_min - 1, n_max):
            run = run + 1 if mag[i] < tol else 0
            if run == 3:
                Lc = i - 1  # keep terms up to the first of the 3 small ones
                return MieSeries(radius, k, Lc, a[:Lc], b[:Lc])
        if n_max > x + 600:
            return MieSeries(radius, k, n_max, a, b)
        n_max += 30


def _angular_functions(L, mu):
    """pi_n, tau_n for n = 1..L at mu = cos(theta); shapes (L, len(mu))."""
    mu = np.asarray(mu, dtype=float)
    pi = np.zeros((L + 1, len(mu)))
    tau = np.zeros((L + 1, len(mu)))
    if L >= 1:
        pi[1] = 1.0
        tau[1] = mu
    for n in range(2, L + 1):
        pi[n] = ((2 * n - 1) * mu * pi[n - 1] - n * pi[n - 2]) / (n - 1)
        tau[n] = n * mu * pi[n] - (n + 1) * pi[n - 1]
    return pi[1:], tau[1:]


def _incidence_frame(direction, polarization):
    d = np.asarray(direction, dtype=float)
    p = np.asarray(polarization, dtype=float)
    if abs(np.linalg.norm(d) - 1) > 1e-12:
        raise ValueError("propagation direction must be a unit vector")
    if abs(np.dot(d, p)) > 1e-12 * np.linalg.norm(p):
        raise ValueError("polarization must be orthogonal to the direction")
    ex = p / np.linalg.norm(p)
    ez = d
    ey = np.cross(ez, ex)
    return np.array([ex, ey, ez])


def mie_scattered(radius, params, polarization, targets, direction=(0, 0, 1),
                  series=None):
    """Scattered (E, H) of a unit plane wave p e^{ik d.x} hitting a PEC sphere.

    Targets must lie strictly outside the sphere.  Returns two (n, 3) complex
    arrays in lab coordinates.
    """
    k = params.k
    R = _incidence_frame(direction, polarization)
    X = np.atleast_2d(np.asarray(targets, dtype=float)) @ R.T
    r = np.linalg.norm(X, axis=1)
    if np.any(r <= radius * (1 - 1e-12)):
        raise ValueError("Mie evaluation target inside the sphere")
    ser = series if series is not None else mie_coefficients(radius, k)
    L = ser.L

    rho = k * r
    mu = np.clip(X[:, 2] / r, -1.0, 1.0)
    st = np.sqrt(np.maximum(0.0, 1.0 - mu**2))
    rxy = np.hypot(X[:, 0], X[:, 1])
    # phi is arbitrary on the polar axis; any value gives the same Cartesian field
    cphi = np.where(rxy > 0, X[:, 0] / np.where(rxy > 0, rxy, 1.0), 1.0)
    sphi = np.where(rxy > 0, X[:, 1] / np.where(rxy > 0, rxy, 1.0), 0.0)

    pi_n, tau_n = _angular_functions(L, mu)
    ns = np.arange(1, L + 1)
    En = 1j**ns * (2 * ns + 1) / (ns * (ns + 1))

    # radial functions h_n(rho) and D_n = [rho h_n]'(rho)/rho for n = 1..L
    nn = np.arange(L + 1)
    jn = spherical_jn(nn[:, None], rho[None, :])
    yn = spherical_yn(nn[:, None], rho[None, :])
    jnp = spherical_jn(nn[:, None], rho[None, :], derivative=True)
    ynp = spherical_yn(nn[:, None], rho[None, :], derivative=True)
    h = (jn + 1j * yn)[1:]
    Dn = ((jn + 1j * yn) / rho[None, :] + (jnp + 1j * ynp))[1:]

    wE_a = (En * 1j * ser.a)[:, None]
    wE_b = (En * ser.b)[:, None]
    fac = (ns * (ns + 1))[:, None]

    Er = cphi * np.sum(wE_a * fac * st[None, :] * pi_n * h / rho[None, :], axis=0)
    Et = np.sum(wE_a * tau_n * Dn - wE_b * pi_n * h, axis=0) * cphi
    Ep = np.sum(-wE_a * pi_n * Dn + wE_b * tau_n * h, axis=0) * sphi

    wH_b = (En * 1j * ser.b)[:, None]
    wH_a = (En * ser.a)[:, None]
    eta = params.impedance
    Hr = sphi * np.sum(wH_b * fac * st[None, :] * pi_n * h / rho[None, :], axis=0) / eta
    Ht = np.sum(wH_b * tau_n * Dn - wH_a * pi_n * h, axis=0) * sphi / eta
    Hp = np.sum(wH_b * pi_n * Dn - wH_a * tau_n * h, axis=0) * cphi / eta

    rhat = np.stack([st * cphi, st * sphi, mu], axis=1)
    that = np.stack([mu * cphi, mu * sphi, -st], axis=1)
    phat = np.stack([-sphi, cphi, np.zeros_like(sphi)], axis=1)
    E = Er[:, None] * rhat + Et[:, None] * that + Ep[:, None] * phat
    H = Hr[:, None] * rhat + Ht[:, None] * that + Hp[:, None] * phat
    return E @ R, H @ R


def mie_far_field(radius, params, polarization, directions,
                  direction=(0, 0, 1), series=None):
    """Radiated pattern F(xhat) = lim r e^{-ikr} E^sc(r xhat), one 3-vector per row."""
    k = params.k
    R = _incidence_frame(direction, polarization)
    X = np.atleast_2d(np.asarray(directions, dtype=float))
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    Xf = X @ R.T
    ser = series if series is not None else mie_coefficients(radius, k)
    L = ser.L

    mu = np.clip(Xf[:, 2], -1.0, 1.0)
    st = np.sqrt(np.maximum(0.0, 1.0 - mu**2))
    rxy = np.hypot(Xf[:, 0], Xf[:, 1])
    cphi = np.where(rxy > 0, Xf[:, 0] / np.where(rxy > 0, rxy, 1.0), 1.0)
    sphi = np.where(rxy > 0, Xf[:, 1] / np.where(rxy > 0, rxy, 1.0), 0.0)

    pi_n, tau_n = _angular_functions(L, mu)
    ns = np.arange(1, L + 1)
    cn = ((2 * ns + 1) / (ns * (ns + 1)))[:, None]
    S1 = np.sum(cn * (ser.a[:, None] * pi_n + ser.b[:, None] * tau_n), axis=0)
    S2 = np.sum(cn * (ser.a[:, None] * tau_n + ser.b[:, None] * pi_n), axis=0)

    Et = (1j / k) * cphi * S2
    Ep = -(1j / k) * sphi * S1
    that = np.stack([mu * cphi, mu * sphi, -st], axis=1)
    phat = np.stack([-sphi, cphi, np.zeros_like(sphi)], axis=1)
    return (Et[:, None] * that + Ep[:, None] * phat) @ R


def dipole_exact(x0, moment, params, targets):
    """Exact (E, H) of a magnetic point dipole m at x0.

    E = i omega mu curl(m g_k), H = curl curl (m g_k); this is the unique
    exterior Maxwell solution for PEC scattering of the same interior source.
    """
    x0 = np.asarray(x0, dtype=float)
    m = np.asarray(moment, dtype=complex)
    X = np.atleast_2d(np.asarray(targets, dtype=float))
    dx = X - x0
    r = np.linalg.norm(dx, axis=1)
    if np.any(r == 0):
        raise ValueError("dipole field evaluated at the source location")
    k = params.k
    g = np.exp(1j * k * r) / (4 * np.pi * r)
    c1 = g * (1j * k * r - 1) / r**2
    c2 = g * (3 - 3j * k * r - (k * r)**2) / r**4
    E = 1j * params.omega * params.mu * c1[:, None] * np.cross(dx, np.broadcast_to(m, dx.shape))
    H = c2[:, None] * (dx @ m)[:, None] * dx + (c1 + k * k * g)[:, None] * m[None, :]
    return E, H
