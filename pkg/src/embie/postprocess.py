"""Far-field patterns via equivalent currents on a proxy sphere, and the
spectral-tail a posteriori error monitor.

The proxy route avoids evaluating layer potentials per far direction: the
scattered fields are sampled once on an enclosing sphere, converted to
equivalent currents/charges, and radiated with plain Fourier-type integrals.
Two radiation formulas are provided; they are algebraically identical, but
the charge-augmented one avoids the O(omega) cancellation of the plain one
at low frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import index_pairs, npol, vals_to_coefs
from .layerpot import eval_scattered_fields


# ---------------------------------------------------------------------------
# proxy sphere

def proxy_grid(radius, n_theta, n_phi):
    """Gauss-Legendre (cos theta) x uniform (phi) product rule on a sphere.

    Returns (points, weights, normals); the weights integrate smooth surface
    functions, sum(w) = 4 pi radius^2.
    """
    if radius <= 0:
        raise ValueError("proxy radius must be positive")
    mu, wmu = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - mu**2)
    normals = np.stack([np.outer(st, np.cos(phi)),
                        np.outer(st, np.sin(phi)),
                        np.broadcast_to(mu[:, None], (n_theta, n_phi)).copy()],
                       axis=-1).reshape(-1, 3)
    weights = (radius**2 * 2 * np.pi / n_phi) * np.repeat(wmu, n_phi)
    return radius * normals, weights, normals


def _grid_size(k, radius, n_grid=None):
    if n_grid is not None:
        return int(n_grid), 2 * int(n_grid)
    n = int(np.ceil(max(20, 2 * k * radius + 15)))
    return n, 2 * n


@dataclass
class ProxyData:
    """Equivalent sources on a proxy sphere enclosing the scatterer."""

    radius: float
    points: np.ndarray    # (n, 3)
    weights: np.ndarray   # (n,)
    normals: np.ndarray   # (n, 3)
    J: np.ndarray         # (n, 3)  nhat x H
    M: np.ndarray         # (n, 3)  -nhat x E
    rho: np.ndarray       # (n,)    nhat . E
    sigma: np.ndarray     # (n,)    nhat . H
    params: object


def currents_from_fields(points, weights, normals, E, H, params, radius=None):
    """Equivalent currents/charges from scattered (E, H) on the grid."""
    if radius is None:
        radius = float(np.linalg.norm(points[0]))
    return ProxyData(radius=radius, points=points, weights=weights,
                     normals=normals,
                     J=np.cross(normals, H), M=-np.cross(normals, E),
                     rho=np.einsum("ij,ij->i", normals, E),
                     sigma=np.einsum("ij,ij->i", normals, H),
                     params=params)


def proxy_currents(solution, mesh, params, radius, n_grid=None,
                   eps_quad=1e-6):
    """Sample the solved scattered field on a proxy sphere.

    `solution` is a dict with keys 'representation', 'densities', and
    (for the potential formulation) 'alpha'; densities are nodal arrays as
    accepted by eval_scattered_fields.
    """
    bound = np.linalg.norm(mesh.nodes.x, axis=1).max()
    if radius < 1.5 * bound:
        raise ValueError(
            f"proxy radius {radius} too close to the scatterer "
            f"(bounding radius {bound:.3g}; need >= 1.5x)")
    nt, np_ = _grid_size(params.k, radius, n_grid)
    points, weights, normals = proxy_grid(radius, nt, np_)
    samples = eval_scattered_fields(
        solution["representation"], solution["densities"], mesh, params,
        points, eps_quad=eps_quad, alpha=solution.get("alpha"))
    E = np.array([s.E for s in samples])
    H = np.array([s.H for s in samples])
    return currents_from_fields(points, weights, normals, E, H, params,
                                radius=radius)


# ---------------------------------------------------------------------------
# far field

@dataclass
class FarField:
    """Radiation pattern F(xhat) = lim r e^{-ikr} E(r xhat) in spherical
    components, plus the raw radiation vectors."""

    directions: np.ndarray   # (m, 3)
    N: np.ndarray            # (m, 3)
    L: np.ndarray            # (m, 3)
    E_theta: np.ndarray
    E_phi: np.ndarray
    H_theta: np.ndarray
    H_phi: np.ndarray

    def E_cartesian(self):
        th, ph = _spherical_unit_vectors(self.directions)
        return self.E_theta[:, None] * th + self.E_phi[:, None] * ph


def _spherical_unit_vectors(directions):
    x, y, z = directions.T
    s = np.hypot(x, y)
    # at the poles the azimuth is arbitrary; pick phi = 0 there
    cp = np.where(s > 1e-14, x / np.where(s > 1e-14, s, 1.0), 1.0)
    sp = np.where(s > 1e-14, y / np.where(s > 1e-14, s, 1.0), 0.0)
    theta_hat = np.stack([z * cp, z * sp, -s], axis=1)
    phi_hat = np.stack([-sp, cp, np.zeros_like(s)], axis=1)
    return theta_hat, phi_hat


def _pattern(proxy, directions, N, L):
    params = proxy.params
    eta = params.impedance
    pref = 1j * params.k / (4 * np.pi)
    th, ph = _spherical_unit_vectors(directions)
    Nt, Np = np.einsum("ij,ij->i", N, th), np.einsum("ij,ij->i", N, ph)
    Lt, Lp = np.einsum("ij,ij->i", L, th), np.einsum("ij,ij->i", L, ph)
    E_theta = pref * (eta * Nt + Lp)
    E_phi = pref * (eta * Np - Lt)
    return FarField(directions=directions, N=N, L=L,
                    E_theta=E_theta, E_phi=E_phi,
                    H_theta=-E_phi / eta, H_phi=E_theta / eta)


def _check_directions(directions):
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    if np.abs(np.linalg.norm(directions, axis=1) - 1).max() > 1e-12:
        raise ValueError("far-field directions must be unit vectors")
    return directions


def far_field_standard(proxy, directions):
    """Radiation vectors N = int J e^{-ik xhat.y} dA (likewise L with M)."""
    k = proxy.params.k
    if k <= 0:
        raise ValueError("the plain radiation integral requires k > 0")
    directions = _check_directions(directions)
    phase = np.exp(-1j * k * directions @ proxy.points.T)   # (m, n)
    wJ = proxy.weights[:, None] * proxy.J
    wM = proxy.weights[:, None] * proxy.M
    return _pattern(proxy, directions, phase @ wJ, phase @ wM)


def far_field_stable(proxy, directions):
    """Charge-augmented radiation vectors, cancellation-free at small k:
    N = int ( J (e^{-ik xhat.y} - 1) - i omega y rho ) dA."""
    params = proxy.params
    k = params.k
    if k < 0:
        raise ValueError("k must be nonnegative")
    directions = _check_directions(directions)
    half = -0.5 * k * (directions @ proxy.points.T)         # theta/2
    phase1 = 2j * np.exp(1j * half) * np.sin(half)          # e^{i theta} - 1
    iw_y = 1j * params.omega * proxy.points
    wJ = proxy.weights[:, None] * proxy.J
    wM = proxy.weights[:, None] * proxy.M
    # the charge moments are direction-independent constant vectors
    qN = (proxy.weights * proxy.rho) @ iw_y
    qL = (proxy.weights * proxy.sigma) @ iw_y
    N = phase1 @ wJ - qN[None, :]
    L = phase1 @ wM - qL[None, :]
    return _pattern(proxy, directions, N, L)


# ---------------------------------------------------------------------------
# spectral-tail error monitor

@dataclass
class ErrorMonitor:
    """Per-patch top-degree Koornwinder band norms of a solved density."""

    delta: np.ndarray      # (n_patches,) tail norm per patch
    total: float           # l2 norm of delta
    relative: float        # total / density norm (0 for a zero density)
    eps: np.ndarray        # per-patch monitor, max eps = relative


def _patch_coefs(mesh, values):
    p = npol(mesh.order)
    vals = np.asarray(values).reshape(len(mesh.patches), p)
    return vals_to_coefs(mesh.order, vals.T).T    # (n_patches, p)


def tail_monitor(density):
    """Top-degree-band energy per patch; the band of a degree-n interpolant
    of a smooth function scales like its interpolation error."""
    mesh = density.mesh
    order = mesh.order
    band = np.array([i for i, (n, _) in enumerate(index_pairs(order))
                     if n == order])
    n = mesh.n_nodes
    if density.kind == "tangential":
        comps = [density.values[:n], density.values[n:]]
    else:
        comps = [density.values]
    d2 = np.zeros(len(mesh.patches))
    full2 = 0.0
    for c in comps:
        coefs = _patch_coefs(mesh, c)
        d2 += (np.abs(coefs[:, band]) ** 2).sum(axis=1)
        full2 += (np.abs(coefs) ** 2).sum()
    delta = np.sqrt(d2)
    total = float(np.linalg.norm(delta))
    norm = np.sqrt(full2)
    relative = float(total / norm) if norm > 0 else 0.0
    dmax = delta.max()
    eps = delta * (relative / dmax) if dmax > 0 else np.zeros_like(delta)
    return ErrorMonitor(delta=delta, total=total, relative=relative, eps=eps)
