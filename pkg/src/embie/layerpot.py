"""Helmholtz kernel catalog and off-surface field evaluation.

All kernels derive from g_k(x-y) = e^{ik r}/(4 pi r).  A "kernel pack" holds
the shared factors for a block of (target, source) pairs:

    grad_x g = c1 * dx,          c1 = g (ikr - 1)/r^2
    Hess_x g = c2 dx dx^T + c1 I, c2 = g (3 - 3ikr - (kr)^2)/r^4

with dx = x - y.  Tangential operator blocks are expressed in the local
orthonormal frames (uhat, vhat) of target and source; off-surface kinds
return Cartesian 3-vectors per source component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EMParams:
    """Time-harmonic material parameters, e^{-i omega t} convention."""

    omega: float
    eps: float = 1.0
    mu: float = 1.0

    @property
    def k(self):
        return self.omega * math.sqrt(self.eps * self.mu)

    @property
    def impedance(self):
        return math.sqrt(self.mu / self.eps)

    @classmethod
    def from_k(cls, k, eps=1.0, mu=1.0):
        return cls(omega=k / math.sqrt(eps * mu), eps=eps, mu=mu)


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    k: complex

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if np.imag(self.k) < 0:
            raise ValueError("wavenumber must have Im(k) >= 0")


@dataclass(frozen=True)
class FieldSample:
    point: np.ndarray
    E: np.ndarray
    H: np.ndarray


def green(k, x, y):
    """Helmholtz Green's function g_k(x - y); coincident points are an error."""
    r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    if r == 0:
        raise ValueError("coincident points in green()")
    return np.exp(1j * k * r) / (4 * np.pi * r)


class PairGeometry:
    """Pairwise displacement/distance between targets X (nt,3) and sources Y (ns,3)."""

    def __init__(self, X, Y):
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        self.dx = X[:, None, :] - Y[None, :, :]
        r2 = np.einsum("tsi,tsi->ts", self.dx, self.dx)
        self.r = np.sqrt(r2)
        self.zero = self.r == 0
        self.safe = np.where(self.zero, 1.0, self.r)


class KernelPack:
    """Shared kernel factors for all pairs of targets X (nt,3) and sources Y (ns,3).

    Pairs with r = 0 get g = c1 = c2 = 0 so that assembly routines can zero
    the diagonal explicitly; singular blocks never rely on those entries.
    """

    def __init__(self, k, X=None, Y=None, geo=None):
        if geo is None:
            geo = PairGeometry(X, Y)
        r, safe = geo.r, geo.safe
        ikr = 1j * k * r
        g = np.exp(ikr) / (4 * np.pi * safe)
        c1 = g * (ikr - 1.0) / safe**2
        c2 = g * (3.0 - 3.0 * ikr - (k * r)**2) / safe**4
        if np.any(geo.zero):
            g = np.where(geo.zero, 0.0, g)
            c1 = np.where(geo.zero, 0.0, c1)
            c2 = np.where(geo.zero, 0.0, c2)
        self.k = k
        self.dx = geo.dx
        self.r = r
        self.g = g
        self.c1 = c1
        self.c2 = c2


def _dot_t(dx_or_g, vecs):
    # contract pair tensor (nt,ns,3) with per-target vectors (nt,3)
    return np.einsum("tsi,ti->ts", dx_or_g, vecs)


def _dot_s(tensor, vecs):
    return np.einsum("tsi,si->ts", tensor, vecs)


# Each kind: (n_target_components, n_source_components, function).
# Surface kinds take (pack, tf, sf) where tf/sf expose x, nhat, uhat, vhat
# arrays; off-surface "_vec" kinds ignore target frames.

def _k_S(p, tf, sf):
    return [[p.g]]


def _k_D(p, tf, sf):
    return [[-p.c1 * _dot_s(p.dx, sf["nhat"])]]


def _k_Sprime(p, tf, sf):
    return [[p.c1 * _dot_t(p.dx, tf["nhat"])]]


def _dprime(p, tf, sf):
    dt = _dot_t(p.dx, tf["nhat"])
    ds = _dot_s(p.dx, sf["nhat"])
    nn = np.einsum("ti,si->ts", tf["nhat"], sf["nhat"])
    return -(p.c2 * dt * ds + p.c1 * nn)


def _k_Dprime_diff(p, tf, sf):
    # weakly singular difference D'_k - D'_0; needs the static pack alongside
    p0 = p.static_pack
    return [[_dprime(p, tf, sf) - _dprime(p0, tf, sf)]]


def _tvecs(f):
    return (f["uhat"], f["vhat"])


def _k_M(p, tf, sf):
    # nhat x curl S_k[J], tangential 2x2:  c1 [ (t.dx)(n.s) - (t.s)(n.dx) ]
    n_dx = _dot_t(p.dx, tf["nhat"])
    out = []
    for t in _tvecs(tf):
        t_dx = _dot_t(p.dx, t)
        row = []
        for s in _tvecs(sf):
            n_s = np.einsum("ti,si->ts", tf["nhat"], s)
            t_s = np.einsum("ti,si->ts", t, s)
            row.append(p.c1 * (t_dx * n_s - t_s * n_dx))
        out.append(row)
    return out


def _k_S_tan(p, tf, sf):
    return [[p.g * np.einsum("ti,si->ts", t, s) for s in _tvecs(sf)]
            for t in _tvecs(tf)]


def _k_nxS_tan(p, tf, sf):
    # t . (n_x x s) = (t x n_x) . s  (cyclic triple product)
    return [[p.g * np.einsum("ti,si->ts", np.cross(t, tf["nhat"]), s)
             for s in _tvecs(sf)] for t in _tvecs(tf)]


def _k_nxS_nxtan(p, tf, sf):
    out = []
    for t in _tvecs(tf):
        txn = np.cross(t, tf["nhat"])
        row = []
        for s in _tvecs(sf):
            row.append(p.g * np.einsum("ti,si->ts", txn, np.cross(sf["nhat"], s)))
        out.append(row)
    return out


def _k_nxS_n(p, tf, sf):
    return [[p.g * np.einsum("ti,si->ts", np.cross(t, tf["nhat"]), sf["nhat"])]
            for t in _tvecs(tf)]


def _k_nxgradS(p, tf, sf):
    # t . (n_x x grad g) = (t x n_x) . c1 dx
    return [[p.c1 * _dot_t(p.dx, np.cross(t, tf["nhat"]))]
            for t in _tvecs(tf)]


def _k_gradS_tan(p, tf, sf):
    return [[p.c1 * _dot_t(p.dx, t)] for t in _tvecs(tf)]


def _k_nS(p, tf, sf):
    return [[p.g * np.einsum("ti,si->ts", tf["nhat"], s) for s in _tvecs(sf)]]


def _k_nSn(p, tf, sf):
    return [[p.g * np.einsum("ti,si->ts", tf["nhat"], sf["nhat"])]]


def _k_nS_nx(p, tf, sf):
    return [[p.g * np.einsum("ti,si->ts", tf["nhat"], np.cross(sf["nhat"], s))
             for s in _tvecs(sf)]]


def _k_divS(p, tf, sf):
    return [[p.c1 * _dot_s(p.dx, s) for s in _tvecs(sf)]]


def _k_divS_nx(p, tf, sf):
    return [[p.c1 * _dot_s(p.dx, np.cross(sf["nhat"], s)) for s in _tvecs(sf)]]


# off-surface kinds: target components are Cartesian x,y,z

def _k_S_vec(p, tf, sf):
    return [[p.g * s[None, :, i] for s in _tvecs(sf)] for i in range(3)]


def _k_S_n_vec(p, tf, sf):
    n = sf["nhat"]
    return [[p.g * n[None, :, i]] for i in range(3)]


def _k_S_nx_vec(p, tf, sf):
    return [[p.g * np.cross(sf["nhat"], s)[None, :, i] for s in _tvecs(sf)]
            for i in range(3)]


def _k_gradS_vec(p, tf, sf):
    return [[p.c1 * p.dx[:, :, i]] for i in range(3)]


def _k_curlS_vec(p, tf, sf):
    # curl_x S[J] kernel: grad g x s = c1 dx x s
    return [[p.c1 * np.cross(p.dx, s[None, :, :])[:, :, i] for s in _tvecs(sf)]
            for i in range(3)]


def _k_curlS_n_vec(p, tf, sf):
    return [[p.c1 * np.cross(p.dx, sf["nhat"][None, :, :])[:, :, i]]
            for i in range(3)]


def _k_curlS_nx_vec(p, tf, sf):
    return [[p.c1 * np.cross(p.dx, np.cross(sf["nhat"], s)[None, :, :])[:, :, i]
             for s in _tvecs(sf)] for i in range(3)]


def _k_gradD_vec(p, tf, sf):
    # grad_x (dg/dn_y) = -(c2 dx (dx.n_y) + c1 n_y)
    ds = _dot_s(p.dx, sf["nhat"])
    return [[-(p.c2 * p.dx[:, :, i] * ds + p.c1 * sf["nhat"][None, :, i])]
            for i in range(3)]


def _k_graddivS_vec(p, tf, sf):
    # grad div S[J] kernel: Hess(g) s = c2 dx (dx.s) + c1 s
    out = []
    for i in range(3):
        row = []
        for s in _tvecs(sf):
            ds = _dot_s(p.dx, s)
            row.append(p.c2 * p.dx[:, :, i] * ds + p.c1 * s[None, :, i])
        out.append(row)
    return out


def _k_graddivS_n_vec(p, tf, sf):
    n = sf["nhat"]
    ds = _dot_s(p.dx, n)
    return [[p.c2 * p.dx[:, :, i] * ds + p.c1 * n[None, :, i]] for i in range(3)]


def _k_D_scalar(p, tf, sf):
    return _k_D(p, tf, sf)


KERNEL_KINDS = {
    # on-surface scalar and tangential blocks
    "S": (1, 1, _k_S),
    "D": (1, 1, _k_D),
    "Sprime": (1, 1, _k_Sprime),
    "Dprime_diff": (1, 1, _k_Dprime_diff),
    "M": (2, 2, _k_M),
    "S_tan": (2, 2, _k_S_tan),
    "nxS_tan": (2, 2, _k_nxS_tan),
    "nxS_nxtan": (2, 2, _k_nxS_nxtan),
    "nxS_n": (2, 1, _k_nxS_n),
    "nxgradS": (2, 1, _k_nxgradS),
    "gradS_tan": (2, 1, _k_gradS_tan),
    "nS": (1, 2, _k_nS),
    "nSn": (1, 1, _k_nSn),
    "nS_nx": (1, 2, _k_nS_nx),
    "divS": (1, 2, _k_divS),
    "divS_nx": (1, 2, _k_divS_nx),
    # off-surface (Cartesian target components)
    "S_vec": (3, 2, _k_S_vec),
    "S_n_vec": (3, 1, _k_S_n_vec),
    "S_nx_vec": (3, 2, _k_S_nx_vec),
    "gradS_vec": (3, 1, _k_gradS_vec),
    "curlS_vec": (3, 2, _k_curlS_vec),
    "curlS_n_vec": (3, 1, _k_curlS_n_vec),
    "curlS_nx_vec": (3, 2, _k_curlS_nx_vec),
    "gradD_vec": (3, 1, _k_gradD_vec),
    "graddivS_vec": (3, 2, _k_graddivS_vec),
    "graddivS_n_vec": (3, 1, _k_graddivS_n_vec),
    "D_scalar": (1, 1, _k_D_scalar),
}


def kind_shape(kind):
    a, b, _ = KERNEL_KINDS[kind]
    return a, b


def make_pack(spec: KernelSpec, X, Y):
    p = KernelPack(spec.k, X, Y)
    if spec.kind == "Dprime_diff":
        p.static_pack = KernelPack(0.0, X, Y)
    return p


def kernel_block(spec: KernelSpec, pack, tf, sf):
    """Evaluate the kind on a prepared pack; returns nested [A][B] of (nt,ns)."""
    return KERNEL_KINDS[spec.kind][2](pack, tf, sf)


def kernel_point(spec: KernelSpec, x, nx, y, ny, ux=None, vx=None, uy=None, vy=None):
    """Pointwise kernel for a single (target, source) pair.

    Frames default to an arbitrary tangent pair completed from the normals;
    kinds that use uhat/vhat require them explicitly.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.array_equal(x, y):
        raise ValueError("coincident points in kernel_point()")

    def complete(n, u, v):
        n = np.asarray(n, dtype=float)
        if u is None:
            t = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
            u = np.cross(n, t)
            u /= np.linalg.norm(u)
        if v is None:
            v = np.cross(n, u)
        return dict(nhat=np.atleast_2d(n), uhat=np.atleast_2d(u),
                    vhat=np.atleast_2d(v))

    tf = complete(nx, ux, vx)
    sf = complete(ny, uy, vy)
    pack = make_pack(spec, x[None, :], y[None, :])
    blocks = kernel_block(spec, pack, tf, sf)
    out = np.array([[blocks[i][j][0, 0] for j in range(len(blocks[0]))]
                    for i in range(len(blocks))])
    return out[0, 0] if out.shape == (1, 1) else out


def eval_scattered_fields(representation, densities, mesh, params, targets,
                          eps_quad=1e-8, alpha=None):
    """E^sc, H^sc at off-surface targets from solved surface densities.

    representation: 'MFIE-potentials' (densities: dict J), 'NRCCIE-potentials'
    (dict J, rho), or 'DPIE' (dict a, rho, sigma optional, alpha required).
    Imported lazily to avoid a cycle with the quadrature module.
    """
    from .quadrature import potential_matrix

    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    nd = mesh.nodes
    dmin = np.sqrt(((targets[:, None, :] - nd.x[None, :, :])**2).sum(-1)).min()
    if dmin < 1e-12:
        raise ValueError("target too close to the surface")

    k = params.k
    om = params.omega

    def apply(kind, vec):
        A = potential_matrix(mesh, KernelSpec(kind, k), targets, eps_quad)
        return (A @ vec).reshape(3, len(targets)).T

    E = np.zeros((len(targets), 3), dtype=complex)
    H = np.zeros((len(targets), 3), dtype=complex)
    if representation == "MFIE-potentials":
        J = densities["J"]
        # E = (i/(omega eps)) (grad div + k^2) S_k[J];  H = curl S_k[J]
        E = (1j / (om * params.eps)) * (apply("graddivS_vec", J)
                                        + k * k * apply("S_vec", J))
        H = apply("curlS_vec", J)
    elif representation == "NRCCIE-potentials":
        J, rho = densities["J"], densities["rho"]
        E = 1j * om * params.mu * apply("S_vec", J) \
            - (1.0 / params.eps) * apply("gradS_vec", rho)
        H = apply("curlS_vec", J)
    elif representation == "DPIE":
        if alpha is None:
            raise ValueError("DPIE representation requires alpha")
        a = densities["a"]
        rho = densities["rho"]
        sigma = densities.get("sigma")
        # A^sc = curl S_k[a] - S_k[n rho] + i alpha (S_k[n x a] + grad S_k[rho])
        A = apply("curlS_vec", a) - apply("S_n_vec", rho) \
            + 1j * alpha * (apply("S_nx_vec", a) + apply("gradS_vec", rho))
        # H = (1/mu) curl A^sc; curl curl S = grad div S + k^2 S, curl grad = 0
        curlA = (apply("graddivS_vec", a) + k * k * apply("S_vec", a)) \
            - apply("curlS_n_vec", rho) + 1j * alpha * apply("curlS_nx_vec", a)
        gradphi = np.zeros_like(A)
        if sigma is not None and np.any(sigma):
            gradphi = apply("gradD_vec", sigma) - 1j * alpha * apply("gradS_vec", sigma)
        E = 1j * om * A - gradphi
        H = curlA / params.mu
    else:
        raise ValueError(f"unknown representation {representation!r}")
    return [FieldSample(point=t, E=e, H=h) for t, e, h in zip(targets, E, H)]
