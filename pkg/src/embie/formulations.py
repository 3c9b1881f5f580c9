"""Boundary integral systems for PEC scattering: MFIE, NRCCIE, and the
decoupled potential (scalar + vector) formulation.

Unknown layouts stack per-node samples block-wise: tangential densities as
[u-components; v-components], then scalar blocks, then per-component coupling
constants.  Systems can be assembled dense or matrix-free; both share the
same corrected quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .analytic import dipole_exact
from .layerpot import EMParams, KernelSpec
from .linalg import gmres
from .quadrature import assemble_many, classify, far_apply_many


# ---------------------------------------------------------------------------
# incident fields

@dataclass(frozen=True)
class IncidentField:
    """Plane wave (direction, polarization) or magnetic point dipole (x0, m)."""

    kind: str
    direction: Optional[np.ndarray] = None
    polarization: Optional[np.ndarray] = None
    location: Optional[np.ndarray] = None
    moment: Optional[np.ndarray] = None


def plane_wave(direction, polarization):
    d = np.asarray(direction, dtype=float)
    p = np.asarray(polarization, dtype=complex)
    if abs(np.linalg.norm(d) - 1) > 1e-12:
        raise ValueError("plane-wave direction must be a unit vector")
    if abs(d @ p) > 1e-12 * np.linalg.norm(p):
        raise ValueError("polarization must be orthogonal to the direction")
    return IncidentField("plane_wave", direction=d, polarization=p)


def magnetic_dipole(location, moment):
    return IncidentField("magnetic_dipole",
                         location=np.asarray(location, dtype=float),
                         moment=np.asarray(moment, dtype=complex))


def incident_EH(inc, params, points):
    """Incident (E, H) at the given points, one (n, 3) array each."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if inc.kind == "plane_wave":
        ph = np.exp(1j * params.k * points @ inc.direction)
        E = inc.polarization[None, :] * ph[:, None]
        hdir = np.cross(inc.direction, inc.polarization)
        H = hdir[None, :] * ph[:, None] / params.impedance
        return E, H
    if inc.kind == "magnetic_dipole":
        return dipole_exact(inc.location, inc.moment, params, points)
    raise ValueError(f"unknown incident field kind {inc.kind!r}")


def incident_potentials(inc, params, mesh, gauge_shift=None):
    """Boundary data of a Lorenz-gauge potential pair producing incident_EH.

    Default gauge: A = E/(i omega), phi = 0 (divergence-free A for both
    supported sources).  gauge_shift=(c, d) adds the pure-gauge pair
    A += grad chi, phi += i omega chi with chi = c e^{ik d.x}, which must not
    change any physical field.  Returns a dict of nodal boundary data.
    """
    nd = mesh.nodes
    E, _ = incident_EH(inc, params, nd.x)
    om = params.omega
    A = E / (1j * om)
    phi = np.zeros(mesh.n_nodes, dtype=complex)
    dphi_dn = np.zeros(mesh.n_nodes, dtype=complex)
    divA = np.zeros(mesh.n_nodes, dtype=complex)
    if gauge_shift is not None:
        c, d = gauge_shift
        d = np.asarray(d, dtype=float)
        if abs(np.linalg.norm(d) - 1) > 1e-12:
            raise ValueError("gauge direction must be a unit vector")
        k = params.k
        chi = c * np.exp(1j * k * nd.x @ d)
        grad_chi = 1j * k * chi[:, None] * d[None, :]
        A = A + grad_chi
        phi = phi + 1j * om * chi
        dphi_dn = dphi_dn + 1j * om * 1j * k * chi * (nd.nhat @ d)
        divA = divA - k * k * chi
    nxA = np.cross(nd.nhat, A)
    return dict(phi=phi, dphi_dn=dphi_dn, A=A, divA=divA,
                nxA_u=np.einsum("ij,ij->i", nxA, nd.uhat),
                nxA_v=np.einsum("ij,ij->i", nxA, nd.vhat),
                nA=np.einsum("ij,ij->i", A, nd.nhat))


# ---------------------------------------------------------------------------
# densities and systems

@dataclass
class SurfaceDensity:
    """Nodal samples of a surface density; tangential values are stacked
    [u-block; v-block] in the local frames."""

    mesh: object
    kind: str  # 'scalar' | 'tangential'
    values: np.ndarray

    def __post_init__(self):
        n = self.mesh.n_nodes
        want = n if self.kind == "scalar" else 2 * n
        if self.kind not in ("scalar", "tangential"):
            raise ValueError(f"unknown density kind {self.kind!r}")
        if len(self.values) != want:
            raise ValueError(
                f"{self.kind} density needs {want} samples, got {len(self.values)}")

    def cartesian(self):
        """Tangential density as (n, 3) Cartesian vectors."""
        if self.kind != "tangential":
            raise ValueError("cartesian() requires a tangential density")
        nd = self.mesh.nodes
        n = self.mesh.n_nodes
        return (self.values[:n, None] * nd.uhat
                + self.values[n:, None] * nd.vhat)


@dataclass
class BIESystem:
    """Square discretized boundary-integral system A x = rhs."""

    formulation: str
    mesh: object
    params: EMParams
    alpha: Optional[float]
    layout: tuple            # ((name, size), ...)
    rhs: np.ndarray
    matvec: object           # callable x -> A x
    matrix: Optional[np.ndarray]
    n_constants: int = 0
    mode: str = "dense"
    eps_quad: float = 1e-6

    def __post_init__(self):
        if sum(s for _, s in self.layout) != len(self.rhs):
            raise ValueError("layout does not match rhs size")

    @property
    def size(self):
        return len(self.rhs)

    def weights(self):
        """Quadrature weight per unknown (constants get weight 1)."""
        w = self.mesh.nodes.wjac
        parts = []
        for name, size in self.layout:
            if size == self.mesh.n_nodes:
                parts.append(w)
            elif size == 2 * self.mesh.n_nodes:
                parts.append(np.concatenate([w, w]))
            else:
                parts.append(np.ones(size))
        return np.concatenate(parts)


def _tan_components(nd, F):
    return np.concatenate([np.einsum("ij,ij->i", F, nd.uhat),
                           np.einsum("ij,ij->i", F, nd.vhat)])


def _component_masks(mesh):
    comps = np.unique(mesh.components)
    return comps, [mesh.component_node_mask(c) for c in comps]


def _fused_apply(mesh, ops, kinds, vectors):
    """Apply several corrected operators with one shared far pass."""
    fars = far_apply_many(mesh, [ops[kd].spec for kd in kinds], vectors)
    return {kd: far + ops[kd].corrections @ np.asarray(v, dtype=complex)
            for kd, far, v in zip(kinds, fars, vectors)}


def mfie_system(mesh, params, eps_quad, incident=None, mode="dense"):
    """J/2 - M[J] = nhat x H^in; 2 tangential unknowns per node."""
    k = params.k
    (M,) = assemble_many(mesh, [KernelSpec("M", k)], eps_quad, mode=mode)
    n2 = 2 * mesh.n_nodes
    rhs = np.zeros(n2, dtype=complex)
    if incident is not None:
        nd = mesh.nodes
        _, H = incident_EH(incident, params, nd.x)
        rhs = _tan_components(nd, np.cross(nd.nhat, H))
    matrix = None
    if mode == "dense":
        matrix = 0.5 * np.eye(n2) - M.matrix
        matvec = lambda x: matrix @ x
    else:
        matvec = lambda x: 0.5 * x - M.apply(x)
    return BIESystem("MFIE", mesh, params, None,
                     (("J", n2),), rhs, matvec, matrix,
                     mode=mode, eps_quad=eps_quad)


def nrccie_system(mesh, params, eps_quad, alpha=1.0, incident=None,
                  mode="dense"):
    """Regularized combined-field system in (J, rho); alpha > 0."""
    if alpha <= 0:
        raise ValueError("nrccie_system requires alpha > 0")
    k = params.k
    om, ep, mu = params.omega, params.eps, params.mu
    kinds = ["M", "S_tan", "gradS_tan", "nS", "divS", "Sprime", "S"]
    ops = dict(zip(kinds, assemble_many(
        mesh, [KernelSpec(kd, k) for kd in kinds], eps_quad, mode=mode)))
    N = mesh.n_nodes
    rhs = np.zeros(3 * N, dtype=complex)
    if incident is not None:
        nd = mesh.nodes
        E, H = incident_EH(incident, params, nd.x)
        Etan = E - np.einsum("ij,ij->i", E, nd.nhat)[:, None] * nd.nhat
        rhs[:2 * N] = _tan_components(nd, np.cross(nd.nhat, H)) \
            + alpha * _tan_components(nd, Etan)
        rhs[2 * N:] = ep * np.einsum("ij,ij->i", E, nd.nhat)

    c_st = -1j * alpha * om * mu     # n x (n x i omega mu S[J]) = -i omega mu S_tan
    c_gr = alpha / ep
    c_ns = -1j * om * mu * ep
    c_s = -1j * alpha * om

    if mode == "dense":
        A = np.zeros((3 * N, 3 * N), dtype=complex)
        A[:2 * N, :2 * N] = 0.5 * np.eye(2 * N) - ops["M"].matrix \
            + c_st * ops["S_tan"].matrix
        A[:2 * N, 2 * N:] = c_gr * ops["gradS_tan"].matrix
        A[2 * N:, :2 * N] = c_ns * ops["nS"].matrix + alpha * ops["divS"].matrix
        A[2 * N:, 2 * N:] = 0.5 * np.eye(N) + ops["Sprime"].matrix \
            + c_s * ops["S"].matrix
        matvec = lambda x: A @ x
        matrix = A
    else:
        matrix = None

        def matvec(x):
            J, rho = x[:2 * N], x[2 * N:]
            r = _fused_apply(mesh, ops, kinds, [J, J, rho, J, J, rho, rho])
            y = np.empty(3 * N, dtype=complex)
            y[:2 * N] = 0.5 * J - r["M"] + c_st * r["S_tan"] \
                + c_gr * r["gradS_tan"]
            y[2 * N:] = c_ns * r["nS"] + alpha * r["divS"] \
                + 0.5 * rho + r["Sprime"] + c_s * r["S"]
            return y

    return BIESystem("NRCCIE", mesh, params, alpha,
                     (("J", 2 * N), ("rho", N)), rhs, matvec, matrix,
                     mode=mode, eps_quad=eps_quad)


def dpie_scalar_system(mesh, params, eps_quad, alpha=1.0, incident=None,
                       boundary_data=None, mode="dense",
                       gauge_shift=None):
    """Scalar-potential system in (sigma, V_1..V_C).

    Boundary data comes from incident_potentials(incident) unless an explicit
    dict with 'phi' and 'dphi_dn' nodal arrays is supplied."""
    if alpha <= 0:
        raise ValueError("dpie_scalar_system requires alpha > 0")
    k = params.k
    kinds = ["D_scalar", "S", "Dprime_diff", "Sprime"]
    ops = dict(zip(kinds, assemble_many(
        mesh, [KernelSpec(kd, k) for kd in kinds], eps_quad, mode=mode)))
    N = mesh.n_nodes
    comps, masks = _component_masks(mesh)
    C = len(comps)
    w = mesh.nodes.wjac

    rhs = np.zeros(N + C, dtype=complex)
    data = boundary_data
    if data is None and incident is not None:
        data = incident_potentials(incident, params, mesh, gauge_shift)
    if data is not None:
        rhs[:N] = -np.asarray(data["phi"], dtype=complex)
        for j, mk in enumerate(masks):
            rhs[N + j] = -np.sum(w[mk] * np.asarray(data["dphi_dn"])[mk])

    ia = 1j * alpha
    chi = np.array([mk.astype(float) for mk in masks])  # (C, N)

    if mode == "dense":
        A = np.zeros((N + C, N + C), dtype=complex)
        A[:N, :N] = 0.5 * np.eye(N) + ops["D_scalar"].matrix - ia * ops["S"].matrix
        A[:N, N:] = -chi.T
        flux_op = ops["Dprime_diff"].matrix - ia * ops["Sprime"].matrix
        for j, mk in enumerate(masks):
            A[N + j, :N] = w[mk] @ flux_op[mk]
            A[N + j, :N] += (ia / 2) * w * chi[j]
        matvec = lambda x: A @ x
        matrix = A
    else:
        matrix = None

        def matvec(x):
            sigma, V = x[:N], x[N:]
            r = _fused_apply(mesh, ops, kinds, [sigma] * 4)
            y = np.empty(N + C, dtype=complex)
            y[:N] = 0.5 * sigma + r["D_scalar"] - ia * r["S"] - chi.T @ V
            fl = r["Dprime_diff"] - ia * r["Sprime"] + (ia / 2) * sigma
            for j, mk in enumerate(masks):
                y[N + j] = np.sum(w[mk] * fl[mk])
            return y

    return BIESystem("DPIE-scalar", mesh, params, alpha,
                     (("sigma", N), ("V", C)), rhs, matvec, matrix,
                     n_constants=C, mode=mode, eps_quad=eps_quad)


def dpie_vector_system(mesh, params, eps_quad, alpha=1.0, incident=None,
                       boundary_data=None, mode="dense", gauge_shift=None):
    """Vector-potential system in (a, rho, v_1..v_C)."""
    if alpha <= 0:
        raise ValueError("dpie_vector_system requires alpha > 0")
    k = params.k
    kinds = ["M", "nxS_n", "nxS_nxtan", "nxgradS",
             "D_scalar", "divS_nx", "S", "nSn", "nS_nx", "Sprime"]
    ops = dict(zip(kinds, assemble_many(
        mesh, [KernelSpec(kd, k) for kd in kinds], eps_quad, mode=mode)))
    N = mesh.n_nodes
    comps, masks = _component_masks(mesh)
    C = len(comps)
    w = mesh.nodes.wjac
    n3 = 3 * N

    rhs = np.zeros(n3 + C, dtype=complex)
    data = boundary_data
    if data is None and incident is not None:
        data = incident_potentials(incident, params, mesh, gauge_shift)
    if data is not None:
        rhs[:N] = -np.asarray(data["nxA_u"], dtype=complex)
        rhs[N:2 * N] = -np.asarray(data["nxA_v"], dtype=complex)
        rhs[2 * N:n3] = -np.asarray(data["divA"], dtype=complex)
        for j, mk in enumerate(masks):
            rhs[n3 + j] = -np.sum(w[mk] * np.asarray(data["nA"])[mk])

    ia = 1j * alpha
    chi = np.array([mk.astype(float) for mk in masks])

    if mode == "dense":
        A = np.zeros((n3 + C, n3 + C), dtype=complex)
        # tangential rows: a/2 + n x curl S[a] - nxS[n rho]
        #                  + ia (nxS[nxa] + nxgradS[rho])
        A[:2 * N, :2 * N] = 0.5 * np.eye(2 * N) + ops["M"].matrix \
            + ia * ops["nxS_nxtan"].matrix
        A[:2 * N, 2 * N:n3] = -ops["nxS_n"].matrix + ia * ops["nxgradS"].matrix
        # scalar rows: rho/2 + D[rho] + ia (divS[nxa] - k^2 S[rho]) + sum v_j chi_j
        A[2 * N:n3, :2 * N] = ia * ops["divS_nx"].matrix
        A[2 * N:n3, 2 * N:n3] = 0.5 * np.eye(N) + ops["D_scalar"].matrix \
            - ia * k * k * ops["S"].matrix
        A[2 * N:n3, n3:] = chi.T
        # flux rows: int(-nSn[rho] + ia nS_nx[a] + ia (-rho/2 + S'[rho]))
        for j, mk in enumerate(masks):
            A[n3 + j, :2 * N] = ia * (w[mk] @ ops["nS_nx"].matrix[mk])
            A[n3 + j, 2 * N:n3] = -(w[mk] @ ops["nSn"].matrix[mk]) \
                + ia * (w[mk] @ ops["Sprime"].matrix[mk])
            A[n3 + j, 2 * N:n3] += -(ia / 2) * w * chi[j]
        matvec = lambda x: A @ x
        matrix = A
    else:
        matrix = None

        def matvec(x):
            a, rho, v = x[:2 * N], x[2 * N:n3], x[n3:]
            vecs = [a, rho, a, rho, rho, a, rho, rho, a, rho]
            r = _fused_apply(mesh, ops, kinds, vecs)
            y = np.empty(n3 + C, dtype=complex)
            y[:2 * N] = 0.5 * a + r["M"] + ia * r["nxS_nxtan"] \
                - r["nxS_n"] + ia * r["nxgradS"]
            y[2 * N:n3] = ia * r["divS_nx"] + 0.5 * rho \
                + r["D_scalar"] - ia * k * k * r["S"] + chi.T @ v
            fl = ia * r["nS_nx"] - r["nSn"] + ia * (r["Sprime"] - 0.5 * rho)
            for j, mk in enumerate(masks):
                y[n3 + j] = np.sum(w[mk] * fl[mk])
            return y

    return BIESystem("DPIE-vector", mesh, params, alpha,
                     (("a", 2 * N), ("rho", N), ("v", C)), rhs, matvec, matrix,
                     n_constants=C, mode=mode, eps_quad=eps_quad)


def solve(system, tol=1e-7, maxiter=None, restart=None, weight_scaled=True):
    """GMRES-solve a BIESystem; returns (unknown dict, IterationLog).

    With weight scaling the iteration runs on W^{1/2} A W^{-1/2} so residuals
    measure the surface L^2 norm; coupling constants are left unscaled.
    """
    if weight_scaled:
        s = np.sqrt(system.weights())
        mv = lambda v: s * system.matvec(v / s)
        b = s * system.rhs

        class _Op:
            shape = (system.size, system.size)
            matvec = staticmethod(mv)

        x, log = gmres(_Op, b, tol=tol, maxiter=maxiter, restart=restart)
        x = x / s
    else:
        class _Op:
            shape = (system.size, system.size)
            matvec = staticmethod(system.matvec)

        x, log = gmres(_Op, system.rhs, tol=tol, maxiter=maxiter,
                       restart=restart)
    if not log.converged and np.linalg.norm(system.rhs) > 0:
        raise RuntimeError(
            f"GMRES failed to reach {tol} in {log.iterations} iterations "
            f"(last residual {log.residuals[-1]:.3e})")

    mesh, N = system.mesh, system.mesh.n_nodes
    out = {}
    pos = 0
    for name, size in system.layout:
        seg = x[pos:pos + size]
        pos += size
        if size == 2 * N:
            out[name] = SurfaceDensity(mesh, "tangential", seg)
        elif size == N:
            out[name] = SurfaceDensity(mesh, "scalar", seg)
        else:
            out[name] = seg
    return out, log
