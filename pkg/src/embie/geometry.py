"""Surfaces as atlases of curved triangular charts.

Each patch is a map from the reference triangle T into R^3.  Analytic shapes
(sphere, torus) carry exact charts so positions and frames have no geometric
approximation error; every patch also stores degree-n_order Koornwinder
coefficients of (x, y, z), which are the sole representation for meshes read
from file.  Meshes carry the per-patch component index and precomputed
node-level quadrature data.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .basis import build_nodeset, koornwinder_eval, koornwinder_eval_grad, npol


def _cross3(a, b):
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


@dataclass(frozen=True)
class FramePoint:
    """Pointwise surface frame: position, chart derivatives, orthonormal triad."""

    x: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    jacobian: float
    uhat: np.ndarray
    vhat: np.ndarray
    nhat: np.ndarray


class SphereChart:
    """Exact chart: affine triangle in the embedding space, radially projected."""

    def __init__(self, a, b, c, center=(0.0, 0.0, 0.0), radius=1.0):
        self.a, self.b, self.c = (np.asarray(q, dtype=float) for q in (a, b, c))
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def _param(self, u, v):
        return (self.a[None, :] + np.outer(u, self.b - self.a)
                + np.outer(v, self.c - self.a))

    def positions(self, u, v):
        q = self._param(u, v)
        nq = np.linalg.norm(q, axis=1, keepdims=True)
        return self.center + self.radius * q / nq

    def derivs(self, u, v):
        q = self._param(u, v)
        nq = np.linalg.norm(q, axis=1, keepdims=True)
        xh = q / nq
        x = self.center + self.radius * xh

        def proj(e):
            return self.radius * (e[None, :] - xh * (xh @ e)[:, None]) / nq

        return x, proj(self.b - self.a), proj(self.c - self.a)

    def restrict(self, a, b, c):
        pts = self._param(np.array([a[0], b[0], c[0]]),
                          np.array([a[1], b[1], c[1]]))
        return SphereChart(pts[0], pts[1], pts[2], self.center, self.radius)


class TorusChart:
    """Exact chart: affine triangle in the (theta, phi) angle plane."""

    def __init__(self, r_major, r_minor, va, vb, vc):
        self.r_major, self.r_minor = float(r_major), float(r_minor)
        self.va, self.vb, self.vc = (np.asarray(q, dtype=float)
                                     for q in (va, vb, vc))

    def _param(self, u, v):
        return (self.va[None, :] + np.outer(u, self.vb - self.va)
                + np.outer(v, self.vc - self.va))

    def _point(self, th, ph):
        w = self.r_major + self.r_minor * np.cos(ph)
        return np.stack([w * np.cos(th), w * np.sin(th),
                         self.r_minor * np.sin(ph)], axis=-1)

    def positions(self, u, v):
        tp = self._param(u, v)
        return self._point(tp[:, 0], tp[:, 1])

    def derivs(self, u, v):
        tp = self._param(u, v)
        th, ph = tp[:, 0], tp[:, 1]
        w = self.r_major + self.r_minor * np.cos(ph)
        z = np.zeros_like(th)
        d_th = np.stack([-w * np.sin(th), w * np.cos(th), z], axis=-1)
        d_ph = self.r_minor * np.stack([-np.sin(ph) * np.cos(th),
                                        -np.sin(ph) * np.sin(th),
                                        np.cos(ph)], axis=-1)
        e1, e2 = self.vb - self.va, self.vc - self.va
        x = self._point(th, ph)
        return (x, d_th * e1[0] + d_ph * e1[1], d_th * e2[0] + d_ph * e2[1])

    def restrict(self, a, b, c):
        tp = self._param(np.array([a[0], b[0], c[0]]),
                         np.array([a[1], b[1], c[1]]))
        return TorusChart(self.r_major, self.r_minor, tp[0], tp[1], tp[2])


class Patch:
    """One curved triangular chart, x_j : T -> R^3.

    When an exact chart is attached, positions and frames come from it; the
    Koornwinder coefficients are a degree-`order` fit kept for file output.
    """

    def __init__(self, order, geom_coefs, component=1, chart=None):
        geom_coefs = np.asarray(geom_coefs, dtype=float)
        if geom_coefs.shape != (npol(order), 3):
            raise ValueError(
                f"geometry coefficient array has shape {geom_coefs.shape}, "
                f"expected ({npol(order)}, 3)")
        if not np.all(np.isfinite(geom_coefs)):
            raise ValueError("non-finite geometry coefficients")
        self.order = order
        self.geom_coefs = geom_coefs
        self.component = component
        self.chart = chart
        self._bounds = None

    def positions(self, u, v):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if self.chart is not None:
            return self.chart.positions(u, v)
        vals = koornwinder_eval(self.order, u, v)
        return vals @ self.geom_coefs

    def frames(self, u, v):
        """Vectorized frame data at points (u, v).

        Returns dict with x, du, dv, jac, uhat, vhat, nhat arrays.
        """
        u = np.atleast_1d(np.asarray(u, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if self.chart is not None:
            return self._frames_from_xduv(*self.chart.derivs(u, v))
        return self._poly_frames(koornwinder_eval_grad(self.order, u, v))

    def frames_from_tables(self, tables, uv=None):
        """frames() from precomputed basis tables (vals, d/du, d/dv).

        The tables depend only on the evaluation points, so quadrature caches
        them and reuses them across every patch of the mesh.  Exact-chart
        patches ignore the tables and need the points themselves in uv.
        """
        if self.chart is not None:
            if uv is None:
                raise ValueError("exact-chart patch needs uv points")
            return self._frames_from_xduv(*self.chart.derivs(uv[:, 0], uv[:, 1]))
        return self._poly_frames(tables)

    def _poly_frames(self, tables):
        vals, dus, dvs = tables
        x = vals @ self.geom_coefs
        du = dus @ self.geom_coefs
        dv = dvs @ self.geom_coefs
        return self._frames_from_xduv(x, du, dv)

    def _frames_from_xduv(self, x, du, dv):
        nrm = _cross3(du, dv)
        jac = np.sqrt(np.einsum("ij,ij->i", nrm, nrm))
        if np.any(jac <= 0):
            raise ValueError("degenerate chart: vanishing Jacobian")
        nhat = nrm / jac[:, None]
        uhat = du / np.sqrt(np.einsum("ij,ij->i", du, du))[:, None]
        vhat = _cross3(nhat, uhat)
        return dict(x=x, du=du, dv=dv, jac=jac, uhat=uhat, vhat=vhat, nhat=nhat)

    def frame_at(self, u, v) -> FramePoint:
        f = self.frames(np.array([u]), np.array([v]))
        return FramePoint(x=f["x"][0], du=f["du"][0], dv=f["dv"][0],
                          jacobian=float(f["jac"][0]), uhat=f["uhat"][0],
                          vhat=f["vhat"][0], nhat=f["nhat"][0])

    def _bounding(self):
        if self._bounds is None:
            # dense parameter sample including corners and edges
            g = []
            m = 2 * self.order + 4
            for i in range(m + 1):
                for j in range(m + 1 - i):
                    g.append((i / m, j / m))
            g = np.array(g)
            pts = self.positions(g[:, 0], g[:, 1])
            centroid = pts.mean(axis=0)
            radius = float(np.linalg.norm(pts - centroid, axis=1).max())
            self._bounds = (centroid, radius)
        return self._bounds

    @property
    def centroid(self):
        return self._bounding()[0]

    @property
    def bounding_radius(self):
        return self._bounding()[1]


class NodeData:
    """Flattened per-node quadrature data for a mesh.

    Defaults to the interpolation node set; any other parameter-space rule
    (points, weights) may be supplied instead.
    """

    def __init__(self, mesh, points=None, weights=None):
        if points is None:
            ns = build_nodeset(mesh.order)
            points, weights = ns.nodes, ns.weights
        p = len(points)
        n = len(mesh.patches) * p
        self.x = np.empty((n, 3))
        self.nhat = np.empty((n, 3))
        self.uhat = np.empty((n, 3))
        self.vhat = np.empty((n, 3))
        self.jac = np.empty(n)
        self.wjac = np.empty(n)
        self.patch_of = np.repeat(np.arange(len(mesh.patches)), p)
        for j, patch in enumerate(mesh.patches):
            f = patch.frames(points[:, 0], points[:, 1])
            sl = slice(j * p, (j + 1) * p)
            self.x[sl] = f["x"]
            self.nhat[sl] = f["nhat"]
            self.uhat[sl] = f["uhat"]
            self.vhat[sl] = f["vhat"]
            self.jac[sl] = f["jac"]
            self.wjac[sl] = weights * f["jac"]
        self.n = n


class Mesh:
    """Atlas of patches with component bookkeeping.  Immutable after build."""

    def __init__(self, patches, check_orientation=True):
        if not patches:
            raise ValueError("empty patch list")
        orders = {p.order for p in patches}
        if len(orders) != 1:
            raise ValueError("mixed-order meshes are not supported")
        self.patches = list(patches)
        self.order = patches[0].order
        self.components = np.array([p.component for p in patches], dtype=int)
        self._nodes = None
        if check_orientation:
            for c in np.unique(self.components):
                if self.signed_volume(c) <= 0:
                    raise ValueError(
                        f"component {c} is not outward oriented "
                        f"(signed volume <= 0)")

    @property
    def nodeset(self):
        return build_nodeset(self.order)

    @property
    def nodes(self) -> NodeData:
        if self._nodes is None:
            self._nodes = NodeData(self)
        return self._nodes

    @property
    def n_patches(self):
        return len(self.patches)

    @property
    def n_nodes(self):
        return self.n_patches * self.nodeset.p

    def component_node_mask(self, comp):
        return np.repeat(self.components == comp, self.nodeset.p)

    def area(self):
        return float(self.nodes.wjac.sum())

    def signed_volume(self, component=None):
        nd = self.nodes
        term = self.nodes.wjac * np.einsum("ij,ij->i", nd.x, nd.nhat) / 3.0
        if component is None:
            return float(term.sum())
        return float(term[self.component_node_mask(component)].sum())

    def content_hash(self):
        buf = io.StringIO()
        save_mesh(self, buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()[:16]


_LATTICE_CACHE = {}


def _geom_lattice(order):
    """Uniform degree-`order` lattice on T and its inverse Vandermonde.

    Geometry is fit at these nodes rather than the quadrature node set:
    the lattice contains order+1 points per edge, so neighboring charts that
    sample the same physical edge agree exactly there and the fitted surface
    is globally continuous.  Without that continuity, patch-boundary terms in
    the area functional cancel only partially and the area converges one
    order too slowly.
    """
    if order not in _LATTICE_CACHE:
        pts = np.array([(i / order, j / order)
                        for i in range(order + 1)
                        for j in range(order + 1 - i)], dtype=float)
        V = koornwinder_eval(order, pts[:, 0], pts[:, 1])
        _LATTICE_CACHE[order] = (pts, np.linalg.inv(V))
    return _LATTICE_CACHE[order]


def _fit_patch(order, chart, component=1):
    """Fit Koornwinder geometry coefficients by interpolation at reference nodes."""
    pts2d, V_inv = _geom_lattice(order)
    pts = chart.positions(pts2d[:, 0], pts2d[:, 1])
    return Patch(order, V_inv @ pts, component=component, chart=chart)


def _subdivide_flat(tris, levels):
    for _ in range(levels):
        out = []
        for a, b, c in tris:
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        tris = out
    return tris


def unit_sphere_mesh(n_patches, n_order):
    """Unit sphere from a radially projected cube triangulation.

    n_patches must be 12 * 4^m; geometry coefficients are fit per patch by
    interpolation of the projected chart at the reference nodes.
    """
    m = 0
    n = n_patches
    while n > 12 and n % 4 == 0:
        n //= 4
        m += 1
    if n != 12:
        raise ValueError(f"n_patches must be of the form 12*4^m, got {n_patches}")

    corners = {}
    tris = []
    # 6 cube faces, each split along the diagonal into 2 triangles
    for axis in range(3):
        for sgn in (-1.0, 1.0):
            e1, e2 = (axis + 1) % 3, (axis + 2) % 3
            def pt(s1, s2):
                q = np.zeros(3)
                q[axis] = sgn
                q[e1] = s1
                q[e2] = s2
                return q
            quad = [pt(-1, -1), pt(1, -1), pt(1, 1), pt(-1, 1)]
            tris += [(quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])]
    tris = [tuple(np.asarray(v, dtype=float) for v in t) for t in tris]
    tris = _subdivide_flat(tris, m)

    patches = []
    for a, b, c in tris:
        if np.dot(np.cross(b - a, c - a), a + b + c) < 0:
            b, c = c, b
        patches.append(_fit_patch(n_order, SphereChart(a, b, c)))
    return Mesh(patches)


def torus_mesh(r_major, r_minor, n_u, n_v, n_order):
    """Standard torus (ring radius r_major, tube radius r_minor), 2*n_u*n_v patches."""
    if not (r_major > r_minor > 0):
        raise ValueError("degenerate radii: need r_major > r_minor > 0")

    patches = []
    dth = 2 * np.pi / n_u
    dph = 2 * np.pi / n_v
    for i in range(n_u):
        for j in range(n_v):
            t0, p0 = i * dth, j * dph
            # two positively oriented parameter triangles per cell
            for verts in (((t0, p0), (t0 + dth, p0), (t0 + dth, p0 + dph)),
                          ((t0, p0), (t0 + dth, p0 + dph), (t0, p0 + dph))):
                va, vb, vc = (np.array(v) for v in verts)
                patches.append(_fit_patch(
                    n_order, TorusChart(r_major, r_minor, va, vb, vc)))
    return Mesh(patches)


def refine(mesh, flags):
    """Replace flagged patches by 4 children via parameter-space quadrisection."""
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (mesh.n_patches,):
        raise ValueError("flags length must equal the patch count")
    child_tris = [((0.0, 0.0), (0.5, 0.0), (0.0, 0.5)),
                  ((0.5, 0.0), (1.0, 0.0), (0.5, 0.5)),
                  ((0.0, 0.5), (0.5, 0.5), (0.0, 1.0)),
                  ((0.5, 0.5), (0.0, 0.5), (0.5, 0.0))]
    ns = build_nodeset(mesh.order)
    out = []
    for patch, f in zip(mesh.patches, flags):
        if not f:
            out.append(patch)
            continue
        for a, b, c in child_tris:
            a, b, c = np.array(a), np.array(b), np.array(c)
            if patch.chart is not None:
                out.append(_fit_patch(mesh.order, patch.chart.restrict(a, b, c),
                                      component=patch.component))
                continue
            uv = (a[None, :]
                  + np.outer(ns.nodes[:, 0], b - a)
                  + np.outer(ns.nodes[:, 1], c - a))
            pts = patch.positions(uv[:, 0], uv[:, 1])
            out.append(Patch(mesh.order, ns.V_inv @ pts, component=patch.component))
    return Mesh(out)


def refine_all(mesh):
    return refine(mesh, np.ones(mesh.n_patches, dtype=bool))


def save_mesh(mesh, path_or_file):
    """Write the HOT ASCII format (17 significant digits)."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w") if own else path_or_file
    try:
        f.write(f"HOT 1 {mesh.n_patches}\n")
        for idx, patch in enumerate(mesh.patches):
            f.write(f"patch {idx} {patch.order} {patch.component}\n")
            for row in patch.geom_coefs:
                f.write(" ".join(f"{x:.17g}" for x in row) + "\n")
    finally:
        if own:
            f.close()


class MeshFormatError(ValueError):
    pass


def load_mesh(path_or_file):
    """Parse the HOT format; rejects malformed files and inward orientation."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file) if own else path_or_file
    try:
        lines = f.read().splitlines()
    finally:
        if own:
            f.close()

    def fail(lineno, msg):
        raise MeshFormatError(f"line {lineno + 1}: {msg}")

    if not lines:
        raise MeshFormatError("line 1: empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "HOT" or head[1] != "1":
        fail(0, f"bad header {lines[0]!r}, expected 'HOT 1 <N_patches>'")
    try:
        n_patches = int(head[2])
    except ValueError:
        fail(0, "patch count is not an integer")

    patches = []
    ln = 1
    for ip in range(n_patches):
        if ln >= len(lines):
            fail(len(lines) - 1, f"truncated file: expected patch {ip}")
        hdr = lines[ln].split()
        if len(hdr) != 4 or hdr[0] != "patch":
            fail(ln, f"expected 'patch <index> <n_order> <component>', got {lines[ln]!r}")
        try:
            order, component = int(hdr[2]), int(hdr[3])
        except ValueError:
            fail(ln, "non-integer patch header fields")
        p = npol(order)
        ln += 1
        rows = []
        for r in range(p):
            if ln >= len(lines):
                fail(len(lines) - 1, f"truncated file: patch {ip} needs {p} "
                     f"coefficient rows, found {r}")
            parts = lines[ln].split()
            if len(parts) != 3:
                if parts and parts[0] == "patch":
                    fail(ln, f"coefficient count mismatch: patch {ip} of order "
                         f"{order} needs {p} rows, found {r}")
                fail(ln, f"expected 3 reals, got {lines[ln]!r}")
            try:
                vals = [float(x) for x in parts]
            except ValueError:
                fail(ln, f"unparseable real in {lines[ln]!r}")
            if not all(np.isfinite(vals)):
                fail(ln, "non-finite coefficient")
            rows.append(vals)
            ln += 1
        patches.append(Patch(order, np.array(rows), component=component))
    if ln < len(lines) and any(s.strip() for s in lines[ln:]):
        if lines[ln].split() and lines[ln].split()[0] == "patch":
            fail(ln, f"more patches than declared ({n_patches})")
        fail(ln, "trailing garbage after last patch")
    try:
        return Mesh(patches)
    except ValueError as e:
        raise MeshFormatError(str(e))
