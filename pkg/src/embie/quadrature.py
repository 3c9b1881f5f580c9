"""Surface-operator quadrature: far smooth rule, adaptive near rule, polar self rule.

Every operator row acts on per-node density samples.  A kernel of kind with
block shape (A, B) assembles into an (A*Nt, B*Ns) matrix in component-major
layout: row index a*Nt + t, column index b*Ns + s.

The self rule integrates in parameter-space polar coordinates about the
target node: an inner disk with an even, uniform angular grid (so that odd
principal-value kernels cancel between theta and theta+pi exactly) and a
three-arc outer annulus bounded by the triangle edges.  Plain subtriangle
Duffy rules fail for the odd 1/r^2 kernels (div S, n x grad S) because the
subtriangles are not centrally symmetric about the target.

All routines accept a list of kernel specs and share pair geometry, surface
frames, and the adaptive subdivision tree across kinds and wavenumbers; the
single-spec entry points are thin wrappers.
"""

from __future__ import annotations

import weakref
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .basis import build_nodeset, koornwinder_eval, koornwinder_eval_grad, tri_gauss
from .geometry import NodeData
from .layerpot import KERNEL_KINDS, KernelPack, KernelSpec, PairGeometry, kind_shape


class QuadratureError(RuntimeError):
    pass


class InteractionPlan:
    """Per source patch: which target rows are 'self' and which are 'near'."""

    def __init__(self, eta, self_targets, near_targets):
        self.eta = eta
        self.self_targets = self_targets    # list per patch: node index arrays
        self.near_targets = near_targets


def classify(mesh, targets=None, eta=2.5):
    """Partition (target, source patch) pairs into self/near/far.

    targets=None means the mesh's own nodes; then 'self' rows are the nodes
    of the source patch itself.  Off-surface targets never classify as self.
    """
    nd = mesh.nodes
    X = nd.x if targets is None else np.atleast_2d(targets)
    centroids = np.array([p.centroid for p in mesh.patches])
    radii = np.array([p.bounding_radius for p in mesh.patches])
    dist = cdist(X, centroids)
    near_mask = dist <= eta * radii[None, :]
    p = mesh.nodeset.p
    self_targets, near_targets = [], []
    for j in range(mesh.n_patches):
        tidx = np.nonzero(near_mask[:, j])[0]
        if targets is None:
            own = np.arange(j * p, (j + 1) * p)
            self_targets.append(own)
            tidx = tidx[(tidx < j * p) | (tidx >= (j + 1) * p)]
        else:
            self_targets.append(np.empty(0, dtype=int))
        near_targets.append(tidx)
    return InteractionPlan(eta, self_targets, near_targets)


def _tf_slice(tf, idx):
    out = {key: tf[key][idx] for key in ("x", "nhat", "uhat", "vhat")}
    if "_tv" in tf:
        out["_tv"] = tf["_tv"][idx]
    return out


def _surface_tf(mesh):
    nd = mesh.nodes
    return dict(x=nd.x, nhat=nd.nhat, uhat=nd.uhat, vhat=nd.vhat)


def _offsurface_tf(targets):
    z = np.zeros_like(targets)
    return dict(x=targets, nhat=z, uhat=z, vhat=z)


def _multi_blocks(specs, X, tf, sf):
    """Evaluate all specs on shared pair geometry; returns list of [A][B] blocks."""
    from . import fastkernels
    if all(s.kind in fastkernels.FAST_KINDS for s in specs):
        # compiled path; one call per distinct wavenumber
        out = [None] * len(specs)
        by_k = {}
        for i, s in enumerate(specs):
            by_k.setdefault(float(s.k), []).append(i)
        for k, idx in by_k.items():
            res = fastkernels.multi_blocks_fast([specs[i] for i in idx],
                                                X, tf, sf)
            for i, blocks in zip(idx, res):
                out[i] = blocks
        return out
    geo = PairGeometry(X, sf["x"])
    packs = {}
    need_static = any(s.kind == "Dprime_diff" for s in specs)
    for s in specs:
        if s.k not in packs:
            packs[s.k] = KernelPack(s.k, geo=geo)
    if need_static and 0.0 not in packs:
        packs[0.0] = KernelPack(0.0, geo=geo)
    out = []
    for s in specs:
        pk = packs[s.k]
        if s.kind == "Dprime_diff":
            pk.static_pack = packs[0.0]
        out.append(KERNEL_KINDS[s.kind][2](pk, tf, sf))
    return out


# --- oversampled smooth (far) rule -----------------------------------------
#
# The interpolatory node weights integrate only degree-`order` polynomials
# exactly, which caps the smooth-rule tail error at O(h^order).  All far
# evaluations therefore interpolate densities from the p nodes to a finer
# Gauss rule (exact to degree 2*order+2), restoring a better-than-order+1
# tail while keeping the operator acting on node samples.

_FINE_NODE_CACHE = weakref.WeakKeyDictionary()


@lru_cache(maxsize=32)
def _fine_rule(order):
    return tri_gauss(order + 2)


@lru_cache(maxsize=32)
def _upsample_matrix(order):
    """Interpolation from the p reference nodes to the fine-rule points."""
    pts, _ = _fine_rule(order)
    ns = build_nodeset(order)
    return koornwinder_eval(order, pts[:, 0], pts[:, 1]) @ ns.V_inv


def _fine_nodes(mesh) -> NodeData:
    if mesh not in _FINE_NODE_CACHE:
        pts, w = _fine_rule(mesh.order)
        _FINE_NODE_CACHE[mesh] = NodeData(mesh, points=pts, weights=w)
    return _FINE_NODE_CACHE[mesh]


def far_block(spec, mesh, patch_index, tf):
    """Smooth-rule rows of one source patch for all targets in tf."""
    return _far_block_multi([spec], mesh, patch_index, tf)[0]


def _far_block_multi(specs, mesh, patch_index, tf):
    fn = _fine_nodes(mesh)
    U = _upsample_matrix(mesh.order)
    nf = U.shape[0]
    sl = slice(patch_index * nf, (patch_index + 1) * nf)
    sf = dict(x=fn.x[sl], nhat=fn.nhat[sl], uhat=fn.uhat[sl], vhat=fn.vhat[sl])
    all_blocks = _multi_blocks(specs, tf["x"], tf, sf)
    wU = fn.wjac[sl, None] * U
    out = []
    for s, blocks in zip(specs, all_blocks):
        A, B = kind_shape(s.kind)
        out.append(np.array([[blocks[a][b] @ wU for b in range(B)]
                             for a in range(A)]))
    return out


@lru_cache(maxsize=32)
def _leaf_rule(order):
    # stronger-than-node rule per leaf: fewer subdivision levels needed
    return tri_gauss(order + 3)


@lru_cache(maxsize=16384)
def _leaf_data(order, corner_key):
    """Cached per-subtriangle leaf data: node-interp matrix, basis tables, det.

    Subdivision corners are dyadic rationals, so the same subtriangles recur
    across every patch of the mesh and across meshes of the same order.
    """
    from .basis import build_nodeset
    a, b, c = (np.array(corner_key[0]), np.array(corner_key[1]),
               np.array(corner_key[2]))
    uv_r, w_r = _leaf_rule(order)
    uv = a[None, :] + np.outer(uv_r[:, 0], b - a) + np.outer(uv_r[:, 1], c - a)
    det = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    tables = koornwinder_eval_grad(order, uv[:, 0], uv[:, 1])
    E = tables[0] @ build_nodeset(order).V_inv
    return uv, w_r, det, tables, E


def _leaf_rows_multi(specs, patch, tf, corners):
    """Smooth rule on one parameter subtriangle for every spec.

    Returns list of (A, B, nt, p) row contributions acting on parent nodes.
    """
    corner_key = tuple(tuple(x) for x in corners)
    uv, w_r, det, tables, E = _leaf_data(patch.order, corner_key)
    f = patch.frames_from_tables(tables, uv)
    sf = dict(x=f["x"], nhat=f["nhat"], uhat=f["uhat"], vhat=f["vhat"])
    all_blocks = _multi_blocks(specs, tf["x"], tf, sf)
    w = w_r * f["jac"] * det
    out = []
    for s, blocks in zip(specs, all_blocks):
        A, B = kind_shape(s.kind)
        out.append(np.array([[(blocks[a_][b_] * w[None, :]) @ E
                              for b_ in range(B)] for a_ in range(A)]))
    return out


def _quadrisect(corners):
    a, b, c = corners
    ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
    return [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]


@lru_cache(maxsize=8192)
def _leaf4_data(order, corner_key):
    """Cached joint leaf data for the 4 quadrisection children of a subtriangle."""
    from .basis import build_nodeset
    corners = tuple(np.array(q) for q in corner_key)
    uv_r, w_r = _leaf_rule(order)
    nq = len(w_r)
    uvs, ws = [], []
    for a, b, c in _quadrisect(corners):
        uvs.append(a[None, :] + np.outer(uv_r[:, 0], b - a)
                   + np.outer(uv_r[:, 1], c - a))
        det = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        ws.append(w_r * det)
    uv = np.vstack(uvs)
    w = np.concatenate(ws)
    tables = koornwinder_eval_grad(order, uv[:, 0], uv[:, 1])
    # complex copy: avoids re-promoting inside every child matmul
    E4 = (tables[0] @ build_nodeset(order).V_inv).reshape(4, nq, -1) \
        .astype(complex)
    return uv, w, tables, E4


def _child_rows_multi(specs, patch, tf, corners):
    """Rows of all 4 children of one subtriangle in a single kernel pass.

    Returns a list of (A, B, nt, 4, p) arrays, one per spec.
    """
    corner_key = tuple(tuple(x) for x in corners)
    uv, w, tables, E4 = _leaf4_data(patch.order, corner_key)
    nq = E4.shape[1]
    f = patch.frames_from_tables(tables, uv)
    sf = dict(x=f["x"], nhat=f["nhat"], uhat=f["uhat"], vhat=f["vhat"])
    nt = len(tf["x"])
    ww = w * f["jac"]
    from . import fastkernels
    if fastkernels.fast_path_ok(specs):
        flat, slices = fastkernels.materialize_flat(specs, tf["x"], tf, sf,
                                                    tv=tf.get("_tv"))
        nc = flat.shape[0]
        tmp = (flat * ww[None, None, :]).reshape(nc, nt, 4, nq)
        # one batched matmul over all components and child cells
        res = np.matmul(tmp.transpose(2, 0, 1, 3).reshape(4, nc * nt, nq),
                        E4).reshape(4, nc, nt, -1).transpose(1, 2, 0, 3)
        return [res[start:start + ncomp].reshape(A, B, nt, 4, -1)
                for (start, ncomp, A, B) in slices]
    all_blocks = _multi_blocks(specs, tf["x"], tf, sf)
    out = []
    for s, blocks in zip(specs, all_blocks):
        A, B = kind_shape(s.kind)
        arr = np.empty((A, B, nt, 4, E4.shape[2]), dtype=complex)
        for a_ in range(A):
            for b_ in range(B):
                tmp = (blocks[a_][b_] * ww[None, :]).reshape(nt, 4, nq)
                arr[a_, b_] = np.einsum("tcq,cqp->tcp", tmp, E4)
        out.append(arr)
    return out


def near_block(spec, mesh, patch_index, tf, eps_quad, max_depth=12):
    return near_block_multi([spec], mesh, patch_index, tf, eps_quad, max_depth)[0]


def near_block_multi(specs, mesh, patch_index, tf, eps_quad, max_depth=12):
    """Adaptive quadrisection rows for all targets in tf.

    A leaf is accepted per target when, for every spec, the refined estimate
    changes by less than eps_quad; unresolved targets recurse on the children.
    Returns a list of (A, B, nt, p) arrays, one per spec.
    """
    patch = mesh.patches[patch_index]
    ns = mesh.nodeset
    nt = len(tf["x"])
    p = ns.p
    if "_tv" not in tf:
        from . import fastkernels
        tf = dict(tf, _tv=fastkernels.frame_vectors(tf, "target"))
    rows = [np.zeros((*kind_shape(s.kind), nt, p), dtype=complex) for s in specs]

    root = (np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))

    def recurse(corners, tidx, parents, prev_err, depth):
        if depth > max_depth:
            raise QuadratureError(
                f"near quadrature: max depth {max_depth} exceeded on patch "
                f"{patch_index} for {len(tidx)} target(s)")
        children = _quadrisect(corners)
        tfi = _tf_slice(tf, tidx)
        child_rows = _child_rows_multi(specs, patch, tfi, corners)
        tots = [cr.sum(axis=3) for cr in child_rows]
        err = np.zeros(len(tidx))
        for tot, par in zip(tots, parents):
            err = np.maximum(err, np.abs(tot - par).max(axis=(0, 1, 3)))
        # same two-level geometric estimate as the self rule, per target
        done = (err <= eps_quad) | ((err <= 30.0 * eps_quad)
                                    & (err <= 0.15 * prev_err)
                                    & (err * (err / prev_err) <= eps_quad))
        if np.any(done):
            for i in range(len(specs)):
                rows[i][:, :, tidx[done], :] += tots[i][:, :, done, :]
        todo = ~done
        if np.any(todo):
            sub = tidx[todo]
            for ci, ch in enumerate(children):
                recurse(ch, sub,
                        [child_rows[i][:, :, todo, ci, :]
                         for i in range(len(specs))], err[todo], depth + 1)

    parents0 = _leaf_rows_multi(specs, patch, tf, root)
    recurse(root, np.arange(nt), parents0, np.full(nt, np.inf), 0)
    return rows


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def _polar_points(u0, v0, m_theta, n_rad, n_arc):
    """Polar sampling of T about interior point (u0, v0).

    Inner disk of radius r0 (distance to nearest edge) with a uniform even
    angular grid; outer region split at the corner directions into 3 arcs,
    tan-substituted in angle (uniform along the opposing edge, with geometric
    breakpoints for long ranges) and logarithmically graded in radius.
    Returns (uv points, weights including the polar rho factor).
    """
    # edges: v=0, u=0, u+v=1; inward distances from (u0, v0)
    r0 = min(v0, u0, (1.0 - u0 - v0) / np.sqrt(2.0)) * 0.95
    xr, wr = _gauss01(n_rad)
    pts, wts = [], []

    th = 2 * np.pi * np.arange(m_theta) / m_theta
    dth = 2 * np.pi / m_theta
    R, Th = np.meshgrid(r0 * xr, th, indexing="ij")
    W = np.outer(r0 * wr, np.full(m_theta, dth)) * R
    pts.append(np.column_stack([(u0 + R * np.cos(Th)).ravel(),
                                (v0 + R * np.sin(Th)).ravel()]))
    wts.append(W.ravel())

    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    ang = np.arctan2(corners[:, 1] - v0, corners[:, 0] - u0)
    order = np.argsort(ang)
    ang = ang[order]
    # edge opposite each arc: between corner i and corner i+1; line n.x = d
    edge_normals = {(0, 1): (np.array([0.0, 1.0]), 0.0),
                    (1, 2): (np.array([1.0, 1.0]) / np.sqrt(2), 1.0 / np.sqrt(2)),
                    (2, 0): (np.array([1.0, 0.0]), 0.0)}
    xg, wg = _gauss01(n_arc)
    x0 = np.array([u0, v0])
    for i in range(3):
        c0, c1 = order[i], order[(i + 1) % 3]
        t0, t1 = ang[i], ang[i] + (ang[(i + 1) % 3] - ang[i]) % (2 * np.pi)
        nvec, d = edge_normals[(c0, c1)] if (c0, c1) in edge_normals \
            else edge_normals[(c1, c0)]
        s = np.sign(d - nvec @ x0)
        h_e = abs(d - nvec @ x0)
        theta_e = np.arctan2(s * nvec[1], s * nvec[0])

        def wrap(aa):
            return (aa - theta_e + np.pi) % (2 * np.pi) - np.pi

        ta, tb = np.tan(wrap(t0)), np.tan(wrap(t1))
        # geometric breakpoints keep the 1/(1+t^2) factor well resolved on
        # long t-ranges (target near a corner)
        bps = [ta, tb]
        for mag in [0.0] + [2.0**j for j in range(0, 12)]:
            for cand in (-mag, mag):
                if ta < cand < tb:
                    bps.append(cand)
        bps = np.unique(bps)
        tt = np.concatenate([lo + (hi - lo) * xg
                             for lo, hi in zip(bps[:-1], bps[1:])])
        w_t = np.concatenate([(hi - lo) * wg
                              for lo, hi in zip(bps[:-1], bps[1:])])
        theta = theta_e + np.arctan(tt)
        w_theta = w_t / (1 + tt**2)
        rho_max = h_e * np.sqrt(1 + tt**2)
        dirs = np.column_stack([np.cos(theta), np.sin(theta)])
        for jt in range(len(tt)):
            rmax = rho_max[jt]
            if rmax <= r0:
                continue
            # logarithmic radial grading handles the wide [r0, rho_max] range
            L = np.log(rmax / r0)
            rr = r0 * np.exp(L * xr)
            ww = L * rr * wr * rr * w_theta[jt]
            pts.append(np.column_stack([u0 + rr * dirs[jt, 0],
                                        v0 + rr * dirs[jt, 1]]))
            wts.append(ww)
    return np.vstack(pts), np.concatenate(wts)


_SELF_LEVELS = [(8, 6, 4), (16, 12, 8), (32, 24, 16), (48, 36, 24),
                (64, 48, 32), (128, 96, 64)]


def _level_converged(resid, prev_resid, eps_quad):
    """Accept the finer of two consecutive resolution levels.

    The pairwise difference bounds the coarser level's error; when the
    per-level differences shrink geometrically the finer level's error is
    estimated by one more ratio step, which avoids an entire extra level
    when the raw difference only just misses the tolerance.  The ratio gate
    and absolute cap keep the extrapolation out of the pre-asymptotic and
    stalled-convergence regimes.
    """
    if resid <= eps_quad:
        return True
    return (resid <= 30.0 * eps_quad
            and resid <= 0.15 * prev_resid
            and resid * (resid / prev_resid) <= eps_quad)


@lru_cache(maxsize=4096)
def _polar_data(order, node_local, level):
    """Cached polar points, weights, and node-interpolation matrix.

    Reference nodes are shared by all patches of an order, so this depends
    only on (order, node index, resolution level).
    """
    from .basis import build_nodeset
    ns = build_nodeset(order)
    u0, v0 = ns.nodes[node_local]
    uv, w = _polar_points(u0, v0, *_SELF_LEVELS[level])
    tables = koornwinder_eval_grad(order, uv[:, 0], uv[:, 1])
    E = tables[0] @ ns.V_inv
    return uv, w, E, tables


def self_block(spec, mesh, patch_index, node_local, eps_quad):
    return self_block_multi([spec], mesh, patch_index, node_local, eps_quad)[0]


def self_block_multi(specs, mesh, patch_index, node_local, eps_quad):
    """Rows for target = node `node_local` of the same patch; one (A,B,p) per spec."""
    patch = mesh.patches[patch_index]
    ns = mesh.nodeset
    p_glob = patch_index * ns.p + node_local
    nd = mesh.nodes
    tf = {key: getattr(nd, attr)[p_glob:p_glob + 1]
          for key, attr in (("x", "x"), ("nhat", "nhat"),
                            ("uhat", "uhat"), ("vhat", "vhat"))}

    def attempt(level):
        uv, w, E, tables = _polar_data(mesh.order, node_local, level)
        f = patch.frames_from_tables(tables, uv)
        sf = dict(x=f["x"], nhat=f["nhat"], uhat=f["uhat"], vhat=f["vhat"])
        all_blocks = _multi_blocks(specs, tf["x"], tf, sf)
        ww = w * f["jac"]
        out = []
        for s, blocks in zip(specs, all_blocks):
            A, B = kind_shape(s.kind)
            out.append(np.array([[(blocks[a][b] * ww[None, :]) @ E
                                  for b in range(B)]
                                 for a in range(A)])[:, :, 0, :])
        return out

    prev = attempt(0)
    resid = np.inf
    prev_resid = np.inf
    for level in range(1, len(_SELF_LEVELS)):
        cur = attempt(level)
        resid = max(np.abs(c - pv).max() for c, pv in zip(cur, prev))
        if _level_converged(resid, prev_resid, eps_quad):
            return cur
        prev, prev_resid = cur, resid
    raise QuadratureError(
        f"self quadrature tolerance {eps_quad} not met on patch {patch_index} "
        f"node {node_local} (residual {resid:.3e})")


def _self_patch_group(specs, mesh, patch, patch_index, Xt, Tv, eps_quad):
    """Batched per-patch self rows for specs sharing one wavenumber.

    All still-unresolved nodes of the patch share a single chart evaluation
    and a single compiled kernel pass per refinement level.  Returns the
    (ncomp, p, p) component rows plus the per-spec slices.
    """
    from . import fastkernels
    order = mesh.order
    p = mesh.nodeset.p
    k = float(specs[0].k)
    codes, signs, slices = fastkernels._pack_cached(
        tuple(s.kind for s in specs))
    nc = len(codes)
    result = np.empty((nc, p, p), dtype=complex)
    active = list(range(p))
    prev = None
    resid = np.inf

    def evaluate(nodes, level):
        datas = [_polar_data(order, i, level) for i in nodes]
        bounds = np.zeros(len(nodes) + 1, dtype=np.int64)
        for m, (uv, _, _, _) in enumerate(datas):
            bounds[m + 1] = bounds[m] + len(uv)
        uv_cat = np.vstack([d[0] for d in datas])
        tables = tuple(np.vstack([d[3][c] for d in datas]) for c in range(3))
        f = patch.frames_from_tables(tables, uv_cat)
        Sv = fastkernels.frame_vectors(f, "source")
        out = np.zeros((nc, bounds[-1]), dtype=complex)
        fastkernels.materialize_rows(
            codes, signs, k, np.ascontiguousarray(Xt[nodes]),
            np.ascontiguousarray(Tv[nodes]),
            np.ascontiguousarray(f["x"]), Sv, bounds, out)
        wjac = np.concatenate([d[1] for d in datas]) * f["jac"]
        rows = {}
        for m, i in enumerate(nodes):
            sl = slice(bounds[m], bounds[m + 1])
            rows[i] = (out[:, sl] * wjac[None, sl]) @ datas[m][2]
        return rows

    prev = evaluate(active, 0)
    prev_resid = {i: np.inf for i in active}
    for level in range(1, len(_SELF_LEVELS)):
        cur = evaluate(active, level)
        still = []
        for i in active:
            resid = np.abs(cur[i] - prev[i]).max()
            if _level_converged(resid, prev_resid[i], eps_quad):
                result[:, i, :] = cur[i]
            else:
                still.append(i)
                prev_resid[i] = resid
        active = still
        if not active:
            return result, slices
        prev = {i: cur[i] for i in active}
    raise QuadratureError(
        f"self quadrature tolerance {eps_quad} not met on patch {patch_index} "
        f"nodes {active} (residual {resid:.3e})")


def self_blocks_patch(specs, mesh, patch_index, eps_quad):
    """Accurate self rows for every node of a patch; list of (A, B, p, p)."""
    from . import fastkernels
    p = mesh.nodeset.p
    if not all(s.kind in fastkernels.FAST_KINDS for s in specs):
        per_node = [self_block_multi(specs, mesh, patch_index, i, eps_quad)
                    for i in range(p)]
        return [np.stack([pn[i] for pn in per_node], axis=2)
                for i in range(len(specs))]
    patch = mesh.patches[patch_index]
    lo = patch_index * p
    nd = mesh.nodes
    tf = dict(x=nd.x[lo:lo + p], nhat=nd.nhat[lo:lo + p],
              uhat=nd.uhat[lo:lo + p], vhat=nd.vhat[lo:lo + p])
    Tv = fastkernels.frame_vectors(tf, "target")
    out = [None] * len(specs)
    by_k = {}
    for i, s in enumerate(specs):
        by_k.setdefault(float(s.k), []).append(i)
    for _, idx in by_k.items():
        rows, slices = _self_patch_group(
            [specs[i] for i in idx], mesh, patch, patch_index,
            np.asarray(tf["x"]), Tv, eps_quad)
        for (start, ncomp, A, B), i in zip(slices, idx):
            out[i] = rows[start:start + ncomp].reshape(A, B, p, p)
    return out


def far_matrix(spec, mesh, targets=None):
    return far_matrices([spec], mesh, targets)[0]


def far_matrices(specs, mesh, targets=None):
    """Dense oversampled smooth-rule matrices acting on node samples.

    Same-patch rows are meaningless on their own and are replaced through the
    self/near corrections.
    """
    fn = _fine_nodes(mesh)
    U = _upsample_matrix(mesh.order)
    nf, p = U.shape
    tf = _surface_tf(mesh) if targets is None \
        else _offsurface_tf(np.atleast_2d(targets))
    X = tf["x"]
    sf = dict(x=fn.x, nhat=fn.nhat, uhat=fn.uhat, vhat=fn.vhat)
    nt, nsrc = len(X), mesh.n_nodes
    shapes = [kind_shape(s.kind) for s in specs]
    out = [np.empty((A * nt, B * nsrc), dtype=complex) for A, B in shapes]
    chunk = max(1, int(4e7 / max(1, len(fn.x))))   # bound temporaries
    for lo in range(0, nt, chunk):
        hi = min(lo + chunk, nt)
        tfc = _tf_slice(tf, np.arange(lo, hi))
        all_blocks = _multi_blocks(specs, X[lo:hi], tfc, sf)
        for mat, (A, B), blocks in zip(out, shapes, all_blocks):
            for a in range(A):
                for b in range(B):
                    w = (blocks[a][b] * fn.wjac[None, :]).reshape(hi - lo, -1, nf)
                    mat[a * nt + lo:a * nt + hi, b * nsrc:(b + 1) * nsrc] = \
                        np.tensordot(w, U, axes=([2], [0])).reshape(hi - lo, nsrc)
    return out


def correction_matrix(spec, mesh, eps_quad, plan=None, targets=None):
    return correction_matrices([spec], mesh, eps_quad, plan, targets)[0]


def correction_matrices(specs, mesh, eps_quad, plan=None, targets=None):
    """Sparse corrections per spec: accurate near/self rows minus far-rule rows."""
    if plan is None:
        plan = classify(mesh, targets)
    if targets is None:
        tf_all = _surface_tf(mesh)
        nt = mesh.n_nodes
    else:
        targets = np.atleast_2d(targets)
        tf_all = _offsurface_tf(targets)
        nt = len(targets)
    p = mesh.nodeset.p
    nsrc = mesh.n_nodes
    shapes = [kind_shape(s.kind) for s in specs]
    trips = [([], [], []) for _ in specs]

    def add(tidx, patch_index, accurate):
        tfi = _tf_slice(tf_all, tidx)
        fars = _far_block_multi(specs, mesh, patch_index, tfi)
        cols = np.arange(patch_index * p, (patch_index + 1) * p)
        for i, ((A, B), far) in enumerate(zip(shapes, fars)):
            delta = accurate[i] - far
            ri, ci, vv = trips[i]
            for a in range(A):
                for b in range(B):
                    rr = (a * nt + tidx)[:, None].repeat(p, axis=1)
                    cc = (b * nsrc + cols)[None, :].repeat(len(tidx), axis=0)
                    ri.append(rr.ravel())
                    ci.append(cc.ravel())
                    vv.append(delta[a, b].ravel())

    for j in range(mesh.n_patches):
        near = plan.near_targets[j]
        if len(near):
            tfi = _tf_slice(tf_all, near)
            acc = near_block_multi(specs, mesh, j, tfi, eps_quad)
            add(near, j, acc)
        own = plan.self_targets[j]
        if len(own):
            add(own, j, self_blocks_patch(specs, mesh, j, eps_quad))

    out = []
    for (ri, ci, vv), (A, B) in zip(trips, shapes):
        if ri:
            data = (np.concatenate(vv), (np.concatenate(ri), np.concatenate(ci)))
            out.append(sparse.coo_matrix(data, shape=(A * nt, B * nsrc)).tocsr())
        else:
            out.append(sparse.csr_matrix((A * nt, B * nsrc), dtype=complex))
    return out


class CorrectedOperator:
    """Layer-potential operator with near/self corrections applied.

    dense mode stores the full matrix; matrix-free mode stores only the
    sparse corrections and regenerates far contributions per application.
    """

    def __init__(self, spec, mesh, eps_quad, mode="dense", plan=None,
                 targets=None, _corr=None):
        if mode not in ("dense", "matrix-free"):
            raise ValueError(f"unknown mode {mode!r}")
        self.spec = spec
        self.mesh = mesh
        self.eps_quad = eps_quad
        self.mode = mode
        self.targets = targets
        A, B = kind_shape(spec.kind)
        nt = mesh.n_nodes if targets is None else len(np.atleast_2d(targets))
        self.shape = (A * nt, B * mesh.n_nodes)
        corr = correction_matrix(spec, mesh, eps_quad, plan, targets) \
            if _corr is None else _corr
        self.corrections = corr
        self.matrix = None
        if mode == "dense":
            self.matrix = far_matrix(spec, mesh, targets) + corr.toarray()

    def apply(self, x):
        x = np.asarray(x, dtype=complex)
        if self.mode == "dense":
            return self.matrix @ x
        return self._apply_far(x) + self.corrections @ x

    def _apply_far(self, x, chunk=600):
        fn = _fine_nodes(self.mesh)
        U = _upsample_matrix(self.mesh.order)
        nf, p = U.shape
        tf_all = _surface_tf(self.mesh) if self.targets is None \
            else _offsurface_tf(np.atleast_2d(self.targets))
        A, B = kind_shape(self.spec.kind)
        nt = self.shape[0] // A
        nsrc = self.mesh.n_nodes
        # upsample node samples to the fine rule, then weight
        xw = np.stack([(x[b * nsrc:(b + 1) * nsrc].reshape(-1, p) @ U.T).ravel()
                       * fn.wjac for b in range(B)])
        out = np.empty(self.shape[0], dtype=complex)
        sf = dict(x=fn.x, nhat=fn.nhat, uhat=fn.uhat, vhat=fn.vhat)
        for lo in range(0, nt, chunk):
            hi = min(lo + chunk, nt)
            idx = np.arange(lo, hi)
            blocks = _multi_blocks([self.spec], tf_all["x"][idx],
                                   _tf_slice(tf_all, idx), sf)[0]
            for a in range(A):
                acc = blocks[a][0] @ xw[0]
                for b in range(1, B):
                    acc += blocks[a][b] @ xw[b]
                out[a * nt + lo:a * nt + hi] = acc
        return out

    def __matmul__(self, x):
        return self.apply(x)


def far_apply_many(mesh, specs, vectors, chunk=None):
    """Smooth-rule application of several kernels in one pass.

    vectors[i] is the stacked node-sample input for specs[i]; the distance /
    Green's-function arrays are computed once per target chunk and shared by
    all specs, which is what makes multi-kernel matrix-free systems viable.
    Returns one output array per spec (far part only, no corrections)."""
    fn = _fine_nodes(mesh)
    U = _upsample_matrix(mesh.order)
    nf, p = U.shape
    tf_all = _surface_tf(mesh)
    nt = nsrc = mesh.n_nodes
    sf = dict(x=fn.x, nhat=fn.nhat, uhat=fn.uhat, vhat=fn.vhat)
    shapes = [kind_shape(s.kind) for s in specs]
    if chunk is None:
        # bound the per-chunk block temporaries to ~300 MB
        blocks_per_target = sum(A * B for A, B in shapes) * len(fn.x)
        chunk = max(32, int(2e7 // max(1, blocks_per_target)))
    xws = []
    for (A, B), x in zip(shapes, vectors):
        x = np.asarray(x, dtype=complex)
        xws.append(np.stack(
            [(x[b * nsrc:(b + 1) * nsrc].reshape(-1, p) @ U.T).ravel()
             * fn.wjac for b in range(B)]))
    from . import fastkernels
    if fastkernels.fast_path_ok(specs):
        # fused compiled pass: no pair blocks are materialized at all
        apply_fn = fastkernels.fused_accumulator(
            tuple(s.kind for s in specs), tuple(B for A, B in shapes))
        xw_all = np.ascontiguousarray(np.vstack(xws))
        Sv = fastkernels.frame_vectors(sf, "source")
        Tv = fastkernels.frame_vectors(tf_all, "target")
        nA = sum(A for A, B in shapes)
        out_all = np.zeros((nA, nt), dtype=complex)
        apply_fn(float(specs[0].k), np.ascontiguousarray(tf_all["x"]), Tv,
                 np.ascontiguousarray(fn.x), Sv, xw_all, out_all)
        outs, base = [], 0
        for A, B in shapes:
            outs.append(out_all[base:base + A].ravel())
            base += A
        return outs
    outs = [np.empty(A * nt, dtype=complex) for A, B in shapes]
    for lo in range(0, nt, chunk):
        hi = min(lo + chunk, nt)
        idx = np.arange(lo, hi)
        all_blocks = _multi_blocks(specs, tf_all["x"][idx],
                                   _tf_slice(tf_all, idx), sf)
        for (A, B), xw, out, blocks in zip(shapes, xws, outs, all_blocks):
            for a in range(A):
                acc = blocks[a][0] @ xw[0]
                for b in range(1, B):
                    acc += blocks[a][b] @ xw[b]
                out[a * nt + lo:a * nt + hi] = acc
    return outs


def assemble(mesh, spec, eps_quad, mode="dense", eta=2.5, plan=None):
    if plan is None:
        plan = classify(mesh, eta=eta)
    return CorrectedOperator(spec, mesh, eps_quad, mode=mode, plan=plan)


def assemble_many(mesh, specs, eps_quad, mode="dense", eta=2.5, plan=None):
    """Assemble several kernels sharing classification, frames, and trees."""
    if plan is None:
        plan = classify(mesh, eta=eta)
    corrs = correction_matrices(specs, mesh, eps_quad, plan)
    return [CorrectedOperator(s, mesh, eps_quad, mode=mode, plan=plan, _corr=c)
            for s, c in zip(specs, corrs)]


def potential_matrix(mesh, spec, targets, eps_quad, eta=2.5):
    return potential_matrices(mesh, [spec], targets, eps_quad, eta)[0]


def potential_matrices(mesh, specs, targets, eps_quad, eta=2.5):
    """Dense (A*nt, B*Ns) evaluation matrices for off-surface targets."""
    targets = np.atleast_2d(targets)
    plan = classify(mesh, targets, eta=eta)
    corrs = correction_matrices(specs, mesh, eps_quad, plan, targets)
    fars = far_matrices(specs, mesh, targets)
    return [f + c.toarray() for f, c in zip(fars, corrs)]
