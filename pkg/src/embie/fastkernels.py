"""JIT-compiled pair evaluation for the on-surface kernel family.

Every on-surface kernel block is a short contraction of the Helmholtz factors
g = e^{ikr}/(4 pi r), c1 = g (ikr - 1)/r^2, c2 = g (3 - 3ikr - (kr)^2)/r^4
with frame vectors of the target and source points.  Each scalar component
is encoded as a code row (op, t_vec, s_vec, out_row, in_row) against fixed
per-point vector lists, so one compiled loop serves every formulation:

    target vectors: [uhat, vhat, nhat, uhat x nhat, vhat x nhat]
    source vectors: [uhat, vhat, nhat, nhat x uhat, nhat x vhat]

ops: 0 -> g; 1 -> g (T.S); 2 -> c1 (T.dx); 3 -> c1 (dx.S);
4 -> c1 [(T.dx)(n.S) - (T.S)(n.dx)]  (the n x curl S block);
5 -> D'_k - D'_0 (weakly singular difference, both packs inline).

Coincident points (r = 0) contribute nothing; singular blocks are replaced
through the correction path.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numba import njit

from .layerpot import kind_shape

_INV4PI = 1.0 / (4.0 * np.pi)

# code rows (op, t_vec_id, s_vec_id, sign) per kind, components in the same
# [A][B] row-major order as the reference numpy kernels
_KIND_CODES = {
    "S": [(0, 0, 0, 1.0)],
    "D": [(3, 0, 2, -1.0)],
    "D_scalar": [(3, 0, 2, -1.0)],
    "Sprime": [(2, 2, 0, 1.0)],
    "Dprime_diff": [(5, 2, 2, 1.0)],
    "M": [(4, a, b, 1.0) for a in (0, 1) for b in (0, 1)],
    "S_tan": [(1, a, b, 1.0) for a in (0, 1) for b in (0, 1)],
    "nxS_tan": [(1, 3 + a, b, 1.0) for a in (0, 1) for b in (0, 1)],
    "nxS_nxtan": [(1, 3 + a, 3 + b, 1.0) for a in (0, 1) for b in (0, 1)],
    "nxS_n": [(1, 3 + a, 2, 1.0) for a in (0, 1)],
    "nxgradS": [(2, 3 + a, 0, 1.0) for a in (0, 1)],
    "gradS_tan": [(2, a, 0, 1.0) for a in (0, 1)],
    "nS": [(1, 2, b, 1.0) for b in (0, 1)],
    "nSn": [(1, 2, 2, 1.0)],
    "nS_nx": [(1, 2, 3 + b, 1.0) for b in (0, 1)],
    "divS": [(3, 0, b, 1.0) for b in (0, 1)],
    "divS_nx": [(3, 0, 3 + b, 1.0) for b in (0, 1)],
}

FAST_KINDS = frozenset(_KIND_CODES)


def frame_vectors(f, side):
    """(n, 5, 3) stacked frame vector list for one side of the pair."""
    u, v, n = f["uhat"], f["vhat"], f["nhat"]
    if side == "target":
        extra = (np.cross(u, n), np.cross(v, n))
    else:
        extra = (np.cross(n, u), np.cross(n, v))
    return np.ascontiguousarray(np.stack([u, v, n, *extra], axis=1))


def pack_codes(specs, in_offsets=None):
    """Flatten the component codes of several specs into one int table.

    Returns (codes, signs, slices) where slices[i] = (start, ncomp, A, B)
    recovers spec i's components.  When in_offsets is given, each code row
    also carries global output/input row indices for the accumulate kernel.
    """
    rows, signs, slices = [], [], []
    out_base = 0
    for i, s in enumerate(specs):
        A, B = kind_shape(s.kind)
        comp = _KIND_CODES[s.kind]
        start = len(rows)
        for j, (op, ti, si, sg) in enumerate(comp):
            a, b = divmod(j, B)
            bi = 0 if in_offsets is None else in_offsets[i] + b
            rows.append((op, ti, si, out_base + a, bi))
            signs.append(sg)
        slices.append((start, len(comp), A, B))
        out_base += A
    return (np.array(rows, dtype=np.int64), np.array(signs), slices)


@njit(cache=True, fastmath=True)
def _pair_kernel(op, ti, si, k, d0, d1, d2, r2, Tv, Sv, t, s,
                 g, c1, dt0, dt1, dt2, dt3, dt4, ds0, ds1, ds2, ds3, ds4):
    if op == 0:
        return g
    if ti == 0:
        dtv = dt0
    elif ti == 1:
        dtv = dt1
    elif ti == 2:
        dtv = dt2
    elif ti == 3:
        dtv = dt3
    else:
        dtv = dt4
    if si == 0:
        dsv = ds0
    elif si == 1:
        dsv = ds1
    elif si == 2:
        dsv = ds2
    elif si == 3:
        dsv = ds3
    else:
        dsv = ds4
    if op == 2:
        return c1 * dtv
    if op == 3:
        return c1 * dsv
    ts = (Tv[t, ti, 0] * Sv[s, si, 0] + Tv[t, ti, 1] * Sv[s, si, 1]
          + Tv[t, ti, 2] * Sv[s, si, 2])
    if op == 1:
        return g * ts
    if op == 4:
        ns = (Tv[t, 2, 0] * Sv[s, si, 0] + Tv[t, 2, 1] * Sv[s, si, 1]
              + Tv[t, 2, 2] * Sv[s, si, 2])
        return c1 * (dtv * ns - ts * dt2)
    # op == 5: D'_k - D'_0 with T = n_t, S = n_s (ts = n_t.n_s)
    r = np.sqrt(r2)
    kr = k * r
    g0 = _INV4PI / r
    c1_0 = -g0 / r2
    c2_0 = 3.0 * g0 / (r2 * r2)
    c2 = g * complex(3.0 - kr * kr, -3.0 * kr) / (r2 * r2)
    return -((c2 - c2_0) * dt2 * ds2 + (c1 - c1_0) * ts)


@njit(cache=True, fastmath=True)
def materialize(codes, signs, k, Xt, Tv, Xs, Sv, out):
    """Fill out[c, t, s] with every coded component; r = 0 entries stay 0."""
    nt, ns, nc = Xt.shape[0], Xs.shape[0], codes.shape[0]
    for t in range(nt):
        for s in range(ns):
            d0 = Xt[t, 0] - Xs[s, 0]
            d1 = Xt[t, 1] - Xs[s, 1]
            d2 = Xt[t, 2] - Xs[s, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 == 0.0:
                continue
            r = np.sqrt(r2)
            kr = k * r
            inv = _INV4PI / r
            g = complex(np.cos(kr) * inv, np.sin(kr) * inv)
            c1 = g * complex(-1.0, kr) / r2
            dt0 = Tv[t, 0, 0] * d0 + Tv[t, 0, 1] * d1 + Tv[t, 0, 2] * d2
            dt1 = Tv[t, 1, 0] * d0 + Tv[t, 1, 1] * d1 + Tv[t, 1, 2] * d2
            dt2 = Tv[t, 2, 0] * d0 + Tv[t, 2, 1] * d1 + Tv[t, 2, 2] * d2
            dt3 = Tv[t, 3, 0] * d0 + Tv[t, 3, 1] * d1 + Tv[t, 3, 2] * d2
            dt4 = Tv[t, 4, 0] * d0 + Tv[t, 4, 1] * d1 + Tv[t, 4, 2] * d2
            ds0 = Sv[s, 0, 0] * d0 + Sv[s, 0, 1] * d1 + Sv[s, 0, 2] * d2
            ds1 = Sv[s, 1, 0] * d0 + Sv[s, 1, 1] * d1 + Sv[s, 1, 2] * d2
            ds2 = Sv[s, 2, 0] * d0 + Sv[s, 2, 1] * d1 + Sv[s, 2, 2] * d2
            ds3 = Sv[s, 3, 0] * d0 + Sv[s, 3, 1] * d1 + Sv[s, 3, 2] * d2
            ds4 = Sv[s, 4, 0] * d0 + Sv[s, 4, 1] * d1 + Sv[s, 4, 2] * d2
            for c in range(nc):
                val = _pair_kernel(
                    codes[c, 0], codes[c, 1], codes[c, 2], k,
                    d0, d1, d2, r2, Tv, Sv, t, s, g, c1,
                    dt0, dt1, dt2, dt3, dt4, ds0, ds1, ds2, ds3, ds4)
                out[c, t, s] = signs[c] * val


@njit(cache=True, fastmath=True)
def materialize_rows(codes, signs, k, Xt, Tv, Xs, Sv, bounds, out):
    """Sectioned single-row fill: target t pairs only with the source slice
    bounds[t]:bounds[t+1] of the concatenated source set; out is (nc, ns)."""
    nt, nc = Xt.shape[0], codes.shape[0]
    for t in range(nt):
        for s in range(bounds[t], bounds[t + 1]):
            d0 = Xt[t, 0] - Xs[s, 0]
            d1 = Xt[t, 1] - Xs[s, 1]
            d2 = Xt[t, 2] - Xs[s, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 == 0.0:
                continue
            r = np.sqrt(r2)
            kr = k * r
            inv = _INV4PI / r
            g = complex(np.cos(kr) * inv, np.sin(kr) * inv)
            c1 = g * complex(-1.0, kr) / r2
            dt0 = Tv[t, 0, 0] * d0 + Tv[t, 0, 1] * d1 + Tv[t, 0, 2] * d2
            dt1 = Tv[t, 1, 0] * d0 + Tv[t, 1, 1] * d1 + Tv[t, 1, 2] * d2
            dt2 = Tv[t, 2, 0] * d0 + Tv[t, 2, 1] * d1 + Tv[t, 2, 2] * d2
            dt3 = Tv[t, 3, 0] * d0 + Tv[t, 3, 1] * d1 + Tv[t, 3, 2] * d2
            dt4 = Tv[t, 4, 0] * d0 + Tv[t, 4, 1] * d1 + Tv[t, 4, 2] * d2
            ds0 = Sv[s, 0, 0] * d0 + Sv[s, 0, 1] * d1 + Sv[s, 0, 2] * d2
            ds1 = Sv[s, 1, 0] * d0 + Sv[s, 1, 1] * d1 + Sv[s, 1, 2] * d2
            ds2 = Sv[s, 2, 0] * d0 + Sv[s, 2, 1] * d1 + Sv[s, 2, 2] * d2
            ds3 = Sv[s, 3, 0] * d0 + Sv[s, 3, 1] * d1 + Sv[s, 3, 2] * d2
            ds4 = Sv[s, 4, 0] * d0 + Sv[s, 4, 1] * d1 + Sv[s, 4, 2] * d2
            for c in range(nc):
                val = _pair_kernel(
                    codes[c, 0], codes[c, 1], codes[c, 2], k,
                    d0, d1, d2, r2, Tv, Sv, t, s, g, c1,
                    dt0, dt1, dt2, dt3, dt4, ds0, ds1, ds2, ds3, ds4)
                out[c, s] = signs[c] * val


@njit(cache=True, fastmath=True)
def accumulate(codes, signs, k, Xt, Tv, Xs, Sv, xw, out):
    """out[ao, t] += sum_s component(c; t, s) xw[bi, s] without materializing
    the pair blocks (ao, bi from the code rows)."""
    nt, ns, nc = Xt.shape[0], Xs.shape[0], codes.shape[0]
    # loop-invariant masks: skip frame projections no component touches
    needt = np.zeros(5, dtype=np.bool_)
    needs = np.zeros(5, dtype=np.bool_)
    for c in range(nc):
        op = codes[c, 0]
        if op == 2 or op == 4 or op == 5:
            needt[codes[c, 1]] = True
        if op == 3 or op == 5:
            needs[codes[c, 2]] = True
        if op == 4:
            needt[2] = True
    acc = np.zeros(nc, dtype=np.complex128)
    for t in range(nt):
        acc[:] = 0.0
        for s in range(ns):
            d0 = Xt[t, 0] - Xs[s, 0]
            d1 = Xt[t, 1] - Xs[s, 1]
            d2 = Xt[t, 2] - Xs[s, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 == 0.0:
                continue
            r = np.sqrt(r2)
            kr = k * r
            inv = _INV4PI / r
            g = complex(np.cos(kr) * inv, np.sin(kr) * inv)
            c1 = g * complex(-1.0, kr) / r2
            dt0 = (Tv[t, 0, 0] * d0 + Tv[t, 0, 1] * d1
                   + Tv[t, 0, 2] * d2) if needt[0] else 0.0
            dt1 = (Tv[t, 1, 0] * d0 + Tv[t, 1, 1] * d1
                   + Tv[t, 1, 2] * d2) if needt[1] else 0.0
            dt2 = (Tv[t, 2, 0] * d0 + Tv[t, 2, 1] * d1
                   + Tv[t, 2, 2] * d2) if needt[2] else 0.0
            dt3 = (Tv[t, 3, 0] * d0 + Tv[t, 3, 1] * d1
                   + Tv[t, 3, 2] * d2) if needt[3] else 0.0
            dt4 = (Tv[t, 4, 0] * d0 + Tv[t, 4, 1] * d1
                   + Tv[t, 4, 2] * d2) if needt[4] else 0.0
            ds0 = (Sv[s, 0, 0] * d0 + Sv[s, 0, 1] * d1
                   + Sv[s, 0, 2] * d2) if needs[0] else 0.0
            ds1 = (Sv[s, 1, 0] * d0 + Sv[s, 1, 1] * d1
                   + Sv[s, 1, 2] * d2) if needs[1] else 0.0
            ds2 = (Sv[s, 2, 0] * d0 + Sv[s, 2, 1] * d1
                   + Sv[s, 2, 2] * d2) if needs[2] else 0.0
            ds3 = (Sv[s, 3, 0] * d0 + Sv[s, 3, 1] * d1
                   + Sv[s, 3, 2] * d2) if needs[3] else 0.0
            ds4 = (Sv[s, 4, 0] * d0 + Sv[s, 4, 1] * d1
                   + Sv[s, 4, 2] * d2) if needs[4] else 0.0
            for c in range(nc):
                val = _pair_kernel(
                    codes[c, 0], codes[c, 1], codes[c, 2], k,
                    d0, d1, d2, r2, Tv, Sv, t, s, g, c1,
                    dt0, dt1, dt2, dt3, dt4, ds0, ds1, ds2, ds3, ds4)
                acc[c] += val * xw[codes[c, 4], s]
        for c in range(nc):
            out[codes[c, 3], t] += signs[c] * acc[c]


@lru_cache(maxsize=256)
def _pack_cached(kinds):
    """pack_codes keyed by the kind tuple (codes are k-independent)."""
    rows, signs, slices = [], [], []
    out_base = 0
    for kd in kinds:
        A, B = kind_shape(kd)
        comp = _KIND_CODES[kd]
        start = len(rows)
        for j, (op, ti, si, sg) in enumerate(comp):
            a, b = divmod(j, B)
            rows.append((op, ti, si, out_base + a, 0))
            signs.append(sg)
        slices.append((start, len(comp), A, B))
        out_base += A
    return (np.array(rows, dtype=np.int64), np.array(signs), tuple(slices))


def materialize_flat(specs, X, tf, sf, tv=None):
    """Flat (ncomp, nt, ns) component array plus per-spec slices.

    Single shared wavenumber; callers needing the nested block layout can
    use multi_blocks_fast instead.  tv short-circuits the target frame
    stacking when the caller reuses one target set across many calls."""
    Xt = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    Xs = np.ascontiguousarray(sf["x"], dtype=float)
    Tv = frame_vectors(tf, "target") if tv is None else tv
    Sv = frame_vectors(sf, "source")
    codes, signs, slices = _pack_cached(tuple(s.kind for s in specs))
    out = np.zeros((len(codes), len(Xt), len(Xs)), dtype=complex)
    materialize(codes, signs, float(specs[0].k), Xt, Tv, Xs, Sv, out)
    return out, slices


_FUSED_CACHE = {}


def fused_accumulator(kinds, in_widths):
    """Compile a fully unrolled apply kernel for one fixed kind tuple.

    The generic accumulate loop pays per-component dispatch on every pair;
    generating straight-line source for the exact component list roughly
    doubles the throughput of the GMRES matvec.  Compiled once per process
    and kind tuple."""
    key = (kinds, in_widths)
    if key in _FUSED_CACHE:
        return _FUSED_CACHE[key]
    in_offsets = np.cumsum([0] + list(in_widths))[:-1]
    rows, signs = [], []
    out_base = 0
    for kd, off in zip(kinds, in_offsets):
        A, B = kind_shape(kd)
        for j, (op, ti, si, sg) in enumerate(_KIND_CODES[kd]):
            a, b = divmod(j, B)
            rows.append((op, ti, si, out_base + a, off + b))
            signs.append(sg)
        out_base += A

    need_dt = sorted({ti for (op, ti, si, ao, bi) in rows
                      if op in (2, 4, 5)} | ({2} if any(
                          r[0] in (4, 5) for r in rows) else set()))
    need_ds = sorted({si for (op, ti, si, ao, bi) in rows if op in (3, 5)})
    need_ts = sorted({(ti, si) for (op, ti, si, ao, bi) in rows if op == 1}
                     | {(ti, si) for (op, ti, si, ao, bi) in rows if op == 4}
                     | {(2, si) for (op, ti, si, ao, bi) in rows if op == 4}
                     | ({(2, 2)} if any(r[0] == 5 for r in rows) else set()))
    need_tv = sorted({ti for ti in need_dt}
                     | {ti for (ti, si) in need_ts})
    has_op5 = any(r[0] == 5 for r in rows)
    outs = sorted({ao for (op, ti, si, ao, bi) in rows})

    L = ["def _fused(k, Xt, Tv, Xs, Sv, xw, out):",
         "    nt, ns = Xt.shape[0], Xs.shape[0]",
         "    for t in range(nt):"]
    for ao in outs:
        L.append(f"        acc{ao} = 0.0j")
    for ti in need_tv:
        for x in range(3):
            L.append(f"        tv{ti}{x} = Tv[t, {ti}, {x}]")
    L += ["        for s in range(ns):",
          "            d0 = Xt[t, 0] - Xs[s, 0]",
          "            d1 = Xt[t, 1] - Xs[s, 1]",
          "            d2 = Xt[t, 2] - Xs[s, 2]",
          "            r2 = d0 * d0 + d1 * d1 + d2 * d2",
          "            if r2 == 0.0:",
          "                continue",
          "            r = np.sqrt(r2)",
          "            kr = k * r",
          "            inv = INV4PI / r",
          "            g = complex(np.cos(kr) * inv, np.sin(kr) * inv)",
          "            c1 = g * complex(-1.0, kr) / r2"]
    for ti in need_dt:
        L.append(f"            dt{ti} = tv{ti}0 * d0 + tv{ti}1 * d1"
                 f" + tv{ti}2 * d2")
    for si in need_ds:
        L.append(f"            ds{si} = Sv[s, {si}, 0] * d0"
                 f" + Sv[s, {si}, 1] * d1 + Sv[s, {si}, 2] * d2")
    for (ti, si) in need_ts:
        L.append(f"            ts{ti}{si} = tv{ti}0 * Sv[s, {si}, 0]"
                 f" + tv{ti}1 * Sv[s, {si}, 1] + tv{ti}2 * Sv[s, {si}, 2]")
    if has_op5:
        L += ["            g0 = INV4PI / r",
              "            c1d = c1 + g0 / r2",
              "            c2d = (g * complex(3.0 - kr * kr, -3.0 * kr)"
              " - 3.0 * g0) / (r2 * r2)"]
    for (op, ti, si, ao, bi), sg in zip(rows, signs):
        if op == 0:
            expr = "g"
        elif op == 1:
            expr = f"g * ts{ti}{si}"
        elif op == 2:
            expr = f"c1 * dt{ti}"
        elif op == 3:
            expr = f"c1 * ds{si}"
        elif op == 4:
            expr = f"c1 * (dt{ti} * ts2{si} - ts{ti}{si} * dt2)"
        else:
            expr = f"-(c2d * dt2 * ds{si} + c1d * ts22)"
        pre = "-" if sg < 0 else ""
        L.append(f"            acc{ao} += {pre}({expr}) * xw[{bi}, s]")
    for ao in outs:
        L.append(f"        out[{ao}, t] += acc{ao}")
    src = "\n".join(L)
    ns_dict = {"np": np, "INV4PI": _INV4PI}
    exec(compile(src, f"<fused:{','.join(kinds)}>", "exec"), ns_dict)
    fn = njit(fastmath=True)(ns_dict["_fused"])
    _FUSED_CACHE[key] = fn
    return fn


def fused_materializer(kinds, sectioned):
    """Compile an unrolled pair materializer for one fixed kind tuple.

    sectioned=True produces the per-target source-slice variant used by the
    batched self-interaction path (out indexed [c, s]); otherwise the full
    (c, t, s) fill."""
    key = (kinds, "sec" if sectioned else "full")
    if key in _FUSED_CACHE:
        return _FUSED_CACHE[key]
    rows, signs = [], []
    for kd in kinds:
        for (op, ti, si, sg) in _KIND_CODES[kd]:
            rows.append((op, ti, si))
            signs.append(sg)

    need_dt = sorted({ti for (op, ti, si) in rows if op in (2, 4, 5)}
                     | ({2} if any(r[0] in (4, 5) for r in rows) else set()))
    need_ds = sorted({si for (op, ti, si) in rows if op in (3, 5)})
    need_ts = sorted({(ti, si) for (op, ti, si) in rows if op in (1, 4)}
                     | {(2, si) for (op, ti, si) in rows if op == 4}
                     | ({(2, 2)} if any(r[0] == 5 for r in rows) else set()))
    need_tv = sorted(set(need_dt) | {ti for (ti, si) in need_ts})
    has_op5 = any(r[0] == 5 for r in rows)

    if sectioned:
        L = ["def _fused(k, Xt, Tv, Xs, Sv, bounds, out):",
             "    nt = Xt.shape[0]",
             "    for t in range(nt):"]
    else:
        L = ["def _fused(k, Xt, Tv, Xs, Sv, out):",
             "    nt, ns = Xt.shape[0], Xs.shape[0]",
             "    for t in range(nt):"]
    for ti in need_tv:
        for x in range(3):
            L.append(f"        tv{ti}{x} = Tv[t, {ti}, {x}]")
    if sectioned:
        L.append("        for s in range(bounds[t], bounds[t + 1]):")
    else:
        L.append("        for s in range(ns):")
    L += ["            d0 = Xt[t, 0] - Xs[s, 0]",
          "            d1 = Xt[t, 1] - Xs[s, 1]",
          "            d2 = Xt[t, 2] - Xs[s, 2]",
          "            r2 = d0 * d0 + d1 * d1 + d2 * d2",
          "            if r2 == 0.0:",
          "                continue",
          "            r = np.sqrt(r2)",
          "            kr = k * r",
          "            inv = INV4PI / r",
          "            g = complex(np.cos(kr) * inv, np.sin(kr) * inv)",
          "            c1 = g * complex(-1.0, kr) / r2"]
    for ti in need_dt:
        L.append(f"            dt{ti} = tv{ti}0 * d0 + tv{ti}1 * d1"
                 f" + tv{ti}2 * d2")
    for si in need_ds:
        L.append(f"            ds{si} = Sv[s, {si}, 0] * d0"
                 f" + Sv[s, {si}, 1] * d1 + Sv[s, {si}, 2] * d2")
    for (ti, si) in need_ts:
        L.append(f"            ts{ti}{si} = tv{ti}0 * Sv[s, {si}, 0]"
                 f" + tv{ti}1 * Sv[s, {si}, 1] + tv{ti}2 * Sv[s, {si}, 2]")
    if has_op5:
        L += ["            g0 = INV4PI / r",
              "            c1d = c1 + g0 / r2",
              "            c2d = (g * complex(3.0 - kr * kr, -3.0 * kr)"
              " - 3.0 * g0) / (r2 * r2)"]
    tgt = "out[{c}, s]" if sectioned else "out[{c}, t, s]"
    for c, ((op, ti, si), sg) in enumerate(zip(rows, signs)):
        if op == 0:
            expr = "g"
        elif op == 1:
            expr = f"g * ts{ti}{si}"
        elif op == 2:
            expr = f"c1 * dt{ti}"
        elif op == 3:
            expr = f"c1 * ds{si}"
        elif op == 4:
            expr = f"c1 * (dt{ti} * ts2{si} - ts{ti}{si} * dt2)"
        else:
            expr = f"-(c2d * dt2 * ds{si} + c1d * ts22)"
        pre = "-" if sg < 0 else ""
        L.append(f"            {tgt.format(c=c)} = {pre}({expr})")
    src = "\n".join(L)
    ns_dict = {"np": np, "INV4PI": _INV4PI}
    exec(compile(src, f"<fusedmat:{','.join(kinds)}>", "exec"), ns_dict)
    fn = njit(fastmath=True)(ns_dict["_fused"])
    _FUSED_CACHE[key] = fn
    return fn


def multi_blocks_fast(specs, X, tf, sf):
    """Drop-in replacement for the numpy pair evaluation; same nested-list
    block layout.  Only valid when every spec kind is in FAST_KINDS."""
    out, slices = materialize_flat(specs, X, tf, sf)
    blocks = []
    for (start, ncomp, A, B) in slices:
        blocks.append([[out[start + a * B + b] for b in range(B)]
                       for a in range(A)])
    return blocks


def fast_path_ok(specs):
    """All kinds JIT-supported and a single shared real wavenumber."""
    return (all(s.kind in FAST_KINDS for s in specs)
            and len({float(s.k) for s in specs}) == 1)
