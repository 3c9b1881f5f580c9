import io

import numpy as np
import pytest

from embie.basis import npol
from embie.geometry import (Mesh, MeshFormatError, Patch, load_mesh, refine,
                            refine_all, save_mesh, torus_mesh, unit_sphere_mesh)


def test_sphere_patch_and_node_counts():
    m = unit_sphere_mesh(192, 2)
    assert m.n_patches == 192
    assert m.n_nodes == 192 * 6


def test_sphere_rejects_bad_patch_count():
    with pytest.raises(ValueError):
        unit_sphere_mesh(100, 2)


def test_sphere_outward_normals():
    m = unit_sphere_mesh(192, 2)
    nd = m.nodes
    assert np.all(np.einsum("ij,ij->i", nd.x, nd.nhat) > 0)


def test_sphere_area_order1_coarse():
    # O(h^2) band: the coarse error must drop ~4x per subdivision level
    e12 = abs(unit_sphere_mesh(12, 1).area() - 4 * np.pi)
    e48 = abs(unit_sphere_mesh(48, 1).area() - 4 * np.pi)
    assert e12 < 8.0
    assert e48 < e12 / 2.5


def _strip_charts(mesh):
    """Round-trip through the file format, dropping the exact charts."""
    buf = io.StringIO()
    save_mesh(mesh, buf)
    buf.seek(0)
    return load_mesh(buf)


@pytest.mark.parametrize("order,minrate", [(1, 1.7), (2, 2.7), (4, 4.5)])
def test_sphere_area_volume_convergence_rate(order, minrate):
    errs_a, errs_v = [], []
    for npat in (48, 192, 768):
        m = unit_sphere_mesh(npat, order)
        errs_a.append(abs(m.area() - 4 * np.pi))
        errs_v.append(abs(m.signed_volume() - 4 * np.pi / 3))
    for errs in (errs_a, errs_v):
        rate = np.log2(errs[0] / errs[-1]) / 2.0
        assert rate >= minrate, f"rate {rate} for errors {errs}"


@pytest.mark.parametrize("order,minrate", [(1, 1.7), (2, 2.7), (4, 4.5)])
def test_polynomial_sphere_area_volume_convergence_rate(order, minrate):
    # meshes read from file have only the degree-order coefficients
    errs_a, errs_v = [], []
    for npat in (48, 192, 768):
        m = _strip_charts(unit_sphere_mesh(npat, order))
        errs_a.append(abs(m.area() - 4 * np.pi))
        errs_v.append(abs(m.signed_volume() - 4 * np.pi / 3))
    for errs in (errs_a, errs_v):
        rate = np.log2(errs[0] / errs[-1]) / 2.0
        assert rate >= minrate, f"rate {rate} for errors {errs}"


def test_sphere_nodes_exact_on_surface():
    nd = unit_sphere_mesh(48, 2).nodes
    assert np.abs(np.linalg.norm(nd.x, axis=1) - 1).max() < 1e-14
    assert np.abs(nd.nhat - nd.x).max() < 1e-14


def test_refined_sphere_nodes_stay_exact():
    m = refine(unit_sphere_mesh(12, 3), np.ones(12, dtype=bool))
    nd = m.nodes
    assert np.abs(np.linalg.norm(nd.x, axis=1) - 1).max() < 1e-14


def test_polynomial_patch_matches_chart_at_fit_points():
    m = unit_sphere_mesh(48, 3)
    poly = _strip_charts(m)
    # the coefficient fit interpolates the chart on the uniform lattice
    g = np.array([(i / 3, j / 3) for i in range(4) for j in range(4 - i)])
    for pc, pp in zip(m.patches[:5], poly.patches[:5]):
        assert np.abs(pc.positions(g[:, 0], g[:, 1])
                      - pp.positions(g[:, 0], g[:, 1])).max() < 1e-13


def test_divergence_theorem_constant_field():
    m = unit_sphere_mesh(48, 4)
    nd = m.nodes
    flux = (nd.wjac[:, None] * nd.nhat).sum(axis=0)
    # zero only up to smooth-rule quadrature accuracy at this resolution
    assert np.abs(flux).max() < 1e-3
    m2 = unit_sphere_mesh(192, 4)
    nd2 = m2.nodes
    flux2 = (nd2.wjac[:, None] * nd2.nhat).sum(axis=0)
    assert np.abs(flux2).max() < np.abs(flux).max() / 4


def test_torus_area_volume():
    m = torus_mesh(2.0, 0.5, 8, 4, 4)
    assert abs(m.area() - 4 * np.pi**2) < 1e-3
    assert abs(m.signed_volume() - np.pi**2) < 1e-3
    m2 = torus_mesh(2.0, 0.5, 16, 8, 4)
    assert abs(m2.area() - 4 * np.pi**2) < 1e-6


def test_torus_degenerate_radii():
    with pytest.raises(ValueError, match="degenerate"):
        torus_mesh(1.0, 2.0, 8, 4, 4)


def test_frame_orthonormality_and_position():
    m = unit_sphere_mesh(48, 4)
    p = m.patches[7]
    f = p.frame_at(0.21, 0.33)
    assert abs(np.dot(f.uhat, f.vhat)) < 1e-13
    assert abs(np.dot(f.uhat, f.nhat)) < 1e-13
    assert abs(np.dot(f.vhat, f.nhat)) < 1e-13
    assert np.abs(np.cross(f.uhat, f.vhat) - f.nhat).max() < 1e-13
    assert f.jacobian > 0
    assert abs(np.linalg.norm(f.x) - 1) < 1e-4


def test_flat_reference_patch_frame():
    order = 2
    from embie.basis import build_nodeset
    ns = build_nodeset(order)
    pts = np.column_stack([ns.nodes[:, 0], ns.nodes[:, 1], np.zeros(ns.p)])
    p = Patch(order, ns.V_inv @ pts)
    f = p.frame_at(0.3, 0.4)
    assert f.jacobian == pytest.approx(1.0, abs=1e-12)
    assert f.nhat == pytest.approx(np.array([0, 0, 1.0]), abs=1e-12)


def test_refine_counts_and_identity():
    m = unit_sphere_mesh(192, 2)
    assert refine_all(m).n_patches == 768
    m_same = refine(m, np.zeros(192, dtype=bool))
    assert m_same.n_patches == 192
    assert np.abs(m_same.patches[0].geom_coefs - m.patches[0].geom_coefs).max() == 0


def test_refine_preserves_surface():
    m = unit_sphere_mesh(12, 4)
    mr = refine_all(m)
    # children reproduce the parent surface; the finer node rule samples it
    # better, so the area error can only improve
    assert abs(mr.area() - 4 * np.pi) < abs(m.area() - 4 * np.pi)
    # child 0 covers the (u/2, v/2) corner of the parent
    rng = np.random.default_rng(1)
    uv = rng.random((30, 2))
    uv[:, 1] *= 1 - uv[:, 0]
    par = m.patches[0].positions(uv[:, 0] / 2, uv[:, 1] / 2)
    ch = mr.patches[0].positions(uv[:, 0], uv[:, 1])
    assert np.abs(par - ch).max() < 1e-13


def test_refine_flag_length_check():
    m = unit_sphere_mesh(12, 2)
    with pytest.raises(ValueError):
        refine(m, np.ones(5, dtype=bool))


def test_save_load_roundtrip_bit_exact():
    m = unit_sphere_mesh(12, 2)
    buf = io.StringIO()
    save_mesh(m, buf)
    buf.seek(0)
    m2 = load_mesh(buf)
    for a, b in zip(m.patches, m2.patches):
        assert np.array_equal(a.geom_coefs, b.geom_coefs)
        assert a.component == b.component


def test_load_truncated_file_reports_line():
    m = unit_sphere_mesh(12, 2)
    buf = io.StringIO()
    save_mesh(m, buf)
    text = "\n".join(buf.getvalue().splitlines()[:5]) + "\n"
    with pytest.raises(MeshFormatError, match="line"):
        load_mesh(io.StringIO(text))


def test_load_coefficient_count_mismatch():
    # declare order 4 (15 rows) but provide an order-2 patch worth of rows
    m = unit_sphere_mesh(12, 2)
    buf = io.StringIO()
    save_mesh(m, buf)
    lines = buf.getvalue().splitlines()
    lines[1] = lines[1].replace("patch 0 2 1", "patch 0 4 1")
    with pytest.raises(MeshFormatError):
        load_mesh(io.StringIO("\n".join(lines) + "\n"))


def test_load_bad_header():
    with pytest.raises(MeshFormatError, match="header"):
        load_mesh(io.StringIO("NOT-HOT 1 12\n"))


def test_load_non_finite_coefficient():
    m = unit_sphere_mesh(12, 1)
    buf = io.StringIO()
    save_mesh(m, buf)
    text = buf.getvalue().replace("patch 0 1 1\n", "patch 0 1 1\n", 1)
    lines = text.splitlines()
    parts = lines[2].split()
    parts[0] = "nan"
    lines[2] = " ".join(parts)
    with pytest.raises(MeshFormatError, match="finite"):
        load_mesh(io.StringIO("\n".join(lines) + "\n"))


def test_load_rejects_inward_orientation():
    m = unit_sphere_mesh(12, 2)
    flipped = []
    for p in m.patches:
        # swapping u and v columns reverses orientation; easiest: negate geometry
        flipped.append(Patch(p.order, -p.geom_coefs, component=p.component))
    buf = io.StringIO()
    save_mesh(Mesh(flipped, check_orientation=False), buf)
    buf.seek(0)
    with pytest.raises(MeshFormatError, match="oriented"):
        load_mesh(buf)


def test_signed_volume_positive_per_component():
    m = torus_mesh(2.0, 0.5, 8, 4, 3)
    assert m.signed_volume(1) > 0


def test_patch_coef_shape_check():
    with pytest.raises(ValueError):
        Patch(3, np.zeros((npol(2), 3)))
