import numpy as np
import pytest

from embie.geometry import torus_mesh, unit_sphere_mesh
from embie.layerpot import KernelSpec, green
from embie.quadrature import (CorrectedOperator, QuadratureError, assemble,
                              assemble_many, classify, correction_matrix,
                              far_matrix, near_block, potential_matrix,
                              self_block)


@pytest.fixture(scope="module")
def sphere48():
    return unit_sphere_mesh(48, 2)


@pytest.fixture(scope="module")
def sphere192():
    return unit_sphere_mesh(192, 2)


def _interior_source_data(mesh, k, x0=np.array([0.2, -0.1, 0.3])):
    """Boundary traces of a point source inside the surface."""
    nd = mesh.nodes
    dx = nd.x - x0
    r = np.linalg.norm(dx, axis=1)
    g = np.exp(1j * k * r) / (4 * np.pi * r)
    dgdn = g * (1j * k * r - 1) / r**2 * np.einsum("ij,ij->i", dx, nd.nhat)
    return g, dgdn


def green_residual(Sk, Dk, mesh, k):
    phi, dphidn = _interior_source_data(mesh, k)
    return np.abs(Dk @ phi - Sk @ dphidn - 0.5 * phi).max()


# ---------------------------------------------------------------- classify

def test_classify_self_and_near(sphere48):
    plan = classify(sphere48)
    p = sphere48.nodeset.p
    for j in range(sphere48.n_patches):
        own = plan.self_targets[j]
        assert np.array_equal(own, np.arange(j * p, (j + 1) * p))
        # own nodes are never in the near list
        assert not np.intersect1d(own, plan.near_targets[j]).size
        # adjacent patches produce at least some near targets
        assert len(plan.near_targets[j]) > 0


def test_classify_offsurface_targets_never_self(sphere48):
    plan = classify(sphere48, targets=np.array([[2.0, 0, 0], [0, 0, 1.001]]))
    assert all(len(s) == 0 for s in plan.self_targets)
    # the point just off the north pole is near some patch
    assert any(1 in nt for nt in plan.near_targets)


def test_classify_distant_targets_all_far(sphere48):
    plan = classify(sphere48, targets=np.array([[50.0, 0, 0]]))
    assert all(len(nt) == 0 for nt in plan.near_targets)


# ------------------------------------------------------- block contracts

def test_far_matrix_shapes(sphere48):
    n = sphere48.n_nodes
    assert far_matrix(KernelSpec("S", 1.0), sphere48).shape == (n, n)
    assert far_matrix(KernelSpec("M", 1.0), sphere48).shape == (2 * n, 2 * n)
    t = np.array([[3.0, 0, 0]])
    assert far_matrix(KernelSpec("S_vec", 1.0), sphere48, t).shape == (3, 2 * n)


def test_far_matrix_distant_unit_charge(sphere48):
    # potential of the uniformly charged unit sphere at r=10 is 1/10, and the
    # smooth rule alone resolves it for such a distant target
    F = far_matrix(KernelSpec("S", 0.0), sphere48, np.array([[10.0, 0, 0]]))
    assert abs((F @ np.ones(sphere48.n_nodes))[0] - 0.1) < 1e-6


def test_near_block_matches_far_when_actually_far(sphere48):
    # a genuinely distant target: the adaptive rule accepts the root leaf and
    # the result reduces to plain smooth quadrature (up to leaf-rule order)
    tf = dict(x=np.array([[10.0, 0, 0]]), nhat=np.zeros((1, 3)),
              uhat=np.zeros((1, 3)), vhat=np.zeros((1, 3)))
    spec = KernelSpec("S", 0.0)
    nb = near_block(spec, sphere48, 0, tf, 1e-8)
    fb = far_matrix(spec, sphere48, np.array([[10.0, 0, 0]]))
    p = sphere48.nodeset.p
    assert np.abs(nb[0, 0, 0] - fb[0, :p]).max() < 1e-6


def test_near_block_tolerance_ordering(sphere48):
    nd = sphere48.nodes
    p = sphere48.nodeset.p
    tidx = np.array([3 * p + 1])          # a node of another, nearby patch
    tf = {key: getattr(nd, a)[tidx] for key, a in
          (("x", "x"), ("nhat", "nhat"), ("uhat", "uhat"), ("vhat", "vhat"))}
    spec = KernelSpec("S", 1.0)
    loose = near_block(spec, sphere48, 0, tf, 1e-4)
    tight = near_block(spec, sphere48, 0, tf, 1e-7)
    assert np.abs(loose - tight).max() <= 2e-4


def test_near_block_max_depth_error(sphere48):
    nd = sphere48.nodes
    # target essentially on the source patch: subdivision cannot terminate
    tf = dict(x=nd.x[0:1] + 1e-13, nhat=nd.nhat[0:1],
              uhat=nd.uhat[0:1], vhat=nd.vhat[0:1])
    with pytest.raises(QuadratureError, match="depth"):
        near_block(KernelSpec("S", 0.0), sphere48, 0, tf, 1e-10, max_depth=6)


def test_self_block_shapes(sphere48):
    p = sphere48.nodeset.p
    assert self_block(KernelSpec("S", 1.0), sphere48, 0, 0, 1e-6).shape == (1, 1, p)
    assert self_block(KernelSpec("M", 1.0), sphere48, 0, 0, 1e-6).shape == (2, 2, p)


def test_correction_matrix_shape_and_content(sphere48):
    C = correction_matrix(KernelSpec("S", 1.0), sphere48, 1e-5)
    n = sphere48.n_nodes
    assert C.shape == (n, n)
    assert 0 < C.nnz <= n * n
    assert np.all(np.isfinite(C.data))


# ------------------------------------------------ assembled operator checks

def test_uniform_charge_center_potential(sphere48):
    # potential of a uniformly charged unit sphere at its center equals 1
    P = potential_matrix(sphere48, KernelSpec("S", 0.0),
                         np.zeros((1, 3)), 1e-8)
    val = (P @ np.ones(sphere48.n_nodes))[0]
    assert abs(val - 1.0) < 1e-6


def test_sphere_identities_and_green(sphere192):
    mesh = sphere192
    specs = [KernelSpec("S", 0.0), KernelSpec("D", 0.0),
             KernelSpec("Sprime", 0.0), KernelSpec("S", 1.0),
             KernelSpec("D", 1.0), KernelSpec("S", 2.5), KernelSpec("D", 2.5)]
    ops = assemble_many(mesh, specs, 1e-6)
    one = np.ones(mesh.n_nodes)
    assert np.abs(ops[0].matrix @ one - 1.0).max() <= 5e-4
    assert np.abs(ops[1].matrix @ one + 0.5).max() <= 5e-4
    assert np.abs(ops[2].matrix @ one + 0.5).max() <= 5e-4
    assert green_residual(ops[0], ops[1], mesh, 0.0) <= 1e-4
    assert green_residual(ops[3], ops[4], mesh, 1.0) <= 1e-4
    assert green_residual(ops[5], ops[6], mesh, 2.5) <= 1e-4


def test_torus_green_identity():
    mesh = torus_mesh(2.0, 0.5, 8, 4, 2)
    # source on the tube axis: distance to the surface is r_minor everywhere
    x0 = np.array([2.0, 0.0, 0.0])
    nd = mesh.nodes
    ks = (0.0, 1.0, 2.5)
    specs = [KernelSpec(kind, k) for k in ks for kind in ("S", "D")]
    ops = assemble_many(mesh, specs, 1e-6)
    for i, k in enumerate(ks):
        dx = nd.x - x0
        r = np.linalg.norm(dx, axis=1)
        g = np.exp(1j * k * r) / (4 * np.pi * r)
        dgdn = g * (1j * k * r - 1) / r**2 * np.einsum("ij,ij->i", dx, nd.nhat)
        resid = np.abs(ops[2 * i + 1] @ g - ops[2 * i] @ dgdn - 0.5 * g).max()
        # coarse band: 64 curved patches of size ~1.2 on a tube of radius 0.5
        assert resid < 2e-2, f"k={k}: {resid}"


def test_green_identity_improves_under_refinement():
    k = 1.0
    resids = []
    for npat in (48, 192):
        mesh = unit_sphere_mesh(npat, 2)
        ops = assemble_many(mesh, [KernelSpec("S", k), KernelSpec("D", k)], 1e-8)
        resids.append(green_residual(ops[0], ops[1], mesh, k))
    # order-2 basis: expect about h^3 = 8x per refinement level
    assert resids[1] < resids[0] / 5


def test_dense_vs_matrix_free_agree(sphere48):
    spec = KernelSpec("M", 1.3)
    plan = classify(sphere48)
    dense = assemble(sphere48, spec, 1e-5, mode="dense", plan=plan)
    free = CorrectedOperator(spec, sphere48, 1e-5, mode="matrix-free",
                             plan=plan, _corr=dense.corrections)
    rng = np.random.default_rng(7)
    x = rng.standard_normal(dense.shape[1]) + 1j * rng.standard_normal(dense.shape[1])
    a, b = dense @ x, free @ x
    assert np.abs(a - b).max() < 1e-13 * max(1, np.abs(a).max())


def test_single_layer_bilinear_symmetry(sphere48):
    # <g, S f> = <f, S g> for the symmetric-kernel operator, up to
    # discretization error
    op = assemble(sphere48, KernelSpec("S", 1.0), 1e-6)
    W = sphere48.nodes.wjac
    nd = sphere48.nodes
    f = np.exp(nd.x[:, 0]) * nd.x[:, 2]
    g = np.cos(2 * nd.x[:, 1]) + nd.x[:, 0]
    lhs = (W * g) @ (op @ f)
    rhs = (W * f) @ (op @ g)
    # both sides nearly cancel; band is the measured discretization level
    assert abs(lhs - rhs) < 2e-2


def test_offsurface_green_representation(sphere48):
    # scattered-field representation reproduces the source at an exterior point
    k = 1.0
    x0 = np.array([0.2, -0.1, 0.3])
    xt = np.array([[2.5, 1.0, -0.7]])
    phi, dphidn = _interior_source_data(sphere48, k)
    P_s = potential_matrix(sphere48, KernelSpec("S", k), xt, 1e-8)
    P_d = potential_matrix(sphere48, KernelSpec("D_scalar", k), xt, 1e-8)
    val = (P_d @ phi - P_s @ dphidn)[0]
    # limited by the degree-2 interpolation of the traces at 48 patches
    assert abs(val - green(k, xt[0], x0)) < 1e-4


def test_unknown_mode_rejected(sphere48):
    with pytest.raises(ValueError, match="mode"):
        CorrectedOperator(KernelSpec("S", 1.0), sphere48, 1e-5, mode="sparse")
