import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vrsph import operators as ops
from vrsph.geometry import Box, build_neighbor_table, generate_perturbed, generate_uniform
from vrsph.kernels import KernelSpec, eval_w, grad_w
from vrsph.reconstruction import Mode, reconstruct_volumes, vrsph_function_all, vrsph_morris_all
from vrsph.studies import loglog_slope, sample_field


def setup(n, dim=1, dist="uniform", seed=0, kappa=3.0):
    box = Box.cube(-1.0, 1.0, dim)
    if dist == "uniform":
        ps = generate_uniform(n, box, virtual_layers=3, layout="node")
    else:
        ps = generate_perturbed(n, box, amplitude=0.5, seed=seed, virtual_layers=3, layout="node")
    k = KernelSpec(dim, kappa * ps.delta_x)
    nbrs = build_neighbor_table(ps, k.h)
    vols = np.full(ps.n_total, ps.delta_x**dim)
    return ps, nbrs, k, vols


def brute_sum(ps, k, vols, term):
    """Direct double loop over all particle pairs."""
    n = ps.n_total
    out = []
    for i in range(ps.n_interior):
        acc = 0.0
        for j in range(n):
            if j != i and np.linalg.norm(ps.positions[i] - ps.positions[j]) < k.h:
                acc = acc + term(i, j)
        out.append(acc)
    return np.array(out)


# ---------------------------------------------------------------- SPH

def test_sph_function_constant_is_riemann_sum():
    ps, nbrs, k, v = setup(64)
    f = np.full(ps.n_total, 2.5)
    got = ops.sph_function_all(f, v, nbrs, k)[: ps.n_interior]
    dx = ps.delta_x
    riemann = sum(dx * float(eval_w(m * dx, k)) for m in range(-2, 3))
    np.testing.assert_allclose(got, 2.5 * riemann, rtol=1e-13)


def test_sph_partition_of_unity_second_order_at_fixed_h():
    # refining dx under a fixed support: |sum v W - 1| = O(dx^2)
    errs, ns = [], [20, 40, 80]
    for n in ns:
        ps = generate_uniform(n, Box.cube(-1.0, 1.0, 1), virtual_layers=12, layout="node")
        k = KernelSpec(1, 0.3)
        nbrs = build_neighbor_table(ps, k.h)
        one = ops.sph_function_all(np.ones(ps.n_total), np.full(ps.n_total, ps.delta_x), nbrs, k)
        errs.append(np.abs(one[: ps.n_interior] - 1).max())
    assert loglog_slope(ns, errs) >= 1.9


def test_sph_gradient_matches_direct_summation():
    ps, nbrs, k, v = setup(6, dim=2, dist="perturbed", seed=3)
    f = np.sin(ps.positions[:, 0]) + ps.positions[:, 1] ** 2
    got = ops.sph_gradient_all(f, v, nbrs, k)[: ps.n_interior]
    x = ps.positions
    ref = brute_sum(ps, k, v, lambda i, j: -v[j] * (f[i] - f[j]) * grad_w(x[i], x[j], k))
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_sph_laplacian_matches_direct_summation():
    ps, nbrs, k, v = setup(6, dim=2, dist="perturbed", seed=3)
    f = np.cos(ps.positions[:, 0] * ps.positions[:, 1])
    x = ps.positions

    def term(i, j):
        xij = x[i] - x[j]
        return 2 * v[j] * (f[i] - f[j]) * (xij @ grad_w(x[i], x[j], k)) / (xij @ xij)

    np.testing.assert_allclose(ops.sph_laplacian_all(f, v, nbrs, k)[: ps.n_interior], brute_sum(ps, k, v, term),
                               rtol=1e-12, atol=1e-10)


def test_sph_uniform_1d_linear_and_quadratic():
    # fixed h, refined dx: slope of x and Laplacian of x^2 converge at second order
    errs_g, errs_l, ns = [], [], [20, 40, 80]
    for n in ns:
        ps = generate_uniform(n, Box.cube(-1.0, 1.0, 1), virtual_layers=12, layout="node")
        k = KernelSpec(1, 0.3)
        nbrs = build_neighbor_table(ps, k.h)
        v = np.full(ps.n_total, ps.delta_x)
        x = ps.positions[:, 0]
        g = ops.sph_gradient_all(x, v, nbrs, k)[: ps.n_interior, 0]
        lap = ops.sph_laplacian_all(x**2, v, nbrs, k)[: ps.n_interior]
        errs_g.append(np.abs(g - 1).max())
        errs_l.append(np.abs(lap - 2).max())
    assert loglog_slope(ns, errs_g) >= 1.9 and loglog_slope(ns, errs_l) >= 1.9


def test_sph_perturbed_laplacian_does_not_converge():
    errs, ns = [], [16, 32, 64]
    for n in ns:
        ps, nbrs, k, v = setup(n, dim=2, dist="perturbed", seed=0)
        _, _, lap_ex = sample_field(ps.positions)
        lap = ops.sph_laplacian_all(sample_field(ps.positions)[0], v, nbrs, k)
        errs.append(np.abs(lap - lap_ex)[: ps.n_interior].max())
    assert loglog_slope(ns, errs) <= 0.3


def test_morris_with_unit_coefficient_is_laplacian():
    ps, nbrs, k, v = setup(8, dim=2, dist="perturbed", seed=1)
    f = np.exp(ps.positions[:, 0])
    np.testing.assert_allclose(ops.sph_morris_all(f, np.ones(ps.n_total), v, nbrs, k),
                               ops.sph_laplacian_all(f, v, nbrs, k), rtol=1e-13, atol=1e-12)
    with pytest.raises(ValueError):
        ops.sph_morris_all(f, np.zeros(ps.n_total), v, nbrs, k)


def test_divergence_is_trace_of_gradient():
    ps, nbrs, k, v = setup(8, dim=2, dist="perturbed", seed=1)
    A = np.column_stack([np.sin(ps.positions[:, 0]), ps.positions[:, 0] * ps.positions[:, 1]])
    div = ops.sph_divergence_all(A, v, nbrs, k)
    tr = ops.sph_gradient_all(A[:, 0], v, nbrs, k)[:, 0] + ops.sph_gradient_all(A[:, 1], v, nbrs, k)[:, 1]
    np.testing.assert_allclose(div, tr, rtol=1e-12, atol=1e-12)


def test_single_particle_versions_match_batch():
    ps, nbrs, k, v = setup(8, dim=2, dist="perturbed", seed=5)
    f = np.sin(3 * ps.positions[:, 0]) * ps.positions[:, 1]
    a = 1 + ps.positions[:, 0] ** 2
    batch = (ops.sph_function_all(f, v, nbrs, k), ops.sph_gradient_all(f, v, nbrs, k),
             ops.sph_laplacian_all(f, v, nbrs, k), ops.sph_morris_all(f, a, v, nbrs, k))
    for i in (0, 13, ps.n_interior - 1):
        assert ops.sph_function(i, f, v, nbrs, k) == pytest.approx(batch[0][i], rel=1e-13)
        np.testing.assert_allclose(ops.sph_gradient(i, f, v, nbrs, k), batch[1][i], rtol=1e-13, atol=1e-13)
        assert ops.sph_laplacian(i, f, v, nbrs, k) == pytest.approx(batch[2][i], rel=1e-12, abs=1e-12)
        assert ops.sph_morris(i, f, a, v, nbrs, k) == pytest.approx(batch[3][i], rel=1e-12, abs=1e-12)


def test_field_length_checked():
    ps, nbrs, k, v = setup(8)
    with pytest.raises(ValueError):
        ops.sph_gradient_all(np.zeros(3), v, nbrs, k)
    with pytest.raises(ValueError):
        ops.pair_geometry(nbrs, k.with_h(2 * k.h))


# ---------------------------------------------------------------- linearity

@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_operators_are_linear(a, b, seed):
    ps, nbrs, k, v = _linear_case()
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=(2, ps.n_total))
    W = _linear_weights()
    for op in (lambda u: ops.sph_gradient_all(u, v, nbrs, k), lambda u: ops.sph_laplacian_all(u, v, nbrs, k),
               lambda u: ops.sph_laplacian_all(u, ops.pair_volumes(W.values), nbrs, k),
               lambda u: vrsph_morris_all(u, 1 + ps.positions[:, 0] ** 2, W, nbrs, k),
               lambda u: ops.fpm_all(u, v, nbrs, k, particles=np.arange(ps.n_interior))[1]):
        lhs = op(a * f + b * g)
        rhs = a * op(f) + b * op(g)
        scale = 1 + np.abs(op(f)).max() * abs(a) + np.abs(op(g)).max() * abs(b)
        assert np.abs(lhs - rhs).max() <= 1e-12 * scale


_LIN = {}


def _linear_case():
    if "case" not in _LIN:
        _LIN["case"] = setup(8, dim=2, dist="perturbed", seed=2)
    return _LIN["case"]


def _linear_weights():
    if "w" not in _LIN:
        ps, nbrs, k, _ = _linear_case()
        _LIN["w"] = reconstruct_volumes(ps, nbrs, k, Mode.LAPLACIAN)
    return _LIN["w"]


# ---------------------------------------------------------------- FPM

@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.integers(0, 50))
def test_fpm_first_order_exact_for_linear(c, seed):
    ps, nbrs, k, v = setup(6, dim=2, dist="perturbed", seed=seed)
    f = c[0] + c[1] * ps.positions[:, 0] + c[2] * ps.positions[:, 1]
    fi, g = ops.fpm_all(f, v, nbrs, k, particles=np.arange(ps.n_interior))
    scale = 1 + max(abs(t) for t in c)
    np.testing.assert_allclose(fi, f[: ps.n_interior], atol=1e-10 * scale)
    np.testing.assert_allclose(g, np.tile([c[1], c[2]], (ps.n_interior, 1)), atol=1e-9 * scale)


def test_fpm_second_order_symmetric_1d_stencil():
    # three particles at -dx, 0, dx: the quadratic is reproduced exactly
    x = np.array([[-0.1], [0.0], [0.1]])
    nbrs = build_neighbor_table(x, 0.15)
    k = KernelSpec(1, 0.15)
    f = 1 + 2 * x[:, 0] + 3 * x[:, 0] ** 2
    fi, g, H = ops.fpm_second_order(1, f, np.full(3, 0.1), nbrs, k)
    assert fi == pytest.approx(1, abs=1e-12)
    assert g[0] == pytest.approx(2, abs=1e-9)
    assert H[0, 0] == pytest.approx(6, abs=1e-9)


def test_fpm_second_order_exact_for_quadratic_2d():
    ps, nbrs, k, v = setup(8, dim=2, dist="perturbed", seed=7)
    x = ps.positions
    f = 1 + x[:, 0] - 2 * x[:, 1] + 0.5 * x[:, 0] ** 2 + 3 * x[:, 0] * x[:, 1] - x[:, 1] ** 2
    idx = np.arange(ps.n_interior)
    _, g, H = ops.fpm_all(f, v, nbrs, k, second_order=True, particles=idx)
    np.testing.assert_allclose(H[:, 0, 0], 1.0, atol=1e-8)
    np.testing.assert_allclose(H[:, 0, 1], 3.0, atol=1e-8)
    np.testing.assert_allclose(H[:, 1, 1], -2.0, atol=1e-8)
    fi, g1, H1 = ops.fpm_second_order(3, f, v, nbrs, k)
    np.testing.assert_allclose(H1, H[3], atol=1e-10)


def test_fpm_perturbed_gradient_first_order():
    ns, errs = [16, 32, 64], []
    for n in ns:
        ps, nbrs, k, v = setup(n, dim=1, dist="perturbed", seed=0)
        f, grad_ex, _ = sample_field(ps.positions)
        _, g = ops.fpm_all(f, v, nbrs, k, particles=np.arange(ps.n_interior))
        errs.append(np.abs(g - grad_ex[: ps.n_interior]).max())
    assert 0.7 <= loglog_slope(ns, errs) <= 1.3


def test_fpm_singular_system_detected():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]])  # collinear: y-moments vanish
    nbrs = build_neighbor_table(x, 0.25)
    k = KernelSpec(2, 0.25)
    with pytest.raises(ops.SingularMomentMatrix):
        ops.fpm_first_order(1, np.zeros(3), np.ones(3), nbrs, k)
    with pytest.raises(ops.SingularMomentMatrix):
        ops.fpm_all(np.zeros(3), np.ones(3), nbrs, k)


# ---------------------------------------------------------------- VRSPH function mode

def test_vrsph_function_reproduces_linear_fields():
    ps, nbrs, k, _ = setup(8, dim=2, dist="perturbed", seed=3)
    W = reconstruct_volumes(ps, nbrs, k, Mode.FUNCTION)
    f = 2 + ps.positions[:, 0] - ps.positions[:, 1]
    ok = W.residuals[: ps.n_interior] <= 1e-11
    got = vrsph_function_all(f, W, nbrs, k)[: ps.n_interior]
    np.testing.assert_allclose(got[ok], f[: ps.n_interior][ok], atol=1e-9)


def test_kernel_helpers_consistent_with_pair_geometry():
    ps, nbrs, k, _ = setup(5, dim=2, dist="perturbed", seed=3)
    g = ops.pair_geometry(nbrs, k)
    np.testing.assert_allclose(g.w, eval_w(g.xij, k), rtol=1e-14)
    assert np.all(g.radial <= 0)
