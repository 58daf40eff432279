import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import all_pairs_neighbors, empty_circumcircle_violations

from vrsph.geometry import (BOUNDARY, INTERIOR, VIRTUAL, Box, GeometryError, ParticleSet, SimplicialMesh,
                            build_neighbor_table, covering_radius_oracle, delaunay_2d, estimate_covering_radius,
                            generate_perturbed, generate_random, generate_triangle_centroids, generate_uniform,
                            read_particles_csv, read_triangle_mesh, smoothing_length, write_particles_csv,
                            write_triangle_mesh)


# ---------------------------------------------------------------- generators

def test_uniform_cell_centres_1d():
    ps = generate_uniform(3, (0.0, 1.0))
    np.testing.assert_allclose(ps.positions[:, 0], [1 / 6, 1 / 2, 5 / 6])
    assert ps.delta_x == pytest.approx(1 / 3)
    assert ps.n_interior == 3


def test_uniform_2d_count_and_spacing():
    ps = generate_uniform(2, ((0.0, 1.0), (0.0, 1.0)))
    assert ps.n_total == 4 and ps.delta_x == pytest.approx(0.5)


def test_virtual_layers_pad_interior_supports():
    ps = generate_uniform(8, Box.cube(-1.0, 1.0, 2), virtual_layers=3, layout="node")
    h = 3 * ps.delta_x
    nbrs = build_neighbor_table(ps, h)
    # every interior support is a full lattice disc
    counts = nbrs.counts[: ps.n_interior]
    assert counts.min() == counts.max()


def test_node_layout_kinds():
    ps = generate_uniform(4, Box.cube(0.0, 1.0, 2), virtual_layers=1, layout="node")
    assert np.sum(ps.kind == INTERIOR) == 9
    assert np.sum(ps.kind == BOUNDARY) == 16
    assert np.sum(ps.kind == VIRTUAL) == 7**2 - 25
    assert np.all(ps.kind[: ps.n_interior] == INTERIOR)


def test_perturbed_zero_amplitude_is_uniform():
    a = generate_uniform(6, Box.cube(0.0, 1.0, 2), layout="node")
    b = generate_perturbed(6, Box.cube(0.0, 1.0, 2), amplitude=0.0, seed=3, layout="node")
    np.testing.assert_array_equal(a.positions, b.positions)


def test_perturbed_is_deterministic():
    a = generate_perturbed(16, Box.cube(0.0, 1.0, 2), amplitude=0.5, seed=11)
    b = generate_perturbed(16, Box.cube(0.0, 1.0, 2), amplitude=0.5, seed=11)
    assert a.positions.tobytes() == b.positions.tobytes()


def test_perturbation_bounded_and_boundary_tangential():
    box = Box.cube(0.0, 1.0, 2)
    ref = generate_uniform(10, box, layout="node")
    ps = generate_perturbed(10, box, amplitude=0.5, seed=2, layout="node")
    # kinds sort identically, so rows correspond
    shift = np.abs(ps.positions - ref.positions)
    assert shift.max() <= 0.5 * ps.delta_x + 1e-15
    b = ps.kind == BOUNDARY
    on_box = np.isclose(ps.positions[b], 0.0) | np.isclose(ps.positions[b], 1.0)
    assert np.all(on_box.any(axis=1))


def test_frozen_layers_and_fixed_boundary():
    box = Box.cube(0.0, 1.0, 2)
    ref = generate_uniform(10, box, layout="node")
    ps = generate_perturbed(10, box, amplitude=0.5, seed=2, layout="node", boundary="fixed", frozen_layers=2)
    moved = np.any(ps.positions != ref.positions, axis=1)
    depth = np.min(np.minimum(ref.positions, 1 - ref.positions), axis=1) / ref.delta_x
    assert not moved[depth < 2.5].any()
    assert moved[depth > 2.5].all()


def test_rejects_large_amplitude():
    with pytest.raises(ValueError):
        generate_perturbed(8, amplitude=0.6)


@given(st.integers(0, 10_000))
def test_perturbed_covering_radius_bound(seed):
    ps = generate_perturbed(8, Box.cube(0.0, 1.0, 2), amplitude=0.5, seed=seed, layout="node")
    assert covering_radius_oracle(ps, ps.delta_x / 8) <= math.sqrt(2) * ps.delta_x


def test_random_cloud_has_boundary_nodes():
    ps = generate_random(8, Box.cube(0.0, 1.0, 2), seed=0)
    assert ps.n_interior == 49 and np.sum(ps.kind == BOUNDARY) == 32


def test_particle_csv_roundtrip(tmp_path):
    ps = generate_perturbed(5, Box.cube(0.0, 1.0, 2), seed=1, layout="node")
    write_particles_csv(ps, tmp_path / "p.csv")
    back = read_particles_csv(tmp_path / "p.csv", box=ps.box)
    np.testing.assert_array_equal(back.positions, ps.positions)
    np.testing.assert_array_equal(back.kind, ps.kind)


# ---------------------------------------------------------------- meshes

def test_triangle_centroids():
    m = SimplicialMesh([[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 1, 2], [1, 3, 2]])
    ps = generate_triangle_centroids(m)
    np.testing.assert_allclose(sorted(map(tuple, ps.positions)), [(1 / 3, 1 / 3), (2 / 3, 2 / 3)])


def test_degenerate_triangle_rejected():
    m = SimplicialMesh([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]])
    with pytest.raises(GeometryError):
        generate_triangle_centroids(m)


def test_mesh_file_roundtrip(tmp_path):
    m = delaunay_2d(np.random.default_rng(0).random((30, 2)))
    write_triangle_mesh(m, tmp_path / "n.txt", tmp_path / "e.txt")
    back = read_triangle_mesh(tmp_path / "n.txt", tmp_path / "e.txt")
    assert len(generate_triangle_centroids(back, Box.cube(-1, 2, 2))) == len(m.simplices)


def test_delaunay_square_and_triangle():
    sq = delaunay_2d([[0, 0], [1, 0], [0, 1], [1, 1]])
    assert len(sq.simplices) == 2 and sq.l_max == pytest.approx(math.sqrt(2))
    assert len(delaunay_2d([[0, 0], [1, 0], [0, 1]]).simplices) == 1


@pytest.mark.parametrize("seed", range(5))
def test_delaunay_empty_circumcircle_bruteforce(seed):
    pts = np.random.default_rng(seed).random((50, 2))
    m = delaunay_2d(pts)
    assert empty_circumcircle_violations(pts, m.simplices) == 0
    # Euler: a triangulation of points in general position has 2n - 2 - hull triangles
    from scipy.spatial import ConvexHull
    assert len(m.simplices) == 2 * 50 - 2 - len(ConvexHull(pts).vertices)


def test_delaunay_matches_scipy_on_generic_points():
    from scipy.spatial import Delaunay
    pts = np.random.default_rng(7).random((200, 2))
    ours = {tuple(sorted(t)) for t in delaunay_2d(pts).simplices.tolist()}
    ref = {tuple(sorted(t)) for t in Delaunay(pts).simplices.tolist()}
    assert ours == ref


def test_delaunay_errors():
    with pytest.raises(GeometryError):
        delaunay_2d([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(GeometryError):
        delaunay_2d([[0, 0], [1, 0], [0, 1], [1, 0]])


# ---------------------------------------------------------------- covering radius

def test_covering_radius_1d_analytic():
    ps = ParticleSet(np.array([[0.5], [0.0], [1.0]]), 1, Box((0.0,), (1.0,)), 1 / 3,
                     np.array([INTERIOR, BOUNDARY, BOUNDARY]))
    assert estimate_covering_radius(ps) == pytest.approx(0.25)
    assert covering_radius_oracle(ps, 1e-3) == pytest.approx(0.25, abs=1e-3)


def test_covering_radius_cell_lattice():
    s = 1 / 8
    ps = generate_uniform(8, Box.cube(0.0, 1.0, 2))
    assert covering_radius_oracle(ps, s / 32) == pytest.approx(s * math.sqrt(2) / 2, abs=s / 32)


def test_covering_radius_single_particle():
    ps = ParticleSet(np.array([[0.5, 0.5]]), 1, Box.cube(0.0, 1.0, 2), 1.0, np.array([INTERIOR]))
    assert covering_radius_oracle(ps, 1e-2) == pytest.approx(math.sqrt(2) / 2)


def test_oracle_monotone_in_resolution():
    ps = generate_random(6, Box.cube(0.0, 1.0, 2), seed=3)
    vals = [covering_radius_oracle(ps, r) for r in (0.1, 0.05, 0.025, 0.0125)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_estimate_within_factor_two_of_oracle(seed):
    ps = generate_random(12, Box.cube(0.0, 1.0, 2), seed=seed)
    est = estimate_covering_radius(ps)
    orc = covering_radius_oracle(ps, ps.delta_x / 20)
    assert 0.5 <= est / orc <= 2.0


def test_estimate_too_few_particles():
    ps = ParticleSet(np.array([[0.2, 0.2], [0.8, 0.8]]), 2, Box.cube(0.0, 1.0, 2), 0.5,
                     np.array([INTERIOR, INTERIOR]))
    with pytest.raises(GeometryError):
        estimate_covering_radius(ps)


def test_smoothing_length_branches():
    assert smoothing_length(0.1, 3, 0.05) == pytest.approx(0.3)
    assert smoothing_length(0.1, 3, 0.2) == pytest.approx(0.6)
    assert smoothing_length(generate_uniform(10), 3) == pytest.approx(0.3)


# ---------------------------------------------------------------- neighbours

def test_pair_at_distance_h_is_excluded():
    t = build_neighbor_table(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.9]]), 1.0)
    assert t.neighbors(0).tolist() == [2]


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_neighbors_equal_all_pairs(backend):
    pos = np.random.default_rng(0).random((500, 2))
    t = build_neighbor_table(pos, 0.07, backend=backend)
    ref = all_pairs_neighbors(pos, 0.07)
    assert [set(t.neighbors(i).tolist()) for i in range(500)] == ref
    assert t.is_symmetric()


@given(st.integers(1, 3), st.integers(2, 60), st.floats(0.05, 0.6), st.integers(0, 2**31 - 1), st.booleans())
def test_neighbors_property(dim, n, h, seed, periodic):
    pos = np.random.default_rng(seed).random((n, dim))
    period = np.ones(dim) if periodic else None
    if periodic:
        h = min(h, 0.33)  # the cell list needs period >= 3h
    t = build_neighbor_table(pos, h, period=period)
    ref = all_pairs_neighbors(pos, h, period)
    assert [set(t.neighbors(i).tolist()) for i in range(n)] == ref
    for i in range(n):
        nb = t.neighbors(i)
        assert np.all(np.diff(nb) > 0) and i not in nb


def test_short_period_rejected():
    with pytest.raises(ValueError):
        build_neighbor_table(np.random.default_rng(0).random((5, 1)), 0.4, period=[1.0])


def test_backends_identical_on_periodic_strip():
    pos = np.random.default_rng(4).random((300, 2)) * [1.0, 0.3]
    a = build_neighbor_table(pos, 0.08, period=[1.0, 0.0], backend="numba")
    b = build_neighbor_table(pos, 0.08, period=[1.0, 0.0], backend="numpy")
    np.testing.assert_array_equal(a.indptr, b.indptr)
    np.testing.assert_array_equal(a.indices, b.indices)
