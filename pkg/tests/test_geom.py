"""Geometry kernel tests: rotations, edge geometry, basis, Delaunay, FPS."""

import itertools

import numpy as np
import pytest

from se2gnn import geom


class TestRotationMatrix:
    def test_identity(self):
        r = geom.rotation_matrix(0.0)
        np.testing.assert_allclose(r.apply([1.0, 0.0]), [1.0, 0.0], atol=1e-15)

    def test_quarter_turn(self):
        r = geom.rotation_matrix(np.pi / 2)
        np.testing.assert_allclose(r.apply([1.0, 0.0]), [0.0, 1.0], atol=1e-15)

    def test_composition_law(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a, b = rng.uniform(-10, 10, 2)
            lhs = geom.rotation_matrix(a).matrix() @ geom.rotation_matrix(b).matrix()
            rhs = geom.rotation_matrix(a + b).matrix()
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_unit_norm_and_inverse(self):
        rng = np.random.default_rng(3)
        for theta in rng.uniform(-np.pi, np.pi, 50):
            r = geom.rotation_matrix(theta)
            assert abs(r.cos**2 + r.sin**2 - 1.0) < 1e-12
            v = rng.normal(size=2)
            np.testing.assert_allclose(r.apply_inverse(r.apply(v)), v, atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(geom.GeometryError):
            geom.rotation_matrix(np.nan)


class TestEdgeGeometry:
    def test_x_axis_aligned(self):
        [e] = geom.edge_geometry(np.array([[0.0, 0.0], [1.0, 0.0]]), [(0, 1)])
        assert e.dist == pytest.approx(1.0)
        np.testing.assert_allclose(e.unit_vec, [1.0, 0.0])
        assert e.theta == pytest.approx(0.0)

    def test_y_axis(self):
        [e] = geom.edge_geometry(np.array([[0.0, 0.0], [0.0, 2.0]]), [(0, 1)])
        assert e.dist == pytest.approx(2.0)
        np.testing.assert_allclose(e.unit_vec, [0.0, 1.0])
        assert e.theta == pytest.approx(-np.pi / 2)

    def test_theta_shifts_under_rotation(self):
        # Rotating all positions by beta must shift every theta by -beta mod 2pi.
        rng = np.random.default_rng(11)
        pos = rng.normal(size=(10, 2))
        edges = [(i, j) for i in range(10) for j in range(10) if i != j]
        _, dist0, _, theta0 = geom.edge_arrays(pos, edges)
        for beta in rng.uniform(-np.pi, np.pi, 50):
            rot = geom.rotation_matrix(beta)
            _, dist1, _, theta1 = geom.edge_arrays(rot.apply(pos), edges)
            np.testing.assert_allclose(dist1, dist0, atol=1e-10)
            delta = np.mod(theta1 - (theta0 - beta) + np.pi, 2 * np.pi) - np.pi
            np.testing.assert_allclose(delta, 0.0, atol=1e-10)

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        pos = rng.normal(size=(8, 2))
        edges = [(0, 1), (2, 3), (4, 5)]
        a = geom.edge_arrays(pos, edges)
        b = geom.edge_arrays(pos + np.array([13.7, -2.1]), edges)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, atol=1e-10)

    def test_coincident_nodes_rejected(self):
        pos = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(geom.DegenerateEdgeError, match=r"\(0, 1\)"):
            geom.edge_geometry(pos, [(0, 1)])

    def test_index_out_of_range(self):
        with pytest.raises(geom.GeometryError):
            geom.edge_arrays(np.zeros((2, 2)), [(0, 5)])


class TestGlobalAngles:
    def test_positive_x(self):
        assert geom.global_angles(np.array([[3.0, 0.0]]))[0] == pytest.approx(0.0)

    def test_negative_y(self):
        assert geom.global_angles(np.array([[0.0, -1.0]]))[0] == pytest.approx(np.pi / 2)

    def test_origin_convention(self):
        assert geom.global_angles(np.array([[0.0, 0.0]]))[0] == 0.0

    def test_angle_branch(self):
        # (-pi, pi]: the negative-x direction lands exactly on +pi.
        a = geom.global_angles(np.array([[-2.0, 0.0]]))[0]
        assert a == pytest.approx(np.pi)
        assert -np.pi < a <= np.pi


class TestCenterOfMass:
    def test_single_node(self):
        np.testing.assert_allclose(geom.center_of_mass_zero([[1.0, 1.0]]), [[0.0, 0.0]])

    def test_two_nodes(self):
        out = geom.center_of_mass_zero([[0.0, 0.0], [2.0, 0.0]])
        np.testing.assert_allclose(out, [[-1.0, 0.0], [1.0, 0.0]])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        pos = rng.normal(size=(17, 2)) + 40.0
        once = geom.center_of_mass_zero(pos)
        np.testing.assert_allclose(geom.center_of_mass_zero(once), once, atol=1e-12)
        np.testing.assert_allclose(once.mean(axis=0), 0.0, atol=1e-10)


class TestBesselBasis:
    def test_zero_at_cutoff(self):
        cfg = geom.RadialBasisConfig(n_base=6, cutoff=3.0)
        np.testing.assert_allclose(geom.bessel_basis(3.0, cfg), 0.0, atol=1e-12)

    def test_closed_form_at_half_cutoff(self):
        # Oracle: direct evaluation of sqrt(2/c) sin(n pi r / c) / r at r=1, c=2.
        cfg = geom.RadialBasisConfig(n_base=4, cutoff=2.0)
        expected = np.array([1.0, 0.0, -1.0, 0.0]) * np.sqrt(2.0 / 2.0)
        np.testing.assert_allclose(geom.bessel_basis(1.0, cfg), expected, atol=1e-12)

    def test_continuity(self):
        cfg = geom.RadialBasisConfig(n_base=8, cutoff=2.0)
        rng = np.random.default_rng(9)
        r = rng.uniform(0.01, 2.0, 200)
        jump = geom.bessel_basis(r + 1e-7, cfg) - geom.bessel_basis(r, cfg)
        assert np.abs(jump).max() < 1e-4

    def test_output_length(self):
        for n in (1, 3, 9):
            cfg = geom.RadialBasisConfig(n_base=n, cutoff=1.5)
            assert geom.bessel_basis(0.7, cfg).shape == (n,)
            assert geom.bessel_basis(np.ones(5), cfg).shape == (5, n)

    def test_invalid_config(self):
        with pytest.raises(geom.GeometryError):
            geom.RadialBasisConfig(n_base=0, cutoff=1.0)
        with pytest.raises(geom.GeometryError):
            geom.RadialBasisConfig(n_base=4, cutoff=0.0)


def _circumcircle(a, b, c):
    d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
    uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
    return ux, uy, (a[0] - ux) ** 2 + (a[1] - uy) ** 2


class TestDelaunay:
    def test_single_triangle(self):
        edges = geom.delaunay(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        assert len(edges) == 3

    def test_unit_square(self):
        # Both diagonals are Delaunay for cocircular corners; either way the
        # result is 4 sides plus exactly one diagonal.
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        edges = set(map(tuple, geom.delaunay(pts).tolist()))
        assert len(edges) == 5
        sides = {(0, 1), (0, 2), (1, 3), (2, 3)}
        assert sides <= edges
        diagonal = edges - sides
        assert diagonal in ({(0, 3)}, {(1, 2)})
        for d in diagonal:
            a, b = pts[d[0]], pts[d[1]]
            # brute-force: the two triangles cut by this diagonal have empty
            # circumcircles within tolerance
            others = [k for k in range(4) if k not in d]
            for o in others:
                ux, uy, r2 = _circumcircle(a, b, pts[o])
                rest = [k for k in others if k != o]
                for q in rest:
                    d2 = (pts[q][0] - ux) ** 2 + (pts[q][1] - uy) ** 2
                    assert d2 >= r2 - 1e-9

    def test_empty_circumcircle_200_random(self):
        rng = np.random.default_rng(0)
        pts = rng.random((200, 2))
        tris = geom.delaunay_triangles(pts)
        assert len(tris) > 300
        for i, j, k in tris:
            ux, uy, r2 = _circumcircle(pts[i], pts[j], pts[k])
            d2 = (pts[:, 0] - ux) ** 2 + (pts[:, 1] - uy) ** 2
            d2[[i, j, k]] = np.inf
            assert d2.min() >= r2 - 1e-9

    def test_order_independence(self):
        rng = np.random.default_rng(1)
        pts = rng.random((60, 2))
        base = set(map(tuple, geom.delaunay(pts).tolist()))
        for s in range(20):
            perm = np.random.default_rng(s).permutation(60)
            shuffled = set()
            for i, j in geom.delaunay(pts[perm]).tolist():
                a, b = int(perm[i]), int(perm[j])
                shuffled.add((min(a, b), max(a, b)))
            assert shuffled == base

    def test_collinear_rejected(self):
        pts = np.stack([np.arange(5.0), 2.0 * np.arange(5.0)], axis=1)
        with pytest.raises(geom.TriangulationError):
            geom.delaunay(pts)

    def test_too_few_points(self):
        with pytest.raises(geom.TriangulationError):
            geom.delaunay(np.array([[0.0, 0.0], [1.0, 1.0]]))


class TestFurthestPointSampling:
    def test_k_equals_n_is_permutation(self):
        rng = np.random.default_rng(4)
        pts = rng.random((12, 2))
        idx = geom.furthest_point_sampling(pts, 12, seed=0)
        assert sorted(idx.tolist()) == list(range(12))

    def test_unique_maximizer_on_line(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [10.0, 0.0]])
        # find a seed whose first uniform pick is index 0
        seed = next(s for s in range(100) if np.random.default_rng(s).integers(4) == 0)
        idx = geom.furthest_point_sampling(pts, 2, seed=seed)
        assert idx[0] == 0 and idx[1] == 3

    def test_matches_greedy_oracle(self):
        rng = np.random.default_rng(8)
        pts = rng.random((100, 2))
        idx = geom.furthest_point_sampling(pts, 3, seed=21)
        # exhaustive greedy oracle with the same first pick
        first = int(np.random.default_rng(21).integers(100))
        chosen = [first]
        for _ in range(2):
            best, best_d = None, -1.0
            for cand in range(100):
                if cand in chosen:
                    continue
                d = min(np.sum((pts[cand] - pts[c]) ** 2) for c in chosen)
                if d > best_d:
                    best, best_d = cand, d
            chosen.append(best)
        assert idx.tolist() == chosen

    def test_deterministic(self):
        pts = np.random.default_rng(0).random((30, 2))
        a = geom.furthest_point_sampling(pts, 7, seed=5)
        b = geom.furthest_point_sampling(pts, 7, seed=5)
        assert (a == b).all()

    def test_k_out_of_range(self):
        with pytest.raises(geom.GeometryError):
            geom.furthest_point_sampling(np.zeros((3, 2)), 4, seed=0)


class TestGraph2D:
    def test_build_centers_and_angles(self):
        g = geom.Graph2D.build([[0.0, 0.0], [2.0, 0.0]], [(0, 1), (1, 0)])
        np.testing.assert_allclose(g.positions.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(g.global_angles, [np.pi, 0.0])
        np.testing.assert_allclose(g.boundary_normals, 0.0)

    def test_bidirectional_edges_from_delaunay(self):
        rng = np.random.default_rng(10)
        g = geom.Graph2D.from_delaunay(rng.random((20, 2)))
        pairs = set(map(tuple, g.edges.tolist()))
        assert all((j, i) in pairs for i, j in pairs)

    def test_complete_graph(self):
        g = geom.Graph2D.complete(np.random.default_rng(1).random((4, 2)))
        assert len(g.edges) == 12
