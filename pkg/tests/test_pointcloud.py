import numpy as np
import pytest

from hgmesh.mesh_io import MeshError, RawMesh, normalize, triangulate
from hgmesh.pointcloud import (
    BVH,
    PointCloud,
    augment,
    conditioning_cloud,
    fps,
    icosahedron_directions,
    ray_triangle_hits,
    read_ply,
    sample_surface,
    visibility_filter,
    write_ply,
)
from hgmesh.procedural import GeneratorSpec, gen_procedural
from visibility_oracle import brute_visible, nested_boxes


def test_icosahedron_directions():
    d = icosahedron_directions()
    assert d.shape == (20, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    np.testing.assert_allclose(d.sum(axis=0), 0.0, atol=1e-12)
    # every direction has its antipode
    assert np.allclose(np.sort(np.abs(d @ d.T).max(axis=1)), 1.0)


class TestSample:
    def test_square_split_is_binomial(self):
        sq = RawMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float), [(0, 1, 2), (0, 2, 3)])
        n = 10_000
        pts = sample_surface(sq, n, 0).positions
        first = np.sum(pts[:, 0] > pts[:, 1])  # triangle (0,1,2) lies below the diagonal
        assert abs(first - n / 2) <= 3 * np.sqrt(n * 0.25)

    def test_normals_and_determinism(self):
        t = RawMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), [(0, 1, 2)])
        a = sample_surface(t, 100, 7)
        np.testing.assert_allclose(a.normals, np.tile([0, 0, 1.0], (100, 1)))
        assert np.all(a.positions[:, 0] + a.positions[:, 1] <= 1 + 1e-12)
        b = sample_surface(t, 100, 7)
        assert np.array_equal(a.positions, b.positions)

    def test_zero_area(self):
        with pytest.raises(MeshError):
            sample_surface(RawMesh(np.zeros((3, 3)), [(0, 1, 2)]), 10, 0)


class TestVisibility:
    def test_isolated_triangle_all_kept(self):
        t = RawMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), [(0, 1, 2)])
        pts = sample_surface(t, 200, 0)
        assert len(visibility_filter(pts, t)) == 200

    def test_nested_boxes(self):
        mesh, n_outer = nested_boxes()
        outer = RawMesh(mesh.vertices, mesh.faces[:n_outer])
        inner = RawMesh(mesh.vertices, mesh.faces[n_outer:])
        assert len(visibility_filter(sample_surface(inner, 500, 1), mesh)) == 0
        assert len(visibility_filter(sample_surface(outer, 500, 2), mesh)) == 500

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        # overlapping boxes hide part of each other's surfaces
        mesh = triangulate(normalize(gen_procedural(seed, GeneratorSpec(family="box_union"))))[0]
        assert len(mesh.faces) <= 200
        pts = sample_surface(mesh, 150, rng)
        tris = mesh.vertices[mesh.triangles()]
        expected = brute_visible(pts.positions, tris)
        assert 0 < expected.sum() < len(expected)
        bvh = BVH(tris)
        kept = visibility_filter(pts, mesh, bvh=bvh)
        mask = np.isin(pts.positions[:, 0], kept.positions[:, 0])
        assert np.array_equal(mask, expected)

    def test_bvh_matches_linear_scan(self):
        rng = np.random.default_rng(3)
        mesh = triangulate(normalize(gen_procedural(21)))[0]
        tris = mesh.vertices[mesh.triangles()]
        o = rng.uniform(-0.6, 0.6, (300, 3))
        d = rng.normal(size=(300, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        hit = BVH(tris, leaf_size=2).occluded(o, d)
        ref = np.array([ray_triangle_hits(np.tile(oi, (len(tris), 1)), np.tile(di, (len(tris), 1)), tris).any()
                        for oi, di in zip(o, d)])
        assert np.array_equal(hit, ref)


class TestFPS:
    def test_collinear(self):
        pc = PointCloud(np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], 1), np.zeros((10, 3)))
        out = fps(pc, 2, start=0)
        assert sorted(out.positions[:, 0]) == [0, 9]

    def test_identity_when_k_equals_n(self):
        pc = PointCloud(np.random.default_rng(0).normal(size=(30, 3)), np.zeros((30, 3)))
        out = fps(pc, 30, seed=1)
        assert sorted(map(tuple, out.positions)) == sorted(map(tuple, pc.positions))

    def test_too_many(self):
        with pytest.raises(ValueError):
            fps(PointCloud(np.zeros((3, 3)), np.zeros((3, 3))), 4)

    def test_tie_goes_to_lowest_index(self):
        pos = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], float)
        out = fps(PointCloud(pos, np.zeros((3, 3))), 2, start=0)
        assert out.positions[1, 0] == 1

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        pos = rng.normal(size=(200, 3))
        perm = rng.permutation(200)
        a = fps(PointCloud(pos, np.zeros_like(pos)), 20, start=0)
        b = fps(PointCloud(pos[perm], np.zeros_like(pos)), 20, start=int(np.flatnonzero(perm == 0)[0]))
        assert np.array_equal(a.positions, b.positions)

    def test_beats_random_subsets(self):
        rng = np.random.default_rng(5)
        wins = 0
        for _ in range(100):
            pos = rng.uniform(size=(300, 3))
            pc = PointCloud(pos, np.zeros_like(pos))
            f = fps(pc, 32, rng).positions
            r = pos[rng.choice(300, 32, replace=False)]
            wins += _min_pairwise(f) >= _min_pairwise(r)
        assert wins >= 95


def _min_pairwise(p):
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return d[np.triu_indices(len(p), 1)].min()


class TestAugment:
    def cloud(self, n=500):
        rng = np.random.default_rng(0)
        nrm = rng.normal(size=(n, 3))
        return PointCloud(rng.uniform(-0.5, 0.5, (n, 3)), nrm / np.linalg.norm(nrm, axis=1, keepdims=True))

    def test_identity(self):
        c = self.cloud()
        out = augment(c, 0.0, 0.0, 0.0, seed=1)
        assert np.array_equal(out.positions, c.positions) and np.array_equal(out.normals, c.normals)

    def test_zero_normals(self):
        out = augment(self.cloud(), p_zero_normals=1.0, seed=2)
        assert not out.normals.any()

    def test_normals_stay_unit(self):
        out = augment(self.cloud(), p_zero_normals=0.0, seed=3)
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-4)

    def test_noise_statistics(self):
        # per-cloud sigma ~ U(0, 0.1): E[sigma^2] = 0.01 / 3; zero-normal rate 0.5
        c = self.cloud(50)
        n = 10_000
        var, zeros = np.empty(n), 0
        for s in range(n):
            out = augment(c, seed=s)
            d = out.positions - c.positions
            var[s] = d.var()
            zeros += not out.normals.any()
        assert np.sqrt(var).max() <= 0.1 * 1.5  # 150-sample std estimates of sigma <= 0.1
        se = var.std() / np.sqrt(n)
        assert abs(var.mean() - 0.01 / 3) <= 3 * se + 1e-5
        assert abs(zeros - n / 2) <= 3 * np.sqrt(n / 4)


def test_conditioning_cloud_and_ply(tmp_path):
    mesh, _ = nested_boxes()
    cloud = conditioning_cloud(mesh, 128, 0)
    assert len(cloud) == 128
    # every kept point is on the outer box
    assert np.all(np.isclose(np.abs(cloud.positions).max(axis=1), 0.5))
    write_ply(cloud, tmp_path / "c.ply")
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-7)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-7)
