import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadnerf import meshing as M
from quadnerf.errors import InvalidArgument, UndefinedMetric
from quadnerf.evaluate import silhouette_iou


@pytest.fixture(scope="module")
def sphere_mesh():
    pts = M.grid_points(128)
    return M.marching_cubes(np.linalg.norm(pts, axis=-1) - 0.5)


def brute_chamfer(p, g):
    d = np.linalg.norm(p[:, None] - g[None], axis=-1)
    return 0.5 * (d.min(1).mean() + d.min(0).mean()), d


class TestMarchingCubes:
    def test_sphere_radius_and_topology(self, sphere_mesh):
        cell = 2.0 / 127
        radial = np.abs(np.linalg.norm(sphere_mesh.vertices, axis=1) - 0.5)
        assert radial.max() < 2 * cell
        assert sphere_mesh.euler_characteristic() == 2

    def test_sign_free_field_is_empty(self):
        assert M.marching_cubes(np.ones((16, 16, 16))).is_empty
        assert M.marching_cubes(-np.ones((16, 16, 16))).is_empty

    def test_bad_grid(self):
        with pytest.raises(InvalidArgument):
            M.marching_cubes(np.ones((4, 4, 4)))

    def test_axis_convention(self):
        # a plane x = 0.25: vertex x coordinates must all sit there
        pts = M.grid_points(33)
        mesh = M.marching_cubes(pts[..., 0] - 0.25)
        assert np.allclose(mesh.vertices[:, 0], 0.25, atol=1e-12)

    def test_obj_round_trip(self, sphere_mesh, tmp_path):
        m = M.TriMesh(sphere_mesh.vertices, sphere_mesh.faces, colors=np.full_like(sphere_mesh.vertices, 0.5))
        m.save_obj(tmp_path / "m.obj")
        back = M.TriMesh.load_obj(tmp_path / "m.obj")
        assert np.array_equal(back.vertices, m.vertices)
        assert np.array_equal(back.faces, m.faces)
        assert np.array_equal(back.colors, m.colors)


class TestSurfaceSampling:
    def test_samples_lie_on_sphere(self, sphere_mesh):
        p = M.sample_surface(sphere_mesh, 5000, seed=1)
        assert np.abs(np.linalg.norm(p, axis=1) - 0.5).max() < 2.0 / 127

    def test_uniform_over_area(self):
        # two unit triangles, one with 3x the area
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 1, 0]], float)
        mesh = M.TriMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
        p = M.sample_surface(mesh, 20000, seed=0)
        frac = (p[:, 0] >= 10).mean()
        assert abs(frac - 0.75) < 4 * math.sqrt(0.75 * 0.25 / 20000)

    def test_empty_raises(self):
        with pytest.raises(UndefinedMetric):
            M.sample_surface(M.TriMesh.empty())


class TestShapeMetrics:
    def test_chamfer_and_f_brute_force(self):
        rng = np.random.default_rng(0)
        p, g = rng.normal(size=(500, 3)), rng.normal(size=(500, 3)) + 0.1
        cd, d = brute_chamfer(p, g)
        assert M.chamfer(p, g, align=False) == pytest.approx(cd, rel=1e-12)
        tau = 0.3
        prec, rec = (d.min(1) < tau).mean(), (d.min(0) < tau).mean()
        assert M.f_score(p, g, threshold=tau, align=False) == pytest.approx(100 * 2 * prec * rec / (prec + rec), rel=1e-12)

    def test_identical_sets(self):
        p = np.random.default_rng(1).normal(size=(300, 3))
        assert M.chamfer(p, p, align=False) == 0
        assert M.f_score(p, p, threshold=1e-6, align=False) == 100.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_symmetry_and_scaling(self, seed, k):
        rng = np.random.default_rng(seed)
        p, g = rng.normal(size=(80, 3)), rng.normal(size=(90, 3))
        a = M.chamfer(p, g, align=False)
        assert a == pytest.approx(M.chamfer(g, p, align=False), rel=1e-12)
        assert M.chamfer(k * p, k * g, align=False) == pytest.approx(k * a, rel=1e-9)

    def test_alignment_removes_similarity(self, sphere_mesh):
        g = M.sample_surface(sphere_mesh, 2000, seed=0)
        # an ellipsoid so the rotation is observable; ICP is local, so keep it moderate
        g = g * np.array([1.0, 0.6, 0.3])
        c, s = math.cos(0.3), math.sin(0.3)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        p = 1.7 * g @ R.T + np.array([0.3, -0.2, 0.5])
        assert M.chamfer(p, g, align=True) < 1e-9
        assert M.chamfer(p, g, align=False) > 0.1

    def test_empty_meshes_raise(self, sphere_mesh):
        with pytest.raises(UndefinedMetric):
            M.chamfer(M.TriMesh.empty(), sphere_mesh)
        with pytest.raises(UndefinedMetric):
            M.f_score(sphere_mesh, M.TriMesh.empty())

    def test_default_threshold(self, sphere_mesh):
        assert M.default_threshold(sphere_mesh) == pytest.approx(0.02 * sphere_mesh.bbox_longest_edge())


class TestImageMetrics:
    def test_psnr(self):
        a = np.zeros((8, 8, 3))
        assert M.psnr(a, a) == 100.0
        assert M.psnr(a, a + 0.5) == pytest.approx(20 * math.log10(2), abs=1e-12)
        assert M.psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-4)
        assert M.psnr(a, a + 1e-9) == 100.0

    def test_ssim_identity_and_degradation(self):
        img = np.random.default_rng(0).random((32, 32, 3))
        assert M.ssim(img, img) == pytest.approx(1.0, abs=1e-12)
        assert M.ssim(img, np.clip(img + 0.2 * np.random.default_rng(1).normal(size=img.shape), 0, 1)) < 0.9

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            M.image_metrics(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_iou(self):
        a = np.zeros((4, 4))
        a[:2] = 1
        b = np.zeros((4, 4))
        b[1:3] = 1
        assert silhouette_iou(a, b) == pytest.approx(1 / 3)
        assert silhouette_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_metric_report_round_trip(tmp_path):
    r = M.MetricReport(1.25, 80.0, 25.5, 0.9, {"IoU": 0.8})
    r.write(tmp_path / "m.txt")
    back = M.MetricReport.read(tmp_path / "m.txt")
    assert back == r
