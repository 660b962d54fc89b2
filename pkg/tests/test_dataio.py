import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadnerf import dataio as D
from quadnerf.errors import BehindCamera, GenerationError, InvalidArgument, LoadError
from quadnerf.synthetic import SyntheticScene, camera_for, generate_synthetic, pixel_grid


def write_video(root, name, frames, size=(6, 5), flow_frames=None, poses=True):
    """Hand-built video: constant images, flow written for ``flow_frames``."""
    vdir = root / name
    for sub in ("rgb", "mask", "flow", "cse"):
        (vdir / sub).mkdir(parents=True, exist_ok=True)
    h, w = size
    flow_frames = range(frames) if flow_frames is None else flow_frames
    for i in range(frames):
        D.write_rgb(vdir / "rgb" / f"{i:05d}.png", np.full((h, w, 3), i / 10))
        mask = np.zeros((h, w))
        mask[2:4, 1:3] = 1
        D.write_mask(vdir / "mask" / f"{i:05d}.png", mask)
        if i in flow_frames:
            D.write_flow(vdir / "flow" / f"{i:05d}.bin", np.full((h, w, 2), 0.25 * i))
    ext = [np.concatenate([np.eye(3), [[0], [0], [2.0 + i]]], 1) for i in range(frames)] if poses else []
    D.write_camera(vdir / "camera.txt", D.CameraModel(10, 10, w / 2, h / 2, ext))
    return vdir


@pytest.fixture
def two_videos(tmp_path):
    write_video(tmp_path, "a", 3)
    write_video(tmp_path, "b", 2)
    return tmp_path


class TestLoad:
    def test_two_video_fixture(self, two_videos):
        coll = D.load_dataset(two_videos)
        assert coll.num_frames == 5
        assert [f.global_index for f in coll.frames] == list(range(5))
        assert coll.video_ids().tolist() == [0, 0, 0, 1, 1]
        assert [g for g in range(5) if coll.frames[g].flow_to_next is None] == [2, 4]
        assert [coll.is_video_final(g) for g in range(5)] == [False, False, True, False, True]
        assert coll.frames[4].init_root_pose[2, 3] == 3.0
        assert coll.frames[1].flow_to_next[0, 0, 0] == 0.25
        assert coll.frames[0].cse_points is None

    def test_missing_optional_rasters(self, tmp_path):
        write_video(tmp_path, "a", 3, flow_frames=[0], poses=False)
        coll = D.load_dataset(tmp_path)
        assert coll.frames[1].flow_to_next is None
        assert coll.frames[0].init_root_pose is None
        assert np.array_equal(coll.init_poses()[0], np.eye(4)[:3])

    def test_empty_directory(self, tmp_path):
        with pytest.raises(LoadError):
            D.load_dataset(tmp_path)
        with pytest.raises(LoadError):
            D.load_dataset(tmp_path / "nope")

    def test_non_contiguous_numbering(self, two_videos):
        (two_videos / "a" / "rgb" / "00001.png").rename(two_videos / "a" / "rgb" / "00007.png")
        with pytest.raises(LoadError, match="contiguous"):
            D.load_dataset(two_videos)

    def test_dimension_mismatch_names_file(self, two_videos):
        D.write_rgb(two_videos / "b" / "rgb" / "00001.png", np.zeros((7, 5, 3)))
        with pytest.raises(LoadError, match="00001.png"):
            D.load_dataset(two_videos)

    def test_flow_dimension_mismatch(self, two_videos):
        D.write_flow(two_videos / "a" / "flow" / "00000.bin", np.zeros((3, 3, 2)))
        with pytest.raises(LoadError, match="00000.bin"):
            D.load_dataset(two_videos)

    def test_unreadable_file(self, two_videos):
        (two_videos / "a" / "rgb" / "00002.png").write_bytes(b"not a png")
        with pytest.raises(LoadError, match="00002.png"):
            D.load_dataset(two_videos)

    def test_missing_mask_and_camera(self, two_videos):
        (two_videos / "b" / "mask" / "00000.png").unlink()
        with pytest.raises(LoadError, match="mask"):
            D.load_dataset(two_videos)
        (two_videos / "a" / "camera.txt").unlink()
        with pytest.raises(LoadError, match="camera"):
            D.load_dataset(two_videos)

    def test_pose_count_mismatch(self, two_videos):
        cam = D.read_camera(two_videos / "a" / "camera.txt")
        cam.extrinsics = cam.extrinsics[:2]
        D.write_camera(two_videos / "a" / "camera.txt", cam)
        with pytest.raises(LoadError):
            D.load_dataset(two_videos)

    def test_bad_magic_and_truncation(self, tmp_path):
        D.write_flow(tmp_path / "f.bin", np.zeros((2, 2, 2)))
        data = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "g.bin").write_bytes(data[:-1])
        with pytest.raises(LoadError):
            D.read_flow(tmp_path / "g.bin")
        with pytest.raises(LoadError):
            D.read_cse(tmp_path / "f.bin")

    def test_flow_header_layout(self, tmp_path):
        D.write_flow(tmp_path / "f.bin", np.array([[[1.5, -2.0]]]))
        raw = (tmp_path / "f.bin").read_bytes()
        assert raw == b"QNFLOW01" + (1).to_bytes(4, "little") * 2 + np.array([1.5, -2.0], "<f4").tobytes()

    def test_cse_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(3, 4, 3)).astype(np.float32)
        valid = np.arange(12).reshape(3, 4) % 3 == 0
        D.write_cse(tmp_path / "c.bin", pts, valid)
        p, v = D.read_cse(tmp_path / "c.bin")
        assert np.array_equal(p, pts) and np.array_equal(v, valid)

    def test_mask_threshold_and_dilation(self, tmp_path):
        D.write_mask(tmp_path / "m.png", np.array([[0.49, 0.5], [1.0, 0.0]]))
        assert D.read_mask(tmp_path / "m.png").tolist() == [[False, True], [True, False]]
        m = np.zeros((11, 11), bool)
        m[5, 5] = True
        assert D.dilate(m, 2).sum() == 13
        assert np.array_equal(D.dilate(m, 0), m)


class TestProjection:
    def test_examples(self):
        cam = D.CameraModel(1, 1, 0, 0)
        assert D.project(cam, 0, [0, 0, 1]).tolist() == [0, 0]
        assert D.project(cam, 0, [1, 0, 1]).tolist() == [1, 0]

    def test_behind_camera(self):
        cam = D.CameraModel(1, 1, 0, 0)
        with pytest.raises(BehindCamera):
            D.project(cam, 0, [0, 0, -1])
        with pytest.raises(BehindCamera):
            D.project(cam, 0, [0, 0, 0])

    def test_bad_focal(self):
        with pytest.raises(InvalidArgument):
            D.CameraModel(0, 1, 0, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 100_000))
    def test_matrix_oracle_and_unproject(self, seed):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        q *= np.sign(np.linalg.det(q))
        pose = np.concatenate([q, [[0.1], [-0.2], [5.0]]], 1)
        cam = D.CameraModel(*rng.uniform(50, 200, 2), *rng.uniform(0, 64, 2), extrinsics=[pose])
        x = rng.uniform(-1, 1, size=(10, 3))
        hom = (cam.matrix() @ pose @ np.concatenate([x, np.ones((10, 1))], 1).T).T
        assert np.allclose(D.project(cam, 0, x), hom[:, :2] / hom[:, 2:], rtol=0, atol=1e-10)
        depth = (x @ q.T + pose[:, 3])[:, 2]
        assert np.abs(D.unproject(cam, 0, D.project(cam, 0, x), depth) - x).max() < 1e-10

    def test_bilinear(self):
        r = np.arange(12, dtype=float).reshape(3, 4, 1)
        assert D.bilinear(r, np.array([[0.5, 0.5]]))[0, 0] == 0
        assert D.bilinear(r, np.array([[1.0, 1.0]]))[0, 0] == pytest.approx(2.5)
        assert D.bilinear(r, np.array([[3.5, 2.5]]))[0, 0] == 11
        assert D.bilinear(r, np.array([[-5.0, 9.0]]))[0, 0] == 8


@pytest.fixture(scope="module")
def capsule(tmp_path_factory):
    root = tmp_path_factory.mktemp("capsule")
    scene = SyntheticScene()
    recs = generate_synthetic(scene, root, videos=2, frames=3, size=32, mesh_resolution=48)
    return scene, root, recs


class TestSynthetic:
    def test_round_trip_bit_exact(self, capsule):
        _, root, recs = capsule
        coll = D.load_dataset(root, dilation=0)
        assert coll.num_frames == 6
        for obs in coll.frames:
            rec = recs[coll.videos[obs.video].name][obs.index]
            assert np.array_equal(obs.rgb, rec.rgb)
            assert np.array_equal(obs.mask, rec.mask)
            assert np.array_equal(obs.cse_points, rec.cse_points)
            assert np.array_equal(obs.cse_valid, rec.cse_valid)
            assert np.array_equal(obs.init_root_pose, rec.pose)
            if rec.flow is None:
                assert obs.flow_to_next is None
            else:
                assert np.array_equal(obs.flow_to_next, rec.flow)
        assert [g for g in range(6) if coll.frames[g].flow_to_next is None] == [2, 5]

    def test_cse_on_canonical_surface(self, capsule):
        scene, _, recs = capsule
        for frames in recs.values():
            for r in frames:
                pts = r.cse_points[r.cse_valid].astype(np.float64)
                assert len(pts) > 20
                assert np.abs(scene.canonical_sdf(pts)).max() < 1e-6
                assert np.array_equal(r.cse_valid, r.mask)

    def test_flow_matches_finite_difference(self, capsule):
        scene, _, recs = capsule
        size = 32
        cam = camera_for(scene, size)
        pix = pixel_grid(size)

        def proj(v, s, x):
            y = scene.to_camera(v, s, x)
            return np.stack([cam.fx * y[:, 0] / y[:, 2] + cam.cx, cam.fy * y[:, 1] / y[:, 2] + cam.cy], -1)

        K, h = 20, 1e-4
        for v, name in enumerate(sorted(recs)):
            for i, r in enumerate(recs[name][:-1]):
                x = r.cse_points[r.mask].astype(np.float64)
                disp = np.zeros((len(x), 2))
                for k in range(K):
                    s = i + (k + 0.5) / K
                    disp += (proj(v, s + h, x) - proj(v, s - h, x)) / (2 * h) / K
                err = np.abs(r.flow[r.mask] - disp).max()
                assert err < 0.05, (name, i, err)
                # the generator's pixel is where the stored point projects
                assert np.abs(proj(v, i, x) - pix[r.mask]).max() < 1e-3

    def test_gt_meshes_written(self, capsule):
        from quadnerf.meshing import TriMesh

        _, root, recs = capsule
        m = TriMesh.load_obj(root / "video01" / "gt" / "00002.obj")
        assert np.allclose(m.vertices, recs["video01"][2].gt_mesh.vertices)
        assert (root / "gt_canonical.obj").exists()

    def test_static_sphere_zero_flow(self, tmp_path):
        recs = generate_synthetic(SyntheticScene(shape="sphere", static=True), tmp_path, 1, 3, 24, 32)
        for r in recs["video00"][:-1]:
            assert r.mask.any()
            assert np.all(r.flow == 0)

    def test_camera_translation_flow(self, tmp_path):
        shift = np.array([0.01, -0.02, 0.0])
        radius = 0.15
        # the sphere's front point sits at unit depth on the optical axis
        scene = SyntheticScene(
            shape="sphere", radius=radius, static=True, camera_distance=1.0 + radius, camera_shift=tuple(shift), pitch=0.0
        )
        size = 32
        recs = generate_synthetic(scene, tmp_path, 1, 2, size, 32)
        r = recs["video00"][0]
        f = scene.focal_factor * size
        pix = pixel_grid(size)[r.mask]
        d = np.stack([(pix[:, 0] - size / 2) / f, (pix[:, 1] - size / 2) / f, np.ones(len(pix))], -1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        b = d @ np.array([0, 0, 1.0 + radius])
        tau = b - np.sqrt(b**2 - (1.0 + radius) ** 2 + radius**2)
        z = tau * d[:, 2]
        assert np.abs(r.flow[r.mask] - f * shift[None, :2] / z[:, None]).max() < 1e-4
        # pixels next to the axis see depth 1 (to within half a pixel of curvature)
        near_axis = np.abs(pix - size / 2).max(1) <= 0.5
        assert near_axis.sum() == 4
        assert np.allclose(r.flow[r.mask][near_axis], f * shift[:2], rtol=1e-3)

    def test_invalid_scene_and_frustum(self, tmp_path):
        with pytest.raises(InvalidArgument):
            SyntheticScene(shape="torus")
        with pytest.raises(GenerationError):
            generate_synthetic(SyntheticScene(camera_distance=0.5), tmp_path, 1, 2, 16, 24)
