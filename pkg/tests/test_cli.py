import shutil

import numpy as np
import pytest

from quadnerf import cli
from quadnerf import config as C
from quadnerf.dataio import load_dataset
from quadnerf.errors import InvalidArgument
from quadnerf.meshing import MetricReport, TriMesh, align_similarity, sample_surface

TINY = """\
preset = desk
dtype = float64
total_steps = 6
warmup_steps = 2
phase1_extra_steps = 2
batch_rays = 16
coarse_samples = 8
fine_samples = 4
cache_resolution = 16
cache_interval = 3
mesh_resolution = 32
canon_width = 16
canon_depth = 2
embed_width = 8
pose_width = 8
skin_width = 8
quad_width = 8
code_dim = 8
env_dim = 4
num_bones = 3
pos_bands = 3
prefit_steps = 50
holdout_every = 4
checkpoint_interval = 2
"""


@pytest.fixture(scope="module")
def run(small_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    out = root / "run"
    code = cli.main(["train", "--config", str(root / "tiny.cfg"), "--data", str(small_dataset), "--out", str(out)])
    assert code == 0
    return root, out


class TestConfig:
    def test_paper_preset_weights(self):
        cfg = C.resolve({}, {"preset": "paper"})
        w = cfg.loss_weights()
        assert (w.pho_f, w.sil_f, w.quad, w.pho_c, w.sil_c, w.flow, w.reg) == (0.1, 1.0, 1e3, 0.1, 1.0, 0.1, 0.02)
        s = cfg.schedule()
        assert (s.batch_rays, s.coarse_samples, s.fine_samples, s.total_steps) == (416, 256, 128, 224000)
        assert cfg.mesh_resolution == 512

    def test_desk_cap(self):
        assert C.resolve({}, {"preset": "desk"}).total_steps == 3000
        assert C.resolve({}, {"preset": "desk", "total_steps": "20000"}).total_steps == 20000
        with pytest.raises(InvalidArgument):
            C.resolve({}, {"preset": "desk", "total_steps": "20001"})

    def test_merge_order(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# comment\nlr = 0.01\nout = from_file\nseed = 4\n")
        file_values = C.read_config_file(tmp_path / "c.cfg")
        cfg = C.resolve(file_values, {"seed": "7"}, {})
        assert (cfg.lr, cfg.seed, cfg.out) == (0.01, 7, "from_file")
        env = {C.OUTPUT_ENV: "from_env"}
        assert C.resolve(file_values, {}, env).out == "from_env"
        assert C.resolve(file_values, {"out": "from_flag"}, env).out == "from_flag"
        # the preset applies before the file
        cfg = C.resolve({"preset": "desk", "batch_rays": "7"}, {})
        assert (cfg.batch_rays, cfg.coarse_samples) == (7, 48)

    def test_unknown_and_malformed_keys(self, tmp_path):
        (tmp_path / "c.cfg").write_text("bogus = 1\n")
        with pytest.raises(InvalidArgument, match="bogus"):
            C.read_config_file(tmp_path / "c.cfg")
        with pytest.raises(InvalidArgument):
            C.resolve({}, {"seed": "x"})
        with pytest.raises(InvalidArgument):
            C.resolve({}, {"preset": "huge"})
        assert C.resolve({}, {"use_lqm": "false"}).use_lqm is False

    def test_every_key_documented(self):
        from dataclasses import fields

        assert set(C.HELP) == {f.name for f in fields(C.RunConfig)}


class TestHelp:
    def test_train_help_lists_every_key(self, capsys):
        from dataclasses import fields

        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for f in fields(C.RunConfig):
            assert f"--{f.name.replace('_', '-')}" in text, f.name

    def test_top_level_help_mentions_env_and_exit_codes(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["--help"])
        text = capsys.readouterr().out
        assert C.OUTPUT_ENV in text and "Exit codes" in text
        for cmd in ("synth", "train", "render", "mesh", "eval"):
            assert cmd in text

    def test_usage_error_exit_code(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["render"])
        assert info.value.code == 2


class TestSynth:
    def test_invalid_scene(self, tmp_path, capsys):
        assert cli.main(["synth", "--scene", "torus", "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "torus" in err and "sphere, ellipsoid, capsule" in err

    def test_writes_loadable_dataset(self, tmp_path, monkeypatch):
        monkeypatch.setenv(C.OUTPUT_ENV, str(tmp_path / "env"))
        argv = ["synth", "--scene", "ellipsoid", "--videos", "1", "--frames", "2", "--size", "16", "--mesh-resolution", "24"]
        assert cli.main(argv) == 0
        coll = load_dataset(tmp_path / "env")
        assert coll.num_frames == 2
        assert (tmp_path / "env" / "video00" / "gt" / "00001.obj").exists()


class TestTrain:
    def test_outputs(self, run):
        _, out = run
        assert (out / "checkpoint.pt").exists()
        steps = sorted(p.name for p in (out / "checkpoints").iterdir())
        # every interval and both phase boundaries
        assert steps == [f"step_{s:07d}.pt" for s in (2, 4, 6)]
        lines = (out / "losses.txt").read_text().splitlines()
        assert len(lines) == 6
        assert "total_steps = 6" in (out / "config.txt").read_text()

    def test_resume_reproduces_log(self, run, small_dataset):
        root, out = run
        part = root / "part"
        base = ["train", "--config", str(root / "tiny.cfg"), "--data", str(small_dataset), "--out", str(part)]
        assert cli.main(base + ["--stop-after", "3"]) == 0
        assert len((part / "losses.txt").read_text().splitlines()) == 3
        assert cli.main(base + ["--resume", str(part / "checkpoint.pt")]) == 0
        assert (part / "losses.txt").read_text() == (out / "losses.txt").read_text()

    def test_corrupt_checkpoint(self, run, small_dataset, tmp_path, capsys):
        root, _ = run
        (tmp_path / "bad.pt").write_bytes(b"garbage")
        argv = ["train", "--config", str(root / "tiny.cfg"), "--data", str(small_dataset), "--out", str(tmp_path)]
        assert cli.main(argv + ["--resume", str(tmp_path / "bad.pt")]) == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_desk_cap_via_cli(self, small_dataset, tmp_path, capsys):
        argv = ["train", "--preset", "desk", "--total-steps", "30000", "--data", str(small_dataset), "--out", str(tmp_path)]
        assert cli.main(argv) == 1
        assert "20000" in capsys.readouterr().err


@pytest.fixture(scope="module")
def untrained(run, small_dataset):
    root, _ = run
    out = root / "untrained"
    argv = ["train", "--config", str(root / "tiny.cfg"), "--data", str(small_dataset), "--out", str(out)]
    assert cli.main(argv + ["--stop-after", "0", "--prefit-steps", "1000", "--canon-width", "64", "--canon-depth", "4"]) == 0
    return out / "checkpoint.pt"


class TestRender:
    def test_both_branches(self, run, tmp_path):
        _, out = run
        assert cli.main(["render", "--checkpoint", str(out / "checkpoint.pt"), "--frame", "1", "--out", str(tmp_path)]) == 0
        names = {p.name for p in tmp_path.iterdir()}
        for n in ("coarse_rgb", "coarse_opacity", "fine_rgb", "fine_opacity"):
            assert f"{n}.png" in names and f"{n}.npy" in names
        op = np.load(tmp_path / "fine_opacity.npy")
        assert op.shape == (24, 24) and op.min() >= 0 and op.max() <= 1

    def test_training_pose_as_novel_pose(self, untrained, small_dataset, tmp_path):
        pose = load_dataset(small_dataset).frames[2].init_root_pose
        base = ["render", "--checkpoint", str(untrained), "--frame", "2", "--branch", "coarse"]
        assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(base + ["--out", str(tmp_path / "b"), "--pose", " ".join(repr(float(v)) for v in pose.reshape(-1))]) == 0
        a = np.load(tmp_path / "a" / "coarse_rgb.npy")
        b = np.load(tmp_path / "b" / "coarse_rgb.npy")
        assert np.abs(a - b).max() < 1e-9

    def test_errors(self, run, tmp_path):
        _, out = run
        ck = str(out / "checkpoint.pt")
        assert cli.main(["render", "--checkpoint", ck, "--frame", "99"]) == 1
        assert cli.main(["render", "--checkpoint", ck, "--frame", "0", "--pose", "1 2 3"]) == 1
        assert cli.main(["render", "--checkpoint", str(tmp_path / "missing.pt"), "--frame", "0"]) == 1


class TestMesh:
    def test_untrained_is_spherical(self, untrained, tmp_path):
        assert cli.main(["mesh", "--checkpoint", str(untrained), "--out", str(tmp_path / "m.obj")]) == 0
        r = np.linalg.norm(TriMesh.load_obj(tmp_path / "m.obj").vertices, axis=1)
        cell = 2.0 / 31
        assert np.abs(r - 0.3).max() < 0.05 + cell

    def test_identity_frame_pose(self, untrained, small_dataset, tmp_path):
        ck = str(untrained)
        assert cli.main(["mesh", "--checkpoint", ck, "--out", str(tmp_path / "c.obj")]) == 0
        assert cli.main(["mesh", "--checkpoint", ck, "--frame", "5", "--out", str(tmp_path / "p.obj")]) == 0
        canon = TriMesh.load_obj(tmp_path / "c.obj")
        posed = TriMesh.load_obj(tmp_path / "p.obj")
        pose = load_dataset(small_dataset).frames[5].init_root_pose
        # untrained deformation is the identity: only the root pose remains
        assert np.abs(posed.vertices - (canon.vertices @ pose[:, :3].T + pose[:, 3])).max() < 1e-6
        assert np.array_equal(posed.faces, canon.faces)

    def test_resolution_and_cse_color(self, run, tmp_path):
        _, out = run
        argv = ["mesh", "--checkpoint", str(out / "checkpoint.pt"), "--resolution", "24", "--cse-color"]
        assert cli.main(argv + ["--out", str(tmp_path / "m.obj")]) == 0
        m = TriMesh.load_obj(tmp_path / "m.obj")
        assert m.colors is not None and m.colors.min() >= 0 and m.colors.max() <= 1

    def test_empty_level_set(self, untrained, tmp_path, capsys):
        import torch

        payload = torch.load(untrained, weights_only=False)
        for k in payload["state"]:
            if k.startswith("fine.sdf") and k.endswith("bias") and payload["state"][k].numel() == 1:
                payload["state"][k] += 100.0
        torch.save(payload, tmp_path / "empty.pt")
        assert cli.main(["mesh", "--checkpoint", str(tmp_path / "empty.pt"), "--out", str(tmp_path / "m.obj")]) == 1
        assert "level set" in capsys.readouterr().err


def copy_gt(root, dest, perturb=None):
    coll = load_dataset(root)
    for f in coll.frames:
        name = coll.videos[f.video].name
        m = TriMesh.load_obj(root / name / "gt" / f"{f.index:05d}.obj")
        if perturb is not None:
            m = TriMesh(perturb(m.vertices), m.faces)
        (dest / name).mkdir(parents=True, exist_ok=True)
        m.save_obj(dest / name / f"{f.index:05d}.obj")


def ref_length(root):
    return np.ptp(TriMesh.load_obj(root / "gt_canonical.obj").vertices, axis=0).max()


class TestEval:
    def test_prediction_equal_to_gt(self, small_dataset, tmp_path):
        copy_gt(small_dataset, tmp_path / "pred")
        argv = ["eval", "--data", str(small_dataset), "--meshes", str(tmp_path / "pred"), "--frames", "0,5"]
        assert cli.main(argv + ["--samples", "500", "--out", str(tmp_path / "ev")]) == 0
        mean = MetricReport.read(tmp_path / "ev" / "metrics_mean.txt")
        assert mean.chamfer_cm < 1e-9 and mean.f_at_2pct == 100.0
        text = (tmp_path / "ev" / "metrics_00005.txt").read_text()
        assert "CD = " in text and "F@2% = " in text

    def test_brute_force_cross_check(self, small_dataset, tmp_path):
        rng = np.random.default_rng(0)
        copy_gt(small_dataset, tmp_path / "pred", lambda v: v + rng.normal(scale=0.01, size=v.shape))
        n = 400
        argv = ["eval", "--data", str(small_dataset), "--meshes", str(tmp_path / "pred"), "--frames", "1,6"]
        assert cli.main(argv + ["--samples", str(n), "--out", str(tmp_path / "ev")]) == 0
        coll = load_dataset(small_dataset)
        ref = ref_length(small_dataset)
        for g in (1, 6):
            f = coll.frames[g]
            name = coll.videos[f.video].name
            gt = TriMesh.load_obj(small_dataset / name / "gt" / f"{f.index:05d}.obj")
            pred = TriMesh.load_obj(tmp_path / "pred" / name / f"{f.index:05d}.obj")
            p = align_similarity(sample_surface(pred, n, 0), sample_surface(gt, n, 0))
            g_pts = sample_surface(gt, n, 0)
            d = np.linalg.norm(p[:, None] - g_pts[None], axis=-1)
            cd = 0.5 * (d.min(1).mean() + d.min(0).mean())
            tau = 0.02 * np.ptp(gt.vertices, axis=0).max()
            prec, rec = (d.min(1) < tau).mean(), (d.min(0) < tau).mean()
            fs = 0.0 if prec + rec == 0 else 100 * 2 * prec * rec / (prec + rec)
            rep = MetricReport.read(tmp_path / "ev" / f"metrics_{g:05d}.txt")
            assert rep.chamfer_cm == pytest.approx(100 * cd, rel=1e-12)
            assert rep.f_at_2pct == pytest.approx(fs, rel=1e-12)
            assert rep.extra["CD_rel"] == pytest.approx(cd / ref, rel=1e-12)

    def test_missing_gt_lists_frames(self, small_dataset, tmp_path, capsys):
        data = tmp_path / "data"
        shutil.copytree(small_dataset, data)
        (data / "video00" / "gt" / "00001.obj").unlink()
        (data / "video01" / "gt" / "00003.obj").unlink()
        copy_gt(small_dataset, tmp_path / "pred")
        assert cli.main(["eval", "--data", str(data), "--meshes", str(tmp_path / "pred"), "--out", str(tmp_path / "e")]) == 1
        err = capsys.readouterr().err
        assert "video00/gt/00001.obj" in err and "video01/gt/00003.obj" in err

    def test_checkpoint_eval(self, run, small_dataset, tmp_path):
        _, out = run
        argv = ["eval", "--data", str(small_dataset), "--checkpoint", str(out / "checkpoint.pt"), "--frames", "heldout"]
        assert cli.main(argv + ["--samples", "300", "--resolution", "24", "--out", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["metrics_00002.txt", "metrics_00006.txt", "metrics_mean.txt"]
        mean = MetricReport.read(tmp_path / "metrics_mean.txt")
        assert "IoU" in mean.extra and np.isfinite(mean.psnr)
        assert mean.extra["CD_rel"] == pytest.approx(mean.chamfer_cm / 100 / ref_length(small_dataset), rel=1e-9)
