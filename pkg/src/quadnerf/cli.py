"""Command-line interface: ``synth``, ``train``, ``render``, ``mesh``, ``eval``.

Exit codes: 0 on success, 1 when a command fails (bad data, missing or
corrupt checkpoint, empty level set, missing ground truth), 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as C
from . import evaluate as E
from . import meshing
from .dataio import load_dataset
from .deformation import RigidTransform
from .errors import CheckpointError, InvalidArgument, QuadnerfError
from .fields import FieldBundle, load_checkpoint, prefit_sphere
from .losses import LossReport
from .meshing import MetricReport, TriMesh
from .pipeline import Cameras, extract_canonical_mesh, pose_mesh, render_image
from .synthetic import SHAPES, SyntheticScene, generate_synthetic
from .trainer import TrainData, Trainer, fill_heldout_codes

CHECKPOINT_NAME = "checkpoint.pt"
LOG_NAME = "losses.txt"


def _config_flags(parser):
    group = parser.add_argument_group("run configuration (every key may also appear in --config)")
    for f in fields(C.RunConfig):
        default = C.DESK_OVERRIDES.get(f.name)
        note = f" [paper: {f.default}" + (f", desk: {default}]" if default is not None else "]")
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, help=C.HELP[f.name] + note)
    parser.add_argument("--config", help="flat key = value config file; flags override it")


def _resolve(args):
    file_values = C.read_config_file(args.config) if args.config else {}
    flags = {f.name: getattr(args, f.name) for f in fields(C.RunConfig)}
    return C.resolve(file_values, flags, os.environ)


def _dtype(name):
    return torch.float64 if name == "float64" else torch.float32


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    try:
        scene = SyntheticScene(shape=args.scene, seed=args.seed)
    except InvalidArgument as exc:
        raise InvalidArgument(f"{exc}") from None
    out = Path(args.out or os.environ.get(C.OUTPUT_ENV) or "synthetic")
    generate_synthetic(scene, out, args.videos, args.frames, args.size, args.mesh_resolution)
    load_dataset(out)  # validate what was written
    print(f"wrote {args.videos} videos x {args.frames} frames ({args.size}x{args.size}) to {out}")
    return 0


def _cameras_state(data: TrainData):
    c = data.cameras
    return {"intrinsics": c.intrinsics.clone(), "init_poses": c.init_poses.clone(), "radius": c.radius}


def _truncate_log(path, step):
    """Drop records at or after ``step`` (left by an interrupted run)."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and LossReport.parse(ln).step < step]
    path.write_text("".join(ln + "\n" for ln in keep))


def cmd_train(args):
    cfg = _resolve(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.data:
        raise InvalidArgument("--data is required for train")
    coll = load_dataset(cfg.data, cfg.dilation)
    dtype = _dtype(cfg.dtype)
    data = TrainData.from_collection(coll, cfg.holdout_every, cfg.object_radius, dtype)
    log = out / LOG_NAME
    torch.manual_seed(cfg.seed)
    if args.resume:
        trainer = Trainer.resume(args.resume, data, log_path=log)
        _truncate_log(log, trainer.step_count)
    else:
        bundle = FieldBundle(cfg.field_config(), data.num_frames).to(dtype)
        prefit_sphere(bundle, steps=cfg.prefit_steps, seed=cfg.seed)
        if log.exists():
            log.unlink()
        trainer = Trainer(bundle, data, cfg.schedule(), cfg.loss_weights(), cfg.seed, cfg.use_lqm, log)
    cfg.write(out / "config.txt")

    def save(tag=None):
        extra_path = out / "checkpoints" / f"step_{trainer.step_count:07d}.pt"
        for path in (out / CHECKPOINT_NAME, extra_path):
            trainer.save(path)
            _attach_metadata(path, data, cfg)

    stop = cfg.total_steps if args.stop_after is None else min(args.stop_after, cfg.total_steps)
    boundaries = set(trainer.schedule.boundaries())
    while trainer.step_count < stop:
        report = trainer.step()
        s = trainer.step_count
        if s % cfg.checkpoint_interval == 0 or s in boundaries or s == stop:
            save()
        if args.verbose and (report.step % args.verbose == 0):
            print(report.record(), flush=True)
    if trainer.step_count == 0:
        save()
    print(f"trained to step {trainer.step_count}; checkpoint {out / CHECKPOINT_NAME}")
    return 0


def _attach_metadata(path, data: TrainData, cfg: C.RunConfig):
    """Store cameras and image size next to the trainer state so render /
    mesh / eval work from the checkpoint alone."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    payload["extra"]["cameras"] = _cameras_state(data)
    payload["extra"]["image_shape"] = data.image_shape
    payload["extra"]["train_frames"] = data.train.clone()
    payload["extra"]["run_config"] = dataclasses.asdict(cfg)
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def _load(path):
    bundle, step, extra = load_checkpoint(path)
    if "cameras" not in extra:
        raise CheckpointError(f"{path} has no camera metadata (not written by 'train')")
    cam = extra["cameras"]
    cameras = Cameras(cam["intrinsics"], cam["init_poses"], cam["radius"])
    return bundle, step, extra, cameras


def _parse_pose(text):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 12:
        raise InvalidArgument("--pose needs 12 numbers (3x4 row-major [R | t], object -> camera)")
    m = np.asarray(vals).reshape(3, 4)
    return m


def _save_png(path, arr):
    arr = np.clip(np.asarray(arr, dtype=np.float64), 0, 1)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def cmd_render(args):
    bundle, step, extra, cameras = _load(args.checkpoint)
    if not 0 <= args.frame < bundle.num_frames:
        raise InvalidArgument(f"frame {args.frame} out of range [0, {bundle.num_frames})")
    rc = extra.get("run_config", {})
    cs = args.coarse_samples or rc.get("coarse_samples", 64)
    fs = args.fine_samples or rc.get("fine_samples", 32)
    root = None
    if args.pose:
        m = torch.as_tensor(_parse_pose(args.pose), dtype=bundle.log_alpha.dtype)
        root = RigidTransform(m[:, :3], m[:, 3])
    size = tuple(extra["image_shape"])
    imgs = render_image(
        bundle, args.frame, cameras, size, cs, fs, branch=args.branch, use_lqm=extra.get("use_lqm", True), root=root
    )
    out = Path(args.out or os.environ.get(C.OUTPUT_ENV) or "render")
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in imgs.items():
        _save_png(out / f"{name}.png", arr)
        np.save(out / f"{name}.npy", arr)
    print(f"rendered frame {args.frame} ({', '.join(sorted(imgs))}) to {out}")
    return 0


def cse_colors(embeddings):
    """Per-vertex RGB from the three principal components of the embeddings."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e - e.mean(0)
    _, _, vt = np.linalg.svd(e, full_matrices=False)
    proj = e @ vt[:3].T
    lo, hi = proj.min(0), proj.max(0)
    return (proj - lo) / np.where(hi > lo, hi - lo, 1.0)


def cmd_mesh(args):
    bundle, step, extra, cameras = _load(args.checkpoint)
    res = args.resolution or extra.get("run_config", {}).get("mesh_resolution", meshing.DESK_RESOLUTION)
    mesh = extract_canonical_mesh(bundle, res, "fine")
    if mesh.is_empty:
        raise QuadnerfError("the fine SDF has no zero level set inside the canonical box")
    if args.cse_color:
        with torch.no_grad():
            emb = bundle.canonical_embedding(torch.as_tensor(mesh.vertices, dtype=bundle.log_alpha.dtype))
        mesh.embeddings = emb.double().numpy()
        mesh.colors = cse_colors(mesh.embeddings)
    if args.frame is not None:
        if not 0 <= args.frame < bundle.num_frames:
            raise InvalidArgument(f"frame {args.frame} out of range [0, {bundle.num_frames})")
        mesh = pose_mesh(bundle, mesh, args.frame, cameras, use_lqm=extra.get("use_lqm", True))
    out = Path(args.out or "mesh.obj")
    mesh.save_obj(out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {out}")
    return 0


def _select_frames(spec, coll, train_mask):
    if spec == "all":
        return list(range(coll.num_frames))
    if spec == "heldout":
        frames = [g for g in range(coll.num_frames) if train_mask is not None and not bool(train_mask[g])]
        if not frames:
            raise InvalidArgument("no held-out frames in this run (train with --holdout-every)")
        return frames
    return [int(v) for v in spec.split(",")]


def cmd_eval(args):
    coll = load_dataset(args.data)
    out = Path(args.out or os.environ.get(C.OUTPUT_ENV) or "eval")
    out.mkdir(parents=True, exist_ok=True)
    train_mask = None
    if args.checkpoint:
        bundle, step, extra, cameras = _load(args.checkpoint)
        train_mask = extra.get("train_frames")
    frames = _select_frames(args.frames, coll, train_mask)
    gts = E.load_gt_meshes(args.data, coll, frames)
    ref = E.reference_length(args.data, gts)
    reports = {}
    if args.checkpoint:
        rc = extra.get("run_config", {})
        data = TrainData.from_collection(coll, rc.get("holdout_every", 0), cameras.radius, bundle.log_alpha.dtype)
        if train_mask is not None:
            data.train = train_mask
        fill_heldout_codes(bundle, data)
        ev = E.evaluate_frames(
            bundle,
            data,
            coll,
            frames,
            gts,
            ref,
            resolution=args.resolution or rc.get("mesh_resolution", meshing.DESK_RESOLUTION),
            coarse_samples=rc.get("coarse_samples", 64),
            fine_samples=rc.get("fine_samples", 32),
            branch=args.branch,
            use_lqm=extra.get("use_lqm", True),
            samples=args.samples,
        )
        for fm in ev.frames:
            reports[fm.frame] = MetricReport(
                fm.chamfer * args.cm_per_unit, fm.f_score, fm.psnr, fm.ssim, {"IoU": fm.iou, "CD_rel": fm.chamfer / ref}
            )
    else:
        if not args.meshes:
            raise InvalidArgument("eval needs --checkpoint or --meshes")
        missing = []
        for g in frames:
            f = coll.frames[g]
            path = Path(args.meshes) / coll.videos[f.video].name / f"{f.index:05d}.obj"
            if not path.exists():
                missing.append(str(path))
                continue
            pred = TriMesh.load_obj(path)
            cd = meshing.chamfer(pred, gts[g], args.samples)
            fs = meshing.f_score(pred, gts[g], samples=args.samples)
            reports[g] = MetricReport(cd * args.cm_per_unit, fs, extra={"CD_rel": cd / ref})
        if missing:
            raise InvalidArgument("missing predicted meshes: " + ", ".join(missing))
    for g, rep in reports.items():
        rep.write(out / f"metrics_{g:05d}.txt")
    keys = list(MetricReport.KEYS) + sorted({k for r in reports.values() for k in r.extra})
    mean = MetricReport()
    for attr in MetricReport.KEYS:
        setattr(mean, attr, float(np.mean([getattr(r, attr) for r in reports.values()])))
    for k in keys[len(MetricReport.KEYS) :]:
        mean.extra[k] = float(np.mean([r.extra[k] for r in reports.values()]))
    mean.extra["frames"] = float(len(reports))
    mean.write(out / "metrics_mean.txt")
    print("\n".join(mean.lines()))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="quadnerf",
        description="Coarse-to-fine non-rigid radiance fields from monocular videos.",
        epilog="Exit codes: 0 success, 1 command failure, 2 usage error. "
        f"{C.OUTPUT_ENV} overrides the output root.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic oracle dataset")
    p.add_argument("--scene", default="capsule", help=f"one of {', '.join(SHAPES)}")
    p.add_argument("--videos", type=int, default=3)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--mesh-resolution", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-phase optimization")
    _config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop once this global step is reached")
    p.add_argument("--verbose", type=int, default=0, help="print every n-th loss record")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a frame (or a novel root pose)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--pose", help="12 numbers: 3x4 object -> camera pose replacing the frame's root pose")
    p.add_argument("--branch", choices=("coarse", "fine", "both"), default="both")
    p.add_argument("--coarse-samples", type=int)
    p.add_argument("--fine-samples", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="extract the fine canonical (or posed) mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, help="grid resolution (desk 128; 512 / 1024 for paper scale)")
    p.add_argument("--frame", type=int, help="pose the mesh into this frame")
    p.add_argument("--cse-color", action="store_true", help="color vertices by their canonical embedding")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="CD, F@2%%, PSNR and SSIM against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--meshes", help="predicted meshes laid out as <video>/NNNNN.obj")
    p.add_argument("--frames", default="all", help="all, heldout, or a comma-separated list of global frames")
    p.add_argument("--branch", choices=("coarse", "fine"), default="fine")
    p.add_argument("--resolution", type=int)
    p.add_argument("--samples", type=int, default=meshing.DEFAULT_SURFACE_SAMPLES)
    p.add_argument("--cm-per-unit", type=float, default=100.0, help="scene units -> centimeters")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (QuadnerfError, OSError, ValueError) as exc:
        print(f"quadnerf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
