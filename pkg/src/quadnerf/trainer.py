"""Two-phase optimization schedule.

Phase table (parameter blocks updated / loss terms reported):

=========  ==========================================  =====================
phase      updated blocks                              terms
=========  ==========================================  =====================
warmup     coarse, root_pose, bone_pose, env_codes,    coarse terms
           bones, alpha
phase1     same as warmup                              coarse terms
phase2     coarse, fine, bone_pose, skin_delta, quad,  coarse + fine terms
           env_codes, bones, alpha
=========  ==========================================  =====================

The embedding network is never updated: observed correspondences arrive as
canonical points, and the embedding only serves to match them against the
current surface. During warmup the flow weight starts boosted and decays
linearly to its nominal value. Bones are re-initialized on the current
surface at the end of warmup and at phase-2 entry; phase-2 entry also
restarts the learning rate, freezes the root pose and warm-starts the fine
canonical network from the coarse one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .dataio import VideoCollection
from .fields import FieldBundle, load_checkpoint, save_checkpoint
from .geometry import COARSE_SAMPLES, FINE_SAMPLES
from .errors import CheckpointError, InvalidArgument
from .pipeline import (
    CACHE_RESOLUTION,
    Cameras,
    SurfaceCache,
    cast_rays,
    extract_canonical_mesh,
    forward_warp,
    frame_state,
    render_coarse,
    render_fine,
)

PHASES = ("warmup", "phase1", "phase2")
COARSE_BLOCKS = ("coarse", "root_pose", "bone_pose", "env_codes", "bones", "alpha")
PHASE_BLOCKS = {
    "warmup": COARSE_BLOCKS,
    "phase1": COARSE_BLOCKS,
    "phase2": ("coarse", "fine", "bone_pose", "skin_delta", "quad", "env_codes", "bones", "alpha"),
}
COARSE_TERMS = ("pho_c", "sil_c", "of", "cse3d", "cse2d_c", "cyc2d", "cyc3d", "cam")
FINE_TERMS = ("pho_f", "sil_f", "cse2d_f", "q_spatial", "q_temporal")


@dataclass
class Schedule:
    warmup_steps: int = 9600
    phase1_extra_steps: int = 14400
    total_steps: int = 224000
    batch_rays: int = 416
    coarse_samples: int = COARSE_SAMPLES
    fine_samples: int = FINE_SAMPLES
    lr: float = 5e-4
    lr_decay: float = 0.1  # fraction of lr reached at the end of each phase segment
    flow_boost: float = 10.0
    active_fraction: float = 0.5
    error_half_life: float = 500.0
    cache_interval: int = 2000
    cache_resolution: int = CACHE_RESOLUTION
    quad_neighbors: int = L.DEFAULT_NEIGHBORS
    quad_eps: float = 0.0  # 0 -> 1% of the scene bounding-box diagonal

    def __post_init__(self):
        counts = ("warmup_steps", "total_steps", "batch_rays", "coarse_samples", "fine_samples", "cache_interval")
        for name in counts:
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.phase1_extra_steps < 0:
            raise InvalidArgument("phase1_extra_steps must be >= 0")
        if self.warmup_steps + self.phase1_extra_steps > self.total_steps:
            raise InvalidArgument("warmup_steps + phase1_extra_steps exceeds total_steps")
        if not 0 <= self.active_fraction <= 1:
            raise InvalidArgument("active_fraction must be in [0, 1]")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise InvalidArgument("need lr > 0 and 0 < lr_decay <= 1")

    @property
    def phase2_start(self):
        return self.warmup_steps + self.phase1_extra_steps

    def phase(self, step):
        if step < self.warmup_steps:
            return "warmup"
        if step < self.phase2_start:
            return "phase1"
        return "phase2"

    def boundaries(self):
        return (self.warmup_steps, self.phase2_start)

    def learning_rate(self, step):
        """Exponential decay within each segment, restarting at phase 2."""
        if step < self.phase2_start:
            start, length = 0, self.phase2_start
        else:
            start, length = self.phase2_start, self.total_steps - self.phase2_start
        frac = (step - start) / max(length, 1)
        return self.lr * self.lr_decay ** min(frac, 1.0)

    def flow_weight(self, step, base):
        if step >= self.warmup_steps:
            return base
        frac = step / self.warmup_steps
        return base * (self.flow_boost + (1.0 - self.flow_boost) * frac)


@dataclass
class TrainData:
    """Dense tensors of a video collection, indexed by global frame."""

    rgb: torch.Tensor  # (T, H, W, 3)
    mask: torch.Tensor  # (T, H, W)
    region: torch.Tensor  # (T, H, W) bool
    flow: torch.Tensor  # (T, H, W, 2)
    has_flow: torch.Tensor  # (T,) bool
    cse: torch.Tensor  # (T, H, W, 3)
    cse_valid: torch.Tensor  # (T, H, W) bool
    video: torch.Tensor  # (T,)
    next_frame: torch.Tensor  # (T,) -1 on video-final frames
    train: torch.Tensor  # (T,) bool
    cameras: Cameras

    @property
    def num_frames(self):
        return self.rgb.shape[0]

    @property
    def image_shape(self):
        return tuple(self.rgb.shape[1:3])

    @classmethod
    def from_collection(cls, coll: VideoCollection, holdout_every=0, radius=1.0, dtype=torch.float32):
        T = coll.num_frames
        H, W = coll.image_shape
        flow = np.zeros((T, H, W, 2), np.float32)
        cse = np.zeros((T, H, W, 3), np.float32)
        cse_valid = np.zeros((T, H, W), bool)
        has_flow = np.zeros(T, bool)
        for g, f in enumerate(coll.frames):
            if f.flow_to_next is not None:
                flow[g], has_flow[g] = f.flow_to_next, True
            if f.cse_points is not None:
                cse[g], cse_valid[g] = f.cse_points, f.cse_valid
        next_frame = np.array([-1 if coll.is_video_final(g) else g + 1 for g in range(T)])
        train = np.array([not is_heldout(f.index, holdout_every) for f in coll.frames])

        def t(a, dt=dtype):
            return torch.as_tensor(np.asarray(a), dtype=dt)

        return cls(
            rgb=t(np.stack([f.rgb for f in coll.frames])),
            mask=t(np.stack([f.mask for f in coll.frames])),
            region=t(np.stack([f.sample_region for f in coll.frames]), torch.bool),
            flow=t(flow),
            has_flow=t(has_flow, torch.bool),
            cse=t(cse),
            cse_valid=t(cse_valid, torch.bool),
            video=t(coll.video_ids(), torch.long),
            next_frame=t(next_frame, torch.long),
            train=t(train, torch.bool),
            cameras=Cameras(t(coll.intrinsics()), t(coll.init_poses()), radius),
        )


def is_heldout(index, every):
    """Held-out rule: frames with ``index % every == every // 2``."""
    return every > 0 and index % every == every // 2


@dataclass
class RayBatch:
    frames: torch.Tensor  # (N,)
    pixels: torch.Tensor  # (N, 2) pixel centers
    flat: torch.Tensor  # (N,) index into the (T, H, W) raster
    rgb: torch.Tensor
    mask: torch.Tensor
    flow: torch.Tensor
    flow_valid: torch.Tensor
    cse: torch.Tensor
    cse_valid: torch.Tensor
    next_frames: torch.Tensor  # (N,) clamped to a valid frame
    next_valid: torch.Tensor
    active: torch.Tensor  # (N,) bool, drawn from the error map


def farthest_point_sampling(points, count, start=0):
    """Greedy farthest-point subset (indices) of ``points`` (P, 3)."""
    points = np.asarray(points, dtype=np.float64)
    count = min(count, len(points))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen)


def bone_scale_heuristic(extent, count):
    """Precision 1/sigma^2 with sigma = half the extent over the cube root of the bone count."""
    sigma = 0.5 * max(extent, 1e-3) / count ** (1.0 / 3.0)
    return 1.0 / sigma**2


def block_checksum(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def step_generator(seed, step):
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(step)) % (2**63))


class Trainer:
    """Owns the optimization state: bundle, optimizer, step counter, active
    sampling error map and the canonical surface cache."""

    def __init__(
        self,
        bundle: FieldBundle,
        data: TrainData,
        schedule: Schedule | None = None,
        weights: L.LossWeights | None = None,
        seed=0,
        use_lqm=True,
        log_path=None,
    ):
        self.bundle = bundle
        self.data = data
        self.schedule = schedule or Schedule()
        self.weights = weights or L.LossWeights()
        self.seed = seed
        self.use_lqm = use_lqm
        self.log_path = Path(log_path) if log_path else None
        self.step_count = 0
        self.dtype = bundle.log_alpha.dtype
        T, H, W = data.mask.shape
        if bundle.num_frames != T:
            raise InvalidArgument(f"bundle has {bundle.num_frames} frames, data has {T}")
        self.error_map = torch.zeros(T * H * W, dtype=torch.float64)
        self.cache: SurfaceCache | None = None
        self.cache_step = -1
        self.optimizer = None
        self.opt_phase = None
        region = data.region & data.train[:, None, None]
        self._uniform_pool = torch.nonzero(region.reshape(-1)).reshape(-1)
        self._train_pool = torch.zeros(T * H * W, dtype=torch.bool)
        self._train_pool[self._uniform_pool] = True
        if len(self._uniform_pool) == 0:
            raise InvalidArgument("no training pixels: every sample region is empty")
        self._build_optimizer(self.phase)

    # -- schedule ----------------------------------------------------------

    @property
    def phase(self):
        return self.schedule.phase(self.step_count)

    def active_blocks(self, phase=None):
        phase = phase or self.phase
        blocks = PHASE_BLOCKS[phase]
        if not self.use_lqm:
            blocks = tuple(b for b in blocks if b != "quad")
        return blocks

    def reported_terms(self, phase=None):
        phase = phase or self.phase
        terms = COARSE_TERMS
        if phase == "phase2":
            fine = FINE_TERMS if self.use_lqm else tuple(t for t in FINE_TERMS if not t.startswith("q_"))
            terms = terms + fine
        return tuple(t for t in L.TERMS if t in terms)

    def _build_optimizer(self, phase):
        blocks = self.bundle.parameter_blocks()
        active = self.active_blocks(phase)
        for name, params in blocks.items():
            for p in params:
                p.requires_grad_(name in active)
        groups = [{"params": blocks[name], "name": name} for name in active]
        self.optimizer = torch.optim.Adam(groups, lr=self.schedule.learning_rate(self.step_count))
        self.opt_phase = phase

    def checksums(self):
        return {name: block_checksum(params) for name, params in self.bundle.parameter_blocks().items()}

    # -- transitions -------------------------------------------------------

    @torch.no_grad()
    def reinit_bones(self):
        """Farthest-point sample bone centers on the current coarse surface;
        identity orientations, scales from the surface extent."""
        mesh = extract_canonical_mesh(self.bundle, self.schedule.cache_resolution, "coarse")
        if mesh.is_empty:
            return False
        B = self.bundle.bones.count
        start = int(np.argmin(np.linalg.norm(mesh.vertices - mesh.vertices.mean(0), axis=1)))
        idx = farthest_point_sampling(mesh.vertices, B, start)
        centers = mesh.vertices[idx]
        if len(centers) < B:  # tiny surfaces: repeat vertices
            centers = centers[np.arange(B) % len(centers)]
        scale = bone_scale_heuristic(mesh.bbox_longest_edge(), B)
        self.bundle.bones.reset(centers, torch.full((B, 3), scale, dtype=self.dtype))
        return True

    def transition(self):
        """Apply boundary actions if the step counter sits on a phase boundary."""
        s = self.step_count
        if s not in self.schedule.boundaries():
            return False
        self.reinit_bones()
        if s == self.schedule.phase2_start:
            with torch.no_grad():
                for dst, src in zip(self.bundle.fine.parameters(), self.bundle.coarse.parameters()):
                    dst.copy_(src)
            self._build_optimizer("phase2")
        return True

    def refresh_cache(self, force=False):
        if force or self.cache is None or self.step_count % self.schedule.cache_interval == 0:
            if self.cache_step != self.step_count:
                self.cache = SurfaceCache.build(self.bundle, self.schedule.cache_resolution, "coarse")
                self.cache_step = self.step_count

    # -- batches -----------------------------------------------------------

    def sample_batch(self, generator, phase=None) -> RayBatch:
        phase = phase or self.phase
        d = self.data
        T, H, W = d.mask.shape
        N = self.schedule.batch_rays
        n_active = int(round(self.schedule.active_fraction * N)) if phase == "phase2" else 0
        errs = torch.where(self._train_pool, self.error_map, torch.zeros_like(self.error_map))
        if n_active and float(errs.sum()) <= 0:
            n_active = 0
        pick = torch.randint(0, len(self._uniform_pool), (N - n_active,), generator=generator)
        flat = self._uniform_pool[pick]
        if n_active:
            act = torch.multinomial(errs, n_active, replacement=True, generator=generator)
            flat = torch.cat([flat, act])
        active = torch.arange(N) >= N - n_active
        frames = flat // (H * W)
        rest = flat % (H * W)
        ii, jj = rest // W, rest % W
        pixels = torch.stack([jj, ii], dim=-1).to(self.dtype) + 0.5
        nxt = d.next_frame[frames]
        next_valid = (nxt >= 0) & d.train[nxt.clamp_min(0)]
        return RayBatch(
            frames=frames,
            pixels=pixels,
            flat=flat,
            rgb=d.rgb[frames, ii, jj].to(self.dtype),
            mask=d.mask[frames, ii, jj].to(self.dtype),
            flow=d.flow[frames, ii, jj].to(self.dtype),
            flow_valid=d.has_flow[frames] & (d.mask[frames, ii, jj] > 0.5) & next_valid,
            cse=d.cse[frames, ii, jj].to(self.dtype),
            cse_valid=d.cse_valid[frames, ii, jj] & (d.mask[frames, ii, jj] > 0.5),
            next_frames=torch.where(next_valid, nxt, frames),
            next_valid=next_valid,
            active=active,
        )

    # -- losses ------------------------------------------------------------

    def quad_eps(self):
        if self.schedule.quad_eps > 0:
            return self.schedule.quad_eps
        return 0.01 * 2.0 * self.bundle.cfg.bound * math.sqrt(3.0)

    def compute_losses(self, batch: RayBatch, generator, phase=None):
        """Named loss parts for the batch plus the renders (for bookkeeping)."""
        phase = phase or self.phase
        bundle, sch, cams = self.bundle, self.schedule, self.data.cameras
        st = frame_state(bundle, batch.frames, cams)
        K = cams.intrinsics[batch.frames]
        rays = cast_rays(K, batch.pixels, st.root, cams.radius)
        co = render_coarse(bundle, st, rays, sch.coarse_samples, generator)
        res = co.result
        inside = batch.mask > 0.5
        parts = {
            "pho_c": L.photometric(res.color, batch.rgb),
            "sil_c": L.silhouette(res.opacity, batch.mask),
        }
        st_next = frame_state(bundle, batch.next_frames, cams)
        parts["of"] = L.optical_flow(
            forward_warp(st_next, res.surface_point),
            cams.intrinsics[batch.next_frames],
            batch.flow,
            batch.pixels,
            batch.flow_valid,
        )
        cyc2d, cyc3d = L.cycle_losses(
            batch.pixels,
            forward_warp(st, res.surface_point),
            K,
            co.samples.points,
            forward_warp(st, co.warped),
            res.weights,
            inside,
        )
        parts["cyc2d"], parts["cyc3d"] = cyc2d, cyc3d

        def warp_t(x):
            return forward_warp(st, x)

        fine = None
        if phase == "phase2":
            fine = render_fine(bundle, st, rays, co, sch.fine_samples, generator, self.use_lqm)

        matched = None
        if self.cache is not None and not self.cache.empty and bool(batch.cse_valid.any()):
            with torch.no_grad():
                q = bundle.canonical_embedding(batch.cse).double().numpy()
            matched = torch.as_tensor(self.cache.match(q), dtype=self.dtype)
        if matched is not None:
            parts["cse3d"], parts["cse2d_c"] = L.cse_losses(res.surface_point, matched, warp_t, K, batch.cse_valid)
            if fine is not None:
                _, parts["cse2d_f"] = L.cse_losses(fine.result.surface_point, matched, warp_t, K, batch.cse_valid)
        else:
            zero = res.opacity.sum() * 0.0
            parts["cse3d"] = parts["cse2d_c"] = zero
            if fine is not None:
                parts["cse2d_f"] = zero

        train_idx = torch.nonzero(self.data.train).reshape(-1)
        roots = bundle.root_pose(train_idx, cams.init_root(train_idx))
        parts["cam"] = L.camera_smoothness(roots.rotation, roots.translation, self.data.video[train_idx])

        if fine is not None:
            fr = fine.result
            parts["pho_f"] = L.photometric(fr.color, batch.rgb)
            parts["sil_f"] = L.silhouette(fr.opacity, res.opacity, stop_target=True)
            if self.use_lqm:
                idx = fr.weights.detach().argmax(-1)
                pts = fine.warped.detach()[torch.arange(len(idx)), idx]
                rows = torch.nonzero(inside).reshape(-1)
                spatial, temporal = L.quad_smoothness(
                    bundle.quad_coeffs,
                    pts[rows],
                    batch.frames[rows],
                    batch.next_frames[rows],
                    batch.next_valid[rows],
                    sch.quad_neighbors,
                    self.quad_eps(),
                    generator,
                )
                parts["q_spatial"], parts["q_temporal"] = spatial, temporal
        return parts, co, fine

    # -- optimization ------------------------------------------------------

    def step(self) -> L.LossReport:
        """One optimization step (boundary actions first)."""
        self.transition()
        if self.opt_phase != self.phase:
            if set(self.active_blocks(self.opt_phase)) != set(self.active_blocks()):
                self._build_optimizer(self.phase)
            self.opt_phase = self.phase
        self.refresh_cache()
        s = self.step_count
        g = step_generator(self.seed, s)
        batch = self.sample_batch(g)
        parts, co, fine = self.compute_losses(batch, g)
        missing = set(self.reported_terms()) - set(parts)
        if missing:
            raise RuntimeError(f"loss terms silently dropped: {sorted(missing)}")
        flow_w = self.schedule.flow_weight(s, self.weights.flow)
        loss = L.total(parts, self.weights, flow_w)
        lr = self.schedule.learning_rate(s)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        if torch.is_tensor(loss) and loss.requires_grad:
            loss.backward()
        self.optimizer.step()

        with torch.no_grad():
            branch = fine if fine is not None else co
            err = (branch.result.color - batch.rgb).abs().sum(-1).double()
            self.error_map *= 0.5 ** (1.0 / self.schedule.error_half_life)
            self.error_map[batch.flat] = err
        report = L.LossReport(s, {k: float(v.detach()) for k, v in parts.items()}, float(loss.detach()))
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(report.record() + "\n")
        self.step_count += 1
        return report

    def run(self, until=None, callback=None):
        until = self.schedule.total_steps if until is None else min(until, self.schedule.total_steps)
        reports = []
        while self.step_count < until:
            reports.append(self.step())
            if callback is not None:
                callback(self, reports[-1])
        return reports

    # -- checkpoints -------------------------------------------------------

    def save(self, path):
        save_checkpoint(
            path,
            self.bundle,
            self.step_count,
            optimizer=self.optimizer.state_dict(),
            opt_phase=self.opt_phase,
            error_map=self.error_map.clone(),
            cache=None if self.cache is None else self.cache.state(),
            cache_step=self.cache_step,
            schedule=dataclasses.asdict(self.schedule),
            weights=dataclasses.asdict(self.weights),
            seed=self.seed,
            use_lqm=self.use_lqm,
        )

    @classmethod
    def resume(cls, path, data: TrainData, log_path=None, schedule=None):
        """Rebuild a trainer from a checkpoint written by :meth:`save`."""
        bundle, step, extra = load_checkpoint(path)
        needed = ("optimizer", "opt_phase", "error_map", "schedule", "weights", "seed")
        if any(k not in extra for k in needed):
            raise CheckpointError(f"{path} holds no trainer state; it cannot be resumed")
        sch = schedule or Schedule(**extra["schedule"])
        tr = cls(bundle, data, sch, L.LossWeights(**extra["weights"]), extra["seed"], extra["use_lqm"], log_path)
        tr.step_count = step
        tr._build_optimizer(extra["opt_phase"])
        tr.optimizer.load_state_dict(extra["optimizer"])
        tr.error_map = extra["error_map"].clone()
        if extra.get("cache") is not None:
            tr.cache = SurfaceCache.from_state(extra["cache"])
            tr.cache_step = extra["cache_step"]
        return tr


@torch.no_grad()
def fill_heldout_codes(bundle: FieldBundle, data: TrainData):
    """Give held-out frames the average latent codes of their nearest
    training neighbors in the same video."""
    train = data.train.numpy()
    video = data.video.numpy()
    tables = (bundle.env_codes, bundle.root_codes, bundle.bone_codes, bundle.deform_codes)
    for g in np.nonzero(~train)[0]:
        same = np.nonzero(train & (video == video[g]))[0]
        if len(same) == 0:
            continue
        before, after = same[same < g], same[same > g]
        nbrs = [x for x in (before[-1:], after[:1]) if len(x)]
        idx = torch.as_tensor(np.concatenate(nbrs))
        for tab in tables:
            tab[g] = tab[idx].mean(0)
