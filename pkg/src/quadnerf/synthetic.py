"""Analytic oracle scenes with exact ground truth.

A scene is an analytic canonical shape deformed by a prescribed quadratic bend
followed by a smooth two-bone articulation, then carried into each camera by
a rigid root pose. Everything is a smooth function of continuous time, so
flows and ground-truth meshes are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .errors import GenerationError, InvalidArgument
from .meshing import TriMesh, grid_points, marching_cubes

SHAPES = ("sphere", "ellipsoid", "capsule")


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass
class SyntheticScene:
    shape: str = "capsule"
    radius: float = 0.15
    half_length: float = 0.35
    semi_axes: tuple = (0.45, 0.28, 0.22)
    bend_amplitude: float = 0.5  # joint angle (rad)
    quad_amplitude: float = 0.6  # y += kappa * x^2
    joint_width: float = 0.1
    period: float = 24.0  # frames per motion cycle
    camera_distance: float = 3.0
    focal_factor: float = 2.3  # focal length / image size
    pitch: float = 0.3
    yaw_spread: float = 0.5  # yaw offset between videos (rad)
    yaw_rate: float = 0.01  # orbit speed (rad / frame)
    static: bool = False
    camera_shift: tuple = (0.0, 0.0, 0.0)  # extra camera-frame translation per frame
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidArgument(f"unknown scene {self.shape!r}; valid scenes: {', '.join(SHAPES)}")

    # -- shape -------------------------------------------------------------

    @property
    def extent(self):
        if self.shape == "capsule":
            return self.half_length + self.radius
        if self.shape == "ellipsoid":
            return max(self.semi_axes)
        return self.radius

    def canonical_sdf(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - self.radius
        if self.shape == "ellipsoid":
            a = np.asarray(self.semi_axes)
            k0 = np.linalg.norm(p / a, axis=-1)
            k1 = np.linalg.norm(p / (a * a), axis=-1)
            return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)
        q = p.copy()
        q[..., 0] = p[..., 0] - np.clip(p[..., 0], -self.half_length, self.half_length)
        return np.linalg.norm(q, axis=-1) - self.radius

    def canonical_mesh(self, resolution=96):
        b = self.extent * 1.25
        grid = grid_points(resolution, (-b, b))
        return marching_cubes(self.canonical_sdf(grid), (-b, b))

    # -- motion ------------------------------------------------------------

    def _phase(self, video):
        return 2.0 * math.pi * ((self.seed * 0.37 + video * 0.29) % 1.0)

    def joint_angle(self, video, s):
        if self.static or self.shape == "sphere":
            return 0.0
        return self.bend_amplitude * math.sin(2 * math.pi * s / self.period + self._phase(video))

    def bend(self, video, s):
        if self.static or self.shape == "sphere":
            return 0.0
        return self.quad_amplitude * math.sin(2 * math.pi * s / (1.5 * self.period) + 0.7 * self._phase(video) + 1.0)

    def root_pose(self, video, s):
        """(R, t) object -> camera at continuous frame time s."""
        if self.static:
            yaw = self.yaw_spread * (video - 1)
        else:
            yaw = self.yaw_spread * (video - 1) + self.yaw_rate * s
        R = _rot_x(self.pitch) @ _rot_y(yaw)
        t = np.array([0.0, 0.0, self.camera_distance]) + np.asarray(self.camera_shift) * s
        return R, t

    def _weight(self, x):
        return 0.5 * (1.0 + np.tanh(x / self.joint_width))

    def _weight_grad(self, x):
        w = self._weight(x)
        return 2.0 / self.joint_width * w * (1.0 - w)

    def deform(self, video, s, p):
        """Canonical -> root-frame deformation at time s."""
        p = np.array(p, dtype=np.float64)
        kappa = self.bend(video, s)
        q = p.copy()
        q[..., 1] += kappa * p[..., 0] ** 2
        R = _rot_z(self.joint_angle(video, s))
        w = self._weight(q[..., 0])[..., None]
        return q + w * (q @ R.T - q)

    def deform_jacobian(self, video, s, p):
        p = np.asarray(p, dtype=np.float64)
        kappa = self.bend(video, s)
        jq = np.broadcast_to(np.eye(3), p.shape[:-1] + (3, 3)).copy()
        jq[..., 1, 0] = 2 * kappa * p[..., 0]
        q = p.copy()
        q[..., 1] += kappa * p[..., 0] ** 2
        R = _rot_z(self.joint_angle(video, s))
        w = self._weight(q[..., 0])[..., None, None]
        dw = self._weight_grad(q[..., 0])
        jb = np.eye(3) + w * (R - np.eye(3))
        jb[..., :, 0] += (q @ R.T - q) * dw[..., None]
        return jb @ jq

    def inverse_deform(self, video, s, y, iters=30):
        """Newton solve of ``deform(p) = y``."""
        y = np.asarray(y, dtype=np.float64)
        R = _rot_z(self.joint_angle(video, s))
        w = self._weight(y[..., 0])[..., None]
        q = (1 - w) * y + w * (y @ R)  # rough inverse rotation
        kappa = self.bend(video, s)
        p = q.copy()
        p[..., 1] -= kappa * q[..., 0] ** 2
        for _ in range(iters):
            r = self.deform(video, s, p) - y
            if np.abs(r).max(initial=0.0) < 1e-13:
                break
            J = self.deform_jacobian(video, s, p)
            p = p - np.linalg.solve(J, r[..., None])[..., 0]
        return p

    def to_camera(self, video, s, p):
        R, t = self.root_pose(video, s)
        return self.deform(video, s, p) @ R.T + t

    def from_camera(self, video, s, x):
        R, t = self.root_pose(video, s)
        return self.inverse_deform(video, s, (np.asarray(x) - t) @ R)

    # -- appearance --------------------------------------------------------

    def albedo(self, p):
        p = np.asarray(p)
        c = np.stack(
            [
                0.55 + 0.35 * np.sin(6.0 * p[..., 0] + 0.3),
                0.5 + 0.35 * np.sin(7.0 * p[..., 1] + 5.0 * p[..., 0]),
                0.5 + 0.35 * np.cos(6.0 * p[..., 2] - 4.0 * p[..., 0]),
            ],
            axis=-1,
        )
        return np.clip(c, 0.0, 1.0)

    def canonical_normal(self, p, h=1e-5):
        g = np.stack(
            [
                self.canonical_sdf(p + h * e) - self.canonical_sdf(p - h * e)
                for e in np.eye(3)
            ],
            axis=-1,
        )
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def light(self, video):
        """(direction towards the light in camera frame, tint) of the video's lighting state."""
        if video % 2 == 0:
            d, tint = np.array([-0.4, -0.6, -0.7]), np.array([1.0, 1.0, 1.0])
        else:
            d, tint = np.array([0.6, -0.2, -0.75]), np.array([1.0, 0.85, 0.7])
        return d / np.linalg.norm(d), tint


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def camera_for(scene: SyntheticScene, size):
    f = scene.focal_factor * size
    return dataio.CameraModel(f, f, size / 2.0, size / 2.0)


def pixel_grid(size):
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    return np.stack([jj + 0.5, ii + 0.5], axis=-1).astype(np.float64)  # (u, v)


def trace(scene: SyntheticScene, video, s, camera, pixels, step=0.02, bisect=45):
    """First surface hit along each pixel ray.

    Returns (hit mask, camera-frame hit points, canonical hit points).
    """
    shape = pixels.shape[:-1]
    pix = pixels.reshape(-1, 2)
    d = np.stack(
        [(pix[:, 0] - camera.cx) / camera.fx, (pix[:, 1] - camera.cy) / camera.fy, np.ones(len(pix))], axis=-1
    )
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    _, center = scene.root_pose(video, s)
    reach = 1.25 * scene.extent + 0.05
    proj = d @ center
    disc = proj**2 - (center @ center - reach**2)
    cand = np.nonzero(disc > 0)[0]
    hit = np.zeros(len(pix), dtype=bool)
    x_cam = np.zeros((len(pix), 3))
    x_can = np.zeros((len(pix), 3))
    if len(cand):
        root = np.sqrt(disc[cand])
        near, far = proj[cand] - root, proj[cand] + root
        n_steps = int(np.ceil((far - near).max() / step)) + 1
        taus = near[:, None] + np.arange(n_steps)[None, :] * step
        taus = np.minimum(taus, far[:, None])
        pts = taus[..., None] * d[cand, None, :]
        sdf = scene.canonical_sdf(scene.from_camera(video, s, pts.reshape(-1, 3))).reshape(taus.shape)
        inside = sdf < 0
        first = np.argmax(inside, axis=1)
        has = inside[np.arange(len(cand)), first]
        first = np.maximum(first, 1)
        rows = np.nonzero(has)[0]
        lo = taus[rows, first[rows] - 1]
        hi = taus[rows, first[rows]]
        dirs = d[cand[rows]]
        for _ in range(bisect):
            mid = 0.5 * (lo + hi)
            val = scene.canonical_sdf(scene.from_camera(video, s, mid[:, None] * dirs))
            inside_mid = val < 0
            hi = np.where(inside_mid, mid, hi)
            lo = np.where(inside_mid, lo, mid)
        tau = 0.5 * (lo + hi)
        idx = cand[rows]
        hit[idx] = True
        x_cam[idx] = tau[:, None] * dirs
        x_can[idx] = scene.from_camera(video, s, x_cam[idx])
    return hit.reshape(shape), x_cam.reshape(*shape, 3), x_can.reshape(*shape, 3)


def shade(scene: SyntheticScene, video, s, x_can, hit):
    """Lambertian shading with ambient term; zero background."""
    R, _ = scene.root_pose(video, s)
    n_c = scene.canonical_normal(x_can)
    J = scene.deform_jacobian(video, s, x_can)
    n_r = np.linalg.solve(np.swapaxes(J, -1, -2), n_c[..., None])[..., 0]
    n_cam = n_r @ R.T
    n_cam /= np.maximum(np.linalg.norm(n_cam, axis=-1, keepdims=True), 1e-12)
    light, tint = scene.light(video)
    diffuse = np.clip((n_cam * light).sum(-1), 0.0, 1.0)[..., None]
    rgb = scene.albedo(x_can) * (0.35 + 0.65 * diffuse) * tint
    return np.where(hit[..., None], np.clip(rgb, 0, 1), 0.0)


@dataclass
class GeneratedFrame:
    rgb: np.ndarray
    mask: np.ndarray
    flow: np.ndarray | None
    cse_points: np.ndarray
    cse_valid: np.ndarray
    pose: np.ndarray  # (3, 4)
    gt_mesh: TriMesh


def render_frame(scene: SyntheticScene, video, s, size, camera=None, next_time=None):
    camera = camera or camera_for(scene, size)
    pixels = pixel_grid(size)
    hit, _, x_can = trace(scene, video, s, camera, pixels)
    rgb = shade(scene, video, s, x_can, hit)
    flow = None
    if next_time is not None:
        x_next = scene.to_camera(video, next_time, x_can[hit])
        if np.any(x_next[:, 2] <= 0):
            raise GenerationError("object moves behind the camera")
        uv = np.stack(
            [camera.fx * x_next[:, 0] / x_next[:, 2] + camera.cx, camera.fy * x_next[:, 1] / x_next[:, 2] + camera.cy],
            axis=-1,
        )
        flow = np.zeros((size, size, 2))
        flow[hit] = uv - pixels[hit]
    return hit, rgb, flow, x_can


def check_in_frustum(scene, video, s, camera, size, mesh):
    x = scene.to_camera(video, s, mesh.vertices)
    if np.any(x[:, 2] <= 0):
        raise GenerationError(f"object behind camera in video {video} frame {s}")
    u = camera.fx * x[:, 0] / x[:, 2] + camera.cx
    v = camera.fy * x[:, 1] / x[:, 2] + camera.cy
    if u.min() < 0 or v.min() < 0 or u.max() > size or v.max() > size:
        raise GenerationError(f"object leaves the image in video {video} frame {s}; adjust focal/camera distance")
    return x


def generate_synthetic(scene: SyntheticScene, root, videos=3, frames=30, size=64, mesh_resolution=96):
    """Render a dataset (layout of :mod:`quadnerf.dataio`) plus ground truth.

    Returns ``{video_name: [GeneratedFrame, ...]}`` holding exactly what was
    written (after 8-bit / float32 quantization).
    """
    root = Path(root)
    canon = scene.canonical_mesh(mesh_resolution)
    canon.save_obj(root / "gt_canonical.obj")
    camera = camera_for(scene, size)
    out = {}
    for v in range(videos):
        name = f"video{v:02d}"
        vdir = root / name
        for sub in ("rgb", "mask", "flow", "cse", "gt"):
            (vdir / sub).mkdir(parents=True, exist_ok=True)
        poses, records = [], []
        for i in range(frames):
            gt_vertices = check_in_frustum(scene, v, i, camera, size, canon)
            nxt = i + 1 if i < frames - 1 else None
            hit, rgb, flow, x_can = render_frame(scene, v, i, size, camera, nxt)
            rgb_q = dataio.write_rgb(vdir / "rgb" / f"{i:05d}.png", rgb)
            mask_q = dataio.write_mask(vdir / "mask" / f"{i:05d}.png", hit.astype(np.float64))
            flow_q = None
            if flow is not None:
                dataio.write_flow(vdir / "flow" / f"{i:05d}.bin", flow)
                flow_q = flow.astype(np.float32)
            dataio.write_cse(vdir / "cse" / f"{i:05d}.bin", x_can, hit)
            R, t = scene.root_pose(v, i)
            pose = np.concatenate([R, t[:, None]], axis=1)
            poses.append(pose)
            gt = TriMesh(gt_vertices, canon.faces.copy())
            gt.save_obj(vdir / "gt" / f"{i:05d}.obj")
            records.append(
                GeneratedFrame(rgb_q, mask_q, flow_q, x_can.astype(np.float32), hit, pose, gt)
            )
        cam = dataio.CameraModel(camera.fx, camera.fy, camera.cx, camera.cy, extrinsics=poses)
        dataio.write_camera(vdir / "camera.txt", cam)
        out[name] = records
    return out
