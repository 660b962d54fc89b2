"""Dataset layout, raster formats and camera projection.

Layout (one directory per video, videos ordered by name)::

    root/<video>/rgb/00000.png      8-bit RGB
    root/<video>/mask/00000.png     8-bit grayscale, thresholded at 0.5
    root/<video>/flow/00000.bin     flow to the next frame (absent on the last)
    root/<video>/cse/00000.bin      matched canonical points + validity
    root/<video>/camera.txt         intrinsics, then optional per-frame poses
    root/<video>/gt/00000.obj       ground-truth mesh (synthetic data only)

Binary rasters are little endian: 8-byte magic, uint32 height, uint32 width,
then the payload in row-major order. Flow stores two float32 per pixel
(du, dv); CSE stores three float32 per pixel followed by one uint8 validity
byte per pixel.

``camera.txt``: the first non-comment line holds ``fx fy cx cy``; each further
line holds the 12 row-major entries of the 3x4 initial root pose ``[R | t]``
of one frame (object -> camera).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import BehindCamera, InvalidArgument, LoadError

FLOW_MAGIC = b"QNFLOW01"
CSE_MAGIC = b"QNCSE001"
_HEADER = struct.Struct("<8sII")
DEFAULT_DILATION = 5


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


@dataclass
class CameraModel:
    """Pinhole intrinsics (pixels) plus per-frame extrinsics (3x4, object -> camera)."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: list = field(default_factory=list)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("focal lengths must be positive")

    @property
    def intrinsics(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def project(camera: CameraModel, t, x):
    """Pixel coordinates of world point(s) x (..., 3) in local frame t."""
    x = np.asarray(x, dtype=np.float64)
    pose = np.asarray(camera.extrinsics[t]) if camera.extrinsics else np.eye(4)[:3]
    cam = x @ pose[:3, :3].T + pose[:3, 3]
    if np.any(cam[..., 2] <= 0):
        raise BehindCamera("point has nonpositive depth")
    u = camera.fx * cam[..., 0] / cam[..., 2] + camera.cx
    v = camera.fy * cam[..., 1] / cam[..., 2] + camera.cy
    return np.stack([u, v], axis=-1)


def unproject(camera: CameraModel, t, pixel, depth):
    """World point at camera-frame depth ``depth`` along the pixel's ray."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    cam = np.stack(
        [(pixel[..., 0] - camera.cx) / camera.fx * depth, (pixel[..., 1] - camera.cy) / camera.fy * depth, depth],
        axis=-1,
    )
    pose = np.asarray(camera.extrinsics[t]) if camera.extrinsics else np.eye(4)[:3]
    return (cam - pose[:3, 3]) @ pose[:3, :3]


def read_camera(path) -> CameraModel:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(v) for v in line.split()])
    if not rows or len(rows[0]) != 4:
        raise LoadError(f"{path}: first line must hold 'fx fy cx cy'")
    poses = []
    for i, r in enumerate(rows[1:]):
        if len(r) != 12:
            raise LoadError(f"{path}: pose line {i} has {len(r)} values, expected 12")
        poses.append(np.asarray(r).reshape(3, 4))
    return CameraModel(*rows[0], extrinsics=poses)


def write_camera(path, camera: CameraModel):
    lines = ["# fx fy cx cy", " ".join(repr(float(v)) for v in camera.intrinsics)]
    if camera.extrinsics:
        lines.append("# per-frame initial root pose, 3x4 row-major [R | t]")
        lines += [" ".join(repr(float(v)) for v in np.asarray(p).reshape(-1)) for p in camera.extrinsics]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------


def write_flow(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    h, w, _ = flow.shape
    Path(path).write_bytes(_HEADER.pack(FLOW_MAGIC, h, w) + flow.tobytes())


def read_flow(path):
    data = Path(path).read_bytes()
    magic, h, w = _HEADER.unpack_from(data)
    if magic != FLOW_MAGIC:
        raise LoadError(f"{path}: bad flow magic {magic!r}")
    body = data[_HEADER.size :]
    if len(body) != h * w * 8:
        raise LoadError(f"{path}: truncated flow raster")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float32)


def write_cse(path, points, valid):
    points = np.asarray(points, dtype="<f4")
    h, w, _ = points.shape
    valid = np.asarray(valid, dtype=np.uint8).reshape(h, w)
    Path(path).write_bytes(_HEADER.pack(CSE_MAGIC, h, w) + points.tobytes() + valid.tobytes())


def read_cse(path):
    data = Path(path).read_bytes()
    magic, h, w = _HEADER.unpack_from(data)
    if magic != CSE_MAGIC:
        raise LoadError(f"{path}: bad CSE magic {magic!r}")
    body = data[_HEADER.size :]
    if len(body) != h * w * 13:
        raise LoadError(f"{path}: truncated CSE raster")
    pts = np.frombuffer(body[: h * w * 12], dtype="<f4").reshape(h, w, 3).astype(np.float32)
    valid = np.frombuffer(body[h * w * 12 :], dtype=np.uint8).reshape(h, w).astype(bool)
    return pts, valid


def write_rgb(path, rgb):
    """rgb in [0, 1]; quantized to 8 bits. Returns the quantized float image."""
    q = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(q, "RGB").save(path)
    return q.astype(np.float32) / 255


def write_mask(path, mask):
    q = (np.asarray(mask) >= 0.5).astype(np.uint8) * 255
    Image.fromarray(q, "L").save(path)
    return q > 0


def read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255 >= 0.5


def dilate(mask, radius=DEFAULT_DILATION):
    if radius <= 0:
        return mask.copy()
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return ndimage.binary_dilation(mask, structure=(xx**2 + yy**2) <= radius**2)


def bilinear(raster, pixels):
    """Sample an (H, W, C) raster at continuous pixel coordinates (u, v).

    Pixel (row i, col j) has its center at (j + 0.5, i + 0.5); lookups are
    clamped to the raster border.
    """
    raster = np.asarray(raster)
    h, w = raster.shape[:2]
    u = np.clip(np.asarray(pixels)[..., 0] - 0.5, 0, w - 1)
    v = np.clip(np.asarray(pixels)[..., 1] - 0.5, 0, h - 1)
    j0 = np.floor(u).astype(int).clip(0, w - 2) if w > 1 else np.zeros_like(u, int)
    i0 = np.floor(v).astype(int).clip(0, h - 2) if h > 1 else np.zeros_like(v, int)
    a = (u - j0)[..., None]
    b = (v - i0)[..., None]
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    return (
        raster[i0, j0] * (1 - a) * (1 - b)
        + raster[i0, j1] * a * (1 - b)
        + raster[i1, j0] * (1 - a) * b
        + raster[i1, j1] * a * b
    )


# ---------------------------------------------------------------------------
# Collections
# ---------------------------------------------------------------------------


@dataclass
class FrameObservation:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) bool
    video: int
    index: int  # frame index within the video
    global_index: int
    flow_to_next: np.ndarray | None = None  # (H, W, 2) pixels
    cse_points: np.ndarray | None = None  # (H, W, 3) canonical points
    cse_valid: np.ndarray | None = None  # (H, W) bool
    init_root_pose: np.ndarray | None = None  # (3, 4)
    sample_region: np.ndarray | None = None  # (H, W) bool, dilated mask

    @property
    def shape(self):
        return self.mask.shape


@dataclass
class Video:
    name: str
    camera: CameraModel
    frames: list


@dataclass
class VideoCollection:
    videos: list
    frames: list  # FrameObservation in global order

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def image_shape(self):
        return self.frames[0].shape

    def video_ids(self):
        return np.array([f.video for f in self.frames])

    def is_video_final(self, g):
        f = self.frames[g]
        return f.index == len(self.videos[f.video].frames) - 1

    def camera_of(self, g):
        return self.videos[self.frames[g].video].camera

    def intrinsics(self):
        """(T, 4) intrinsics per global frame."""
        return np.stack([self.camera_of(g).intrinsics for g in range(self.num_frames)])

    def init_poses(self):
        """(T, 3, 4) initial root poses (identity when absent)."""
        eye = np.eye(4)[:3]
        return np.stack([f.init_root_pose if f.init_root_pose is not None else eye for f in self.frames])


_FRAME_RE = re.compile(r"^(\d{5})\.(png|bin|obj)$")


def _numbered(dirpath, ext):
    if not dirpath.is_dir():
        return {}
    out = {}
    for p in dirpath.iterdir():
        m = _FRAME_RE.match(p.name)
        if m and m.group(2) == ext:
            out[int(m.group(1))] = p
    return out


def load_dataset(root, dilation=DEFAULT_DILATION) -> VideoCollection:
    """Load every video under ``root`` with a consistent global frame index."""
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"dataset root {root} does not exist")
    video_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "rgb").is_dir())
    if not video_dirs:
        raise LoadError(f"no videos found under {root} (expected <video>/rgb/00000.png)")
    videos, frames = [], []
    shape = None
    for vid, vdir in enumerate(video_dirs):
        rgbs = _numbered(vdir / "rgb", "png")
        if sorted(rgbs) != list(range(len(rgbs))):
            raise LoadError(f"{vdir / 'rgb'}: frame numbering is not contiguous from 00000")
        masks = _numbered(vdir / "mask", "png")
        flows = _numbered(vdir / "flow", "bin")
        cses = _numbered(vdir / "cse", "bin")
        cam_path = vdir / "camera.txt"
        if not cam_path.exists():
            raise LoadError(f"{cam_path} is missing")
        camera = read_camera(cam_path)
        if camera.extrinsics and len(camera.extrinsics) != len(rgbs):
            raise LoadError(f"{cam_path}: {len(camera.extrinsics)} poses for {len(rgbs)} frames")
        vframes = []
        for i in range(len(rgbs)):
            try:
                rgb = read_rgb(rgbs[i])
                if i not in masks:
                    raise LoadError(f"{vdir / 'mask'}: missing {i:05d}.png")
                mask = read_mask(masks[i])
            except LoadError:
                raise
            except Exception as exc:
                raise LoadError(f"{rgbs[i]}: unreadable ({exc})") from exc
            if shape is None:
                shape = mask.shape
            if rgb.shape[:2] != shape or mask.shape != shape:
                raise LoadError(f"{rgbs[i]}: raster size {rgb.shape[:2]} differs from {shape}")
            obs = FrameObservation(
                rgb=rgb, mask=mask, video=vid, index=i, global_index=len(frames) + len(vframes)
            )
            final = i == len(rgbs) - 1
            if i in flows and not final:
                flow = read_flow(flows[i])
                if flow.shape[:2] != shape:
                    raise LoadError(f"{flows[i]}: raster size {flow.shape[:2]} differs from {shape}")
                obs.flow_to_next = flow
            if i in cses:
                pts, valid = read_cse(cses[i])
                if pts.shape[:2] != shape:
                    raise LoadError(f"{cses[i]}: raster size {pts.shape[:2]} differs from {shape}")
                obs.cse_points, obs.cse_valid = pts, valid
            if camera.extrinsics:
                obs.init_root_pose = camera.extrinsics[i]
            obs.sample_region = dilate(mask, dilation)
            vframes.append(obs)
        videos.append(Video(vdir.name, camera, vframes))
        frames.extend(vframes)
    return VideoCollection(videos, frames)
