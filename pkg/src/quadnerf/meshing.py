"""Zero-level-set extraction and reconstruction / image metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure
from skimage.metrics import structural_similarity

from .errors import InvalidArgument, UndefinedMetric

PSNR_CAP = 100.0
DEFAULT_SURFACE_SAMPLES = 10_000
DESK_RESOLUTION = 128
PAPER_RESOLUTION = 512
DETAIL_RESOLUTION = 1024


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]
    embeddings: np.ndarray | None = None  # (V, 16)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def euler_characteristic(self):
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        used = np.unique(self.faces)
        return len(used) - len(edges) + len(self.faces)

    def bbox_longest_edge(self):
        return float(np.max(self.vertices.max(0) - self.vertices.min(0)))

    def save_obj(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, v in enumerate(self.vertices):
            vals = [float(x) for x in v]
            if self.colors is not None:
                vals += [float(x) for x in self.colors[i]]
            lines.append("v " + " ".join(repr(x) for x in vals))
        lines += [f"f {int(a) + 1} {int(b) + 1} {int(c) + 1}" for a, b, c in self.faces]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path):
        verts, cols, faces = [], [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
                if len(parts) >= 7:
                    cols.append([float(p) for p in parts[4:7]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        colors = np.asarray(cols) if cols and len(cols) == len(verts) else None
        return cls(
            np.asarray(verts, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3),
            colors,
        )


def _clean(vertices, faces, min_area=1e-12):
    """Weld coincident vertices, drop degenerate faces and unused vertices."""
    uniq, inverse = np.unique(vertices, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    mesh = TriMesh(uniq, faces)
    keep = mesh.face_areas() > min_area
    faces = faces[keep]
    used, remap = np.unique(faces, return_inverse=True)
    return TriMesh(uniq[used], remap.reshape(-1, 3).astype(np.int64))


def marching_cubes(sdf, bounds=(-1.0, 1.0)) -> TriMesh:
    """Triangulate the zero level set of a grid of SDF values.

    ``sdf`` is (R, R, R) indexed [i, j, k] -> (x_i, y_j, z_k) with grid points
    spanning ``bounds`` inclusively on every axis. A field that never changes
    sign yields an empty mesh.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    if sdf.ndim != 3 or min(sdf.shape) < 8:
        raise InvalidArgument(f"need an (R, R, R) grid with R >= 8, got {sdf.shape}")
    if sdf.min() > 0 or sdf.max() < 0:
        return TriMesh.empty()
    lo, hi = bounds
    spacing = tuple((hi - lo) / (n - 1) for n in sdf.shape)
    verts, faces, _, _ = measure.marching_cubes(sdf, level=0.0, spacing=spacing)
    return _clean(verts + lo, faces.astype(np.int64))


def grid_points(resolution, bounds=(-1.0, 1.0)):
    axis = np.linspace(bounds[0], bounds[1], resolution)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)


def sample_surface(mesh: TriMesh, count=DEFAULT_SURFACE_SAMPLES, seed=0):
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise UndefinedMetric("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    if areas.sum() <= 0:
        # point-like meshes (all faces degenerate): sample the vertices
        return mesh.vertices[rng.integers(0, len(mesh.vertices), count)]
    idx = rng.choice(len(areas), size=count, p=areas / areas.sum())
    tri = mesh.vertices[mesh.faces[idx]]
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return (w[:, :, None] * tri).sum(1)


def nearest_distances(src, dst):
    """Distance from every src point to its nearest dst point (kd-tree)."""
    _, idx = cKDTree(dst).query(src)
    return np.linalg.norm(src - dst[idx], axis=1)


def umeyama(src, dst, with_scale=True):
    """Least-squares similarity (s, R, t) with ``dst ≈ s R src + t``."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var = (a**2).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    return s, R, mu_d - s * R @ mu_s


def align_similarity(pred_pts, gt_pts, iters=30):
    """ICP with a similarity transform: returns the aligned prediction points.

    Initialized by matching centroids and RMS radii; each iteration solves a
    Umeyama fit on symmetric nearest-neighbor correspondences.
    """
    def rms(p):
        return math.sqrt(((p - p.mean(0)) ** 2).sum(1).mean())

    scale0 = rms(gt_pts) / max(rms(pred_pts), 1e-12)
    cur = (pred_pts - pred_pts.mean(0)) * scale0 + gt_pts.mean(0)
    gt_tree = cKDTree(gt_pts)
    for _ in range(iters):
        _, i_fwd = gt_tree.query(cur)
        _, i_bwd = cKDTree(cur).query(gt_pts)
        src = np.concatenate([cur, cur[i_bwd]])
        dst = np.concatenate([gt_pts[i_fwd], gt_pts])
        s, R, t = umeyama(src, dst)
        cur = s * cur @ R.T + t
    return cur


def _sampled_pair(pred, gt, samples, align, seed):
    if isinstance(pred, TriMesh):
        if pred.is_empty:
            raise UndefinedMetric("prediction mesh is empty")
        p = sample_surface(pred, samples, seed)
    else:
        p = np.asarray(pred, dtype=np.float64)
    if isinstance(gt, TriMesh):
        if gt.is_empty:
            raise UndefinedMetric("ground-truth mesh is empty")
        g = sample_surface(gt, samples, seed)
    else:
        g = np.asarray(gt, dtype=np.float64)
    if len(p) == 0 or len(g) == 0:
        raise UndefinedMetric("empty point set")
    if align:
        p = align_similarity(p, g)
    return p, g


def chamfer_points(p, g):
    """Symmetric mean nearest-neighbor distance between two point sets."""
    return 0.5 * (nearest_distances(p, g).mean() + nearest_distances(g, p).mean())


def fscore_points(p, g, threshold):
    """F-score (percent) of point matches within ``threshold``."""
    precision = float((nearest_distances(p, g) < threshold).mean())
    recall = float((nearest_distances(g, p) < threshold).mean())
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def chamfer(pred, gt, samples=DEFAULT_SURFACE_SAMPLES, align=True, seed=0):
    """Chamfer distance between meshes (or point sets), in ground-truth units."""
    p, g = _sampled_pair(pred, gt, samples, align, seed)
    return chamfer_points(p, g)


def default_threshold(gt):
    pts = gt.vertices if isinstance(gt, TriMesh) else np.asarray(gt)
    if len(pts) == 0:
        raise UndefinedMetric("ground truth is empty")
    return 0.02 * float(np.max(pts.max(0) - pts.min(0)))


def f_score(pred, gt, threshold=None, samples=DEFAULT_SURFACE_SAMPLES, align=True, seed=0):
    """F-score at ``threshold`` (default 2% of the longest GT bounding-box edge)."""
    if threshold is None:
        threshold = default_threshold(gt)
    p, g = _sampled_pair(pred, gt, samples, align, seed)
    return fscore_points(p, g, threshold)


def psnr(rendered, reference):
    mse = float(np.mean((np.asarray(rendered, np.float64) - np.asarray(reference, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(rendered, reference):
    """SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    a = np.asarray(rendered, np.float64)
    b = np.asarray(reference, np.float64)
    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            channel_axis=-1 if a.ndim == 3 else None,
        )
    )


def image_metrics(rendered, reference):
    rendered = np.asarray(rendered)
    reference = np.asarray(reference)
    if rendered.shape != reference.shape:
        raise InvalidArgument(f"image shapes differ: {rendered.shape} vs {reference.shape}")
    return psnr(rendered, reference), ssim(rendered, reference)


@dataclass
class MetricReport:
    chamfer_cm: float = float("nan")
    f_at_2pct: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    extra: dict = field(default_factory=dict)

    KEYS = {"chamfer_cm": "CD", "f_at_2pct": "F@2%", "psnr": "PSNR", "ssim": "SSIM"}

    def lines(self, prefix=""):
        out = [f"{prefix}{label} = {float(getattr(self, attr))!r}" for attr, label in self.KEYS.items()]
        out += [f"{prefix}{k} = {float(v)!r}" for k, v in self.extra.items()]
        return out

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @classmethod
    def read(cls, path):
        values = {}
        for line in Path(path).read_text().splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                values[k] = float(v)
        rev = {label: attr for attr, label in cls.KEYS.items()}
        report = cls()
        for k, v in values.items():
            if k in rev:
                setattr(report, rev[k], v)
            else:
                report.extra[k] = v
        return report
