"""Coarse-to-fine forward pass: cast rays, warp samples into canonical space,
query the canonical fields, refine with the local quadratic model, composite.

Every ray carries its own frame index, so a batch may mix frames freely.
Image space is the camera frame: rays start at the origin and the refined
root pose maps canonical (object) points into it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .deformation import (
    RigidTransform,
    apply_quadratic,
    blend_points,
    invert_quadratic,
    pose_bones,
    skinning_weights,
)
from .errors import InvalidArgument
from .fields import FieldBundle
from .geometry import (
    COARSE_SAMPLES,
    FINE_SAMPLES,
    CompositeResult,
    RaySamples,
    Rays,
    composite,
    pixel_rays,
    project_points,
    sample_importance,
    sample_uniform,
    sdf_to_density,
)
from .meshing import TriMesh, grid_points, marching_cubes

NEAR_FAR_PAD = 1.2
CACHE_RESOLUTION = 64
MATCH_CANDIDATES = 8


@dataclass
class Cameras:
    """Per-frame intrinsics (T, 4) and initial root poses (T, 3, 4).

    ``radius`` bounds the object around its root center; rays are clipped to
    the sphere of radius ``NEAR_FAR_PAD * radius`` around it.
    """

    intrinsics: torch.Tensor
    init_poses: torch.Tensor
    radius: float = 1.0

    def init_root(self, frames) -> RigidTransform:
        p = self.init_poses[frames]
        return RigidTransform(p[..., :3, :3], p[..., :3, 3])


# ---------------------------------------------------------------------------
# Per-ray deformation state
# ---------------------------------------------------------------------------


def _lift(t, k):
    """Insert ``k`` singleton axes after the leading ray axis."""
    return t.reshape(t.shape[0], *([1] * k), *t.shape[1:])


def _lift_rt(rt: RigidTransform, k):
    return RigidTransform(_lift(rt.rotation, k), _lift(rt.translation, k))


@dataclass
class FrameState:
    """Root and bone transforms for each ray's frame."""

    frames: torch.Tensor  # (N,)
    root: RigidTransform  # (N, 3, 3), (N, 3)
    bones: RigidTransform  # (N, B, 3, 3), (N, B, 3)
    centers: torch.Tensor  # (B, 3) canonical
    orientations: torch.Tensor  # (B, 3, 3) canonical
    scales: torch.Tensor  # (B, 3)
    posed_centers: torch.Tensor  # (N, B, 3)
    posed_orientations: torch.Tensor  # (N, B, 3, 3)


def frame_state(bundle: FieldBundle, frames, cameras: Cameras, root=None) -> FrameState:
    """Evaluate pose networks for every ray. ``root`` overrides the refined
    root pose (novel-view rendering)."""
    frames = bundle._frames(frames)
    if root is None:
        root = bundle.root_pose(frames, cameras.init_root(frames))
    bones = bundle.bone_pose(frames)
    centers = bundle.bones.centers
    orient = bundle.bones.orientations()
    posed_c, posed_o = pose_bones(centers, orient, bones)
    return FrameState(frames, root, bones, centers, orient, bundle.bones.scales(), posed_c, posed_o)


def backward_warp(bundle: FieldBundle, st: FrameState, x_t, fine=False):
    """Frame points (N, ..., 3) -> coarse canonical points and skinning weights.

    The fine branch adds the learned skinning-logit correction.
    """
    k = x_t.dim() - 2
    x_root = _lift_rt(st.root, k).inverse().apply(x_t)
    delta = bundle.skin_delta(x_root, _lift(st.frames, k)) if fine else None
    weights = skinning_weights(
        x_root, _lift(st.posed_centers, k), _lift(st.posed_orientations, k), st.scales, delta
    )
    return blend_points(x_root, _lift_rt(st.bones, k).inverse(), weights), weights


def forward_warp(st: FrameState, x_c):
    """Canonical points (N, ..., 3) -> frame points, weights at the canonical bones."""
    k = x_c.dim() - 2
    weights = skinning_weights(x_c, st.centers, st.orientations, st.scales)
    return _lift_rt(st.root, k).apply(blend_points(x_c, _lift_rt(st.bones, k), weights))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def cast_rays(intrinsics, pixels, root: RigidTransform, radius, pad=NEAR_FAR_PAD) -> Rays:
    """Camera-frame rays through ``pixels`` with depth bounds around the root center."""
    dirs = pixel_rays(intrinsics, pixels)
    dist = root.translation.norm(dim=-1)
    reach = pad * radius
    near = (dist - reach).clamp_min(1e-3)
    far = torch.maximum(dist + reach, near + 1e-3)
    return Rays(torch.zeros_like(dirs), dirs, near, far)


@dataclass
class BranchRender:
    samples: RaySamples
    warped: torch.Tensor  # (N, H, 3) coarse canonical points
    canonical: torch.Tensor  # (N, H, 3) points at which the canonical field is queried
    sdf: torch.Tensor  # (N, H)
    result: CompositeResult


def _shade(bundle, st, rays, samples, warped, canonical, which):
    sdf = bundle.canonical_sdf(canonical, which)
    density = sdf_to_density(sdf, bundle.alpha)
    view = (st.root.rotation.transpose(-1, -2) @ rays.directions[..., None])[..., 0]
    view = view[:, None, :].expand_as(canonical)
    env = bundle.env_code(st.frames)[:, None, :]
    rgb = bundle.canonical_color(canonical, view, env, which)
    return BranchRender(samples, warped, canonical, sdf, composite(density, rgb, samples.intervals, canonical))


def render_coarse(bundle, st: FrameState, rays: Rays, count=COARSE_SAMPLES, generator=None) -> BranchRender:
    """Uniform samples, skinning-only backward warp, coarse canonical fields."""
    samples = sample_uniform(rays, count, generator)
    warped, _ = backward_warp(bundle, st, samples.points)
    return _shade(bundle, st, rays, samples, warped, warped, "coarse")


def render_fine(
    bundle, st: FrameState, rays: Rays, coarse: BranchRender, count=FINE_SAMPLES, generator=None, use_lqm=True
) -> BranchRender:
    """Importance samples merged with the coarse ones, skinning with the learned
    delta, local quadratic refinement, fine canonical fields."""
    samples = sample_importance(rays, coarse.samples, coarse.result.weights, count, generator)
    warped, _ = backward_warp(bundle, st, samples.points, fine=True)
    canonical = warped
    if use_lqm:
        coeffs = bundle.quad_coeffs(warped, st.frames[:, None])
        canonical = apply_quadratic(coeffs, warped)
    return _shade(bundle, st, rays, samples, warped, canonical, "fine")


@dataclass
class RenderRequest:
    frames: torch.Tensor  # (N,)
    pixels: torch.Tensor  # (N, 2)
    branch: str = "both"  # coarse | fine | both
    coarse_samples: int = COARSE_SAMPLES
    fine_samples: int = FINE_SAMPLES
    use_lqm: bool = True

    def __post_init__(self):
        if self.branch not in ("coarse", "fine", "both"):
            raise InvalidArgument(f"branch must be coarse, fine or both, got {self.branch!r}")


@dataclass
class PixelRender:
    state: FrameState
    rays: Rays
    coarse: BranchRender
    fine: BranchRender | None = None

    @property
    def color(self):
        return (self.fine or self.coarse).result.color

    @property
    def opacity(self):
        return (self.fine or self.coarse).result.opacity


def render_pixels(
    bundle, request: RenderRequest, cameras: Cameras, generator=None, root=None, image_size=None
) -> PixelRender:
    """Render a set of pixels; the coarse pass always runs (it drives the
    importance sampling of the fine one)."""
    if image_size is not None:
        h, w = image_size
        px = request.pixels
        if torch.any(px[:, 0] < 0) or torch.any(px[:, 0] > w) or torch.any(px[:, 1] < 0) or torch.any(px[:, 1] > h):
            raise InvalidArgument("pixel coordinates outside the image")
    st = frame_state(bundle, request.frames, cameras, root)
    rays = cast_rays(cameras.intrinsics[st.frames], request.pixels, st.root, cameras.radius)
    coarse = render_coarse(bundle, st, rays, request.coarse_samples, generator)
    fine = None
    if request.branch in ("fine", "both"):
        fine = render_fine(bundle, st, rays, coarse, request.fine_samples, generator, request.use_lqm)
    return PixelRender(st, rays, coarse, fine)


def image_pixels(height, width, dtype=torch.float64):
    """Pixel-center coordinates (H*W, 2) in row-major order."""
    jj, ii = torch.meshgrid(torch.arange(width, dtype=dtype), torch.arange(height, dtype=dtype), indexing="xy")
    return torch.stack([jj.reshape(-1) + 0.5, ii.reshape(-1) + 0.5], dim=-1)


@torch.no_grad()
def render_image(
    bundle,
    frame,
    cameras: Cameras,
    size,
    coarse_samples=COARSE_SAMPLES,
    fine_samples=FINE_SAMPLES,
    branch="both",
    use_lqm=True,
    root: RigidTransform | None = None,
    chunk=2048,
):
    """Full-frame render; returns a dict of numpy rasters per branch
    (``coarse_rgb``, ``coarse_opacity``, ``fine_rgb``, ``fine_opacity``)."""
    h, w = size
    dtype = bundle.log_alpha.dtype
    pixels = image_pixels(h, w, dtype)
    out = {}
    for start in range(0, len(pixels), chunk):
        px = pixels[start : start + chunk]
        frames = torch.full((len(px),), int(frame), dtype=torch.long)
        r = None
        if root is not None:
            r = RigidTransform(root.rotation.expand(len(px), 3, 3), root.translation.expand(len(px), 3))
        req = RenderRequest(frames, px, branch, coarse_samples, fine_samples, use_lqm)
        pr = render_pixels(bundle, req, cameras, root=r)
        parts = {"coarse": pr.coarse, "fine": pr.fine}
        for name, br in parts.items():
            if br is None or (branch != "both" and name != branch):
                continue
            out.setdefault(f"{name}_rgb", []).append(br.result.color)
            out.setdefault(f"{name}_opacity", []).append(br.result.opacity)
    result = {}
    for k, v in out.items():
        arr = torch.cat(v).cpu().numpy()
        result[k] = arr.reshape(h, w, 3) if k.endswith("rgb") else arr.reshape(h, w)
    return result


# ---------------------------------------------------------------------------
# Canonical-embedding surface cache
# ---------------------------------------------------------------------------


def closest_on_triangles(p, a, b, c):
    """Barycentric weights (..., 3) of the closest point to ``p`` on triangles
    (a, b, c); works in any dimension (Voronoi-region classification)."""

    def dot(u, v):
        return (u * v).sum(-1)

    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = d1.shape
    w = np.zeros(n + (3,))
    done = np.zeros(n, dtype=bool)

    def assign(cond, wa, wb, wc):
        nonlocal done
        m = cond & ~done
        w[m, 0], w[m, 1], w[m, 2] = wa[m], wb[m], wc[m]
        done |= m

    one, zero = np.ones(n), np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), one, zero, zero)
        assign((d3 >= 0) & (d4 <= d3), zero, one, zero)
        assign((d6 >= 0) & (d5 <= d6), zero, zero, one)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - v, v, zero)
        v = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - v, zero, v)
        v = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - v, v)
        denom = va + vb + vc
        vv, ww = vb / denom, vc / denom
        assign(np.ones(n, dtype=bool), 1 - vv - ww, vv, ww)
    # degenerate triangles produce NaNs; fall back to vertex a
    bad = ~np.isfinite(w).all(-1)
    w[bad] = [1.0, 0.0, 0.0]
    return w


class SurfaceCache:
    """Canonical surface vertices with their embeddings, for matching CSE
    observations to "the closest interpolated point" on the surface.

    Matching finds the nearest vertices in embedding space, then the closest
    point (in embedding space) on the triangles around them, and returns the
    corresponding barycentric interpolation of vertex positions.
    """

    def __init__(self, vertices, faces, embeddings, candidates=MATCH_CANDIDATES):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.candidates = candidates
        self._tree = cKDTree(self.embeddings) if len(self.faces) else None
        if len(self.faces):
            deg = np.bincount(self.faces.reshape(-1), minlength=len(self.vertices))
            adj = -np.ones((len(self.vertices), max(int(deg.max()), 1)), dtype=np.int64)
            fill = np.zeros(len(self.vertices), dtype=np.int64)
            for f, tri in enumerate(self.faces):
                for v in tri:
                    adj[v, fill[v]] = f
                    fill[v] += 1
            self._adjacency = adj

    @property
    def empty(self):
        return len(self.faces) == 0

    @classmethod
    def from_mesh(cls, mesh: TriMesh, embed_fn, candidates=MATCH_CANDIDATES):
        if mesh.is_empty:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 1)))
        return cls(mesh.vertices, mesh.faces, embed_fn(mesh.vertices), candidates)

    @classmethod
    @torch.no_grad()
    def build(cls, bundle: FieldBundle, resolution=CACHE_RESOLUTION, which="coarse"):
        """Extract the current zero level set and embed its vertices."""
        mesh = extract_canonical_mesh(bundle, resolution, which)
        dtype = bundle.log_alpha.dtype

        def embed(v):
            return bundle.canonical_embedding(torch.as_tensor(v, dtype=dtype)).double().numpy()

        return cls.from_mesh(mesh, embed)

    def match(self, queries):
        """Matched canonical points (M, 3) for query embeddings (M, E)."""
        if self.empty:
            raise InvalidArgument("surface cache is empty")
        q = np.asarray(queries, dtype=np.float64)
        k = min(self.candidates, len(self.vertices))
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        cand = self._adjacency[idx].reshape(len(q), -1)  # (M, C) face ids, -1 padded
        valid = cand >= 0
        faces = self.faces[np.where(valid, cand, 0)]  # (M, C, 3)
        e = self.embeddings[faces]  # (M, C, 3, E)
        w = closest_on_triangles(q[:, None, :], e[:, :, 0], e[:, :, 1], e[:, :, 2])
        proj = (w[..., None] * e).sum(-2)
        err = ((proj - q[:, None, :]) ** 2).sum(-1)
        err = np.where(valid, err, np.inf)
        best = err.argmin(-1)
        rows = np.arange(len(q))
        pos = self.vertices[faces[rows, best]]  # (M, 3, 3)
        return (w[rows, best][..., None] * pos).sum(-2)

    def state(self):
        return {"vertices": self.vertices, "faces": self.faces, "embeddings": self.embeddings}

    @classmethod
    def from_state(cls, state):
        return cls(state["vertices"], state["faces"], state["embeddings"])


def expected_surface_and_cse(bundle, st: FrameState, branch: BranchRender, targets, cache: SurfaceCache, intrinsics):
    """Expected canonical point of each ray, its embedding-matched surface
    point and both frame-t projections.

    ``targets`` are the observed canonical CSE points; their embeddings are
    matched against the cache. Returns None when the cache is empty.
    """
    expected = branch.result.surface_point
    if cache is None or cache.empty:
        return None
    with torch.no_grad():
        query = bundle.canonical_embedding(targets).double().cpu().numpy()
    matched = torch.as_tensor(cache.match(query), dtype=expected.dtype)
    p_exp = project_points(intrinsics, forward_warp(st, expected))
    p_match = project_points(intrinsics, forward_warp(st, matched))
    return expected, matched, p_exp, p_match


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------


@torch.no_grad()
def canonical_sdf_grid(bundle, resolution, which="fine", chunk=65536):
    bound = bundle.cfg.bound
    pts = grid_points(resolution, (-bound, bound)).reshape(-1, 3)
    dtype = bundle.log_alpha.dtype
    out = []
    for s in range(0, len(pts), chunk):
        out.append(bundle.canonical_sdf(torch.as_tensor(pts[s : s + chunk], dtype=dtype), which).double().numpy())
    return np.concatenate(out).reshape(resolution, resolution, resolution)


def extract_canonical_mesh(bundle, resolution, which="fine") -> TriMesh:
    bound = bundle.cfg.bound
    return marching_cubes(canonical_sdf_grid(bundle, resolution, which), (-bound, bound))


@torch.no_grad()
def pose_mesh(bundle, mesh: TriMesh, frame, cameras: Cameras, use_lqm=True, iters=10) -> TriMesh:
    """Carry a canonical (fine) mesh into frame ``frame``'s camera space.

    The local quadratic map is inverted per vertex by fixed-point iteration,
    then the coarse forward warp is applied.
    """
    dtype = bundle.log_alpha.dtype
    v = torch.as_tensor(mesh.vertices, dtype=dtype)
    frames = torch.full((len(v),), int(frame), dtype=torch.long)
    if use_lqm:
        v = invert_quadratic(lambda x: bundle.quad_coeffs(x, frames), v, iters)
    st = frame_state(bundle, frames[:1], cameras)
    st1 = FrameState(
        st.frames,
        RigidTransform(st.root.rotation[0], st.root.translation[0]),
        RigidTransform(st.bones.rotation[0], st.bones.translation[0]),
        st.centers,
        st.orientations,
        st.scales,
        st.posed_centers[0],
        st.posed_orientations[0],
    )
    weights = skinning_weights(v, st1.centers, st1.orientations, st1.scales)
    posed = st1.root.apply(blend_points(v, st1.bones, weights))
    return TriMesh(posed.double().numpy(), mesh.faces.copy(), mesh.colors, mesh.embeddings)
