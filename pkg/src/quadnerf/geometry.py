"""Ray sampling, positional encoding, SDF-to-density conversion and compositing.

All functions take torch tensors with arbitrary leading batch dimensions and
are differentiable end to end (except the sampling routines, whose depths are
treated as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidArgument

POSITION_BANDS = 10
DIRECTION_BANDS = 4
COARSE_SAMPLES = 256
FINE_SAMPLES = 128


@dataclass
class Rays:
    """A batch of rays ``r(tau) = origin + tau * direction``.

    origins, directions: (N, 3); near, far: (N,)
    """

    origins: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor

    def validate(self, tol=1e-9):
        norms = self.directions.norm(dim=-1)
        if not torch.all((norms - 1).abs() <= tol):
            raise InvalidArgument("ray directions must be unit length")
        if not torch.all(self.near > 0):
            raise InvalidArgument("near must be positive")
        if not torch.all(self.near < self.far):
            raise InvalidArgument("near must be smaller than far")
        return self


@dataclass
class RaySamples:
    depths: torch.Tensor  # (N, H)
    intervals: torch.Tensor  # (N, H)
    points: torch.Tensor  # (N, H, 3)


@dataclass
class CompositeResult:
    color: torch.Tensor  # (..., 3)
    opacity: torch.Tensor  # (...)
    weights: torch.Tensor  # (..., H)
    expected_point: torch.Tensor  # (..., 3), sum of weighted points

    @property
    def surface_point(self):
        """Weighted mean of the canonical points (expected point / opacity).

        The raw weighted sum shrinks toward the origin as opacity drops, so
        reprojection losses built on it reward density anywhere on the ray.
        """
        return self.expected_point / self.opacity.clamp_min(1e-4)[..., None]


def positional_encode(x, bands: int) -> torch.Tensor:
    """Encode coordinates as ``[x, sin(2^k x), cos(2^k x), ...]``.

    The raw coordinates come first, followed per coordinate by the sin/cos
    pairs for k = 0..bands-1. A python scalar or 0-d tensor is treated as a
    single coordinate. Output length is ``dim * (2 * bands + 1)``.
    """
    if bands <= 0:
        raise InvalidArgument(f"bands must be >= 1, got {bands}")
    if not torch.is_tensor(x):
        x = torch.tensor(x, dtype=torch.get_default_dtype())
    if x.dim() == 0:
        x = x.reshape(1)
    freqs = 2.0 ** torch.arange(bands, dtype=x.dtype, device=x.device)
    scaled = x[..., :, None] * freqs  # (..., D, L)
    pairs = torch.stack([torch.sin(scaled), torch.cos(scaled)], dim=-1)  # (..., D, L, 2)
    return torch.cat([x, pairs.flatten(-3)], dim=-1)


def encoded_size(dim: int, bands: int) -> int:
    return dim * (2 * bands + 1)


def sdf_to_density(d, alpha) -> torch.Tensor:
    """Density ``(1/alpha) * LaplaceCDF_alpha(-d)``.

    Positive inside the surface (d < 0) and decays to zero outside.
    """
    d = torch.as_tensor(d)
    alpha = torch.as_tensor(alpha, dtype=d.dtype)
    if torch.any(alpha <= 0):
        raise InvalidArgument("alpha must be positive")
    half_tail = 0.5 * torch.exp(-d.abs() / alpha)
    cdf = torch.where(d >= 0, half_tail, 1.0 - half_tail)
    return cdf / alpha


def composite(densities, colors, intervals, canonical_points) -> CompositeResult:
    """Front-to-back alpha compositing along the last sample axis.

    Each segment transmits ``exp(-sigma_h * delta_h)``; the weight of sample h
    is the transmittance up to h times the absorption at h.
    """
    H = densities.shape[-1]
    if H < 1:
        raise InvalidArgument("need at least one sample")
    if intervals.shape[-1] != H or colors.shape[-2] != H or canonical_points.shape[-2] != H:
        raise InvalidArgument(
            f"sample counts differ: densities {tuple(densities.shape)}, colors "
            f"{tuple(colors.shape)}, intervals {tuple(intervals.shape)}, points "
            f"{tuple(canonical_points.shape)}"
        )
    optical = densities * intervals
    # exclusive cumulative optical depth
    accum = torch.cumsum(optical, dim=-1) - optical
    weights = torch.exp(-accum) * -torch.expm1(-optical)
    color = (weights[..., None] * colors).sum(-2)
    opacity = weights.sum(-1)
    expected = (weights[..., None] * canonical_points).sum(-2)
    return CompositeResult(color, opacity, weights, expected)


def _intervals_from_depths(depths, far):
    gaps = depths[..., 1:] - depths[..., :-1]
    last = far[..., None] - depths[..., -1:]
    return torch.cat([gaps, last], dim=-1)


def _points(rays: Rays, depths):
    return rays.origins[..., None, :] + depths[..., None] * rays.directions[..., None, :]


def sample_uniform(rays: Rays, count: int = COARSE_SAMPLES, generator=None) -> RaySamples:
    """Stratified samples in [near, far].

    With ``generator=None`` the samples sit at bin centers (evaluation mode);
    otherwise each is jittered uniformly inside its bin.
    """
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    near, far = rays.near, rays.far
    dtype = near.dtype
    if generator is None:
        u = torch.full((*near.shape, count), 0.5, dtype=dtype, device=near.device)
    else:
        u = torch.rand((*near.shape, count), generator=generator, dtype=dtype).to(near.device)
    steps = (torch.arange(count, dtype=dtype, device=near.device) + u) / count
    depths = near[..., None] + (far - near)[..., None] * steps
    return RaySamples(depths, _intervals_from_depths(depths, far), _points(rays, depths))


def bin_edges(depths, near, far):
    """Bin boundaries owned by each depth: midpoints, clamped by near/far."""
    mids = 0.5 * (depths[..., 1:] + depths[..., :-1])
    return torch.cat([near[..., None], mids, far[..., None]], dim=-1)


def sample_importance(
    rays: Rays,
    coarse: RaySamples,
    weights,
    count: int = FINE_SAMPLES,
    generator=None,
    merge: bool = True,
) -> RaySamples:
    """Inverse-CDF resampling of the piecewise-constant weight distribution.

    Bin h spans the midpoints around coarse depth h and carries probability
    mass proportional to ``weights[h]``. Rays whose weights are all zero fall
    back to uniform mass. New depths are merged with the coarse ones and
    sorted unless ``merge=False``.
    """
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    weights = weights.detach()
    if torch.any(weights < 0):
        raise InvalidArgument("weights must be nonnegative")
    depths = coarse.depths.detach()
    dtype = depths.dtype
    total = weights.sum(-1, keepdim=True)
    empty = total <= 0
    mass = torch.where(empty, torch.ones_like(weights), weights)
    mass = mass / mass.sum(-1, keepdim=True)
    cdf = torch.cumsum(mass, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)
    cdf[..., -1] = 1.0
    edges = bin_edges(depths, rays.near, rays.far)

    if generator is None:
        u = (torch.arange(count, dtype=dtype, device=depths.device) + 0.5) / count
        u = u.expand(*depths.shape[:-1], count).contiguous()
    else:
        u = torch.rand((*depths.shape[:-1], count), generator=generator, dtype=dtype).to(depths.device)

    idx = torch.searchsorted(cdf, u, right=True) - 1
    idx = idx.clamp(0, mass.shape[-1] - 1)
    lo_cdf = torch.gather(cdf, -1, idx)
    bin_mass = torch.gather(mass, -1, idx)
    lo = torch.gather(edges, -1, idx)
    hi = torch.gather(edges, -1, idx + 1)
    frac = torch.where(bin_mass > 0, (u - lo_cdf) / bin_mass.clamp_min(1e-30), torch.zeros_like(u))
    new = lo + frac.clamp(0, 1) * (hi - lo)

    if merge:
        new, _ = torch.sort(torch.cat([depths, new], dim=-1), dim=-1)
    else:
        new, _ = torch.sort(new, dim=-1)
    return RaySamples(new, _intervals_from_depths(new, rays.far), _points(rays, new))


def project_points(intrinsics, x, min_depth=1e-6):
    """Pinhole projection of camera-frame points.

    intrinsics: (..., 4) = (fx, fy, cx, cy). Depths are clamped to
    ``min_depth`` so that losses stay finite for points behind the camera.
    """
    fx, fy, cx, cy = intrinsics.unbind(-1)
    z = x[..., 2].clamp_min(min_depth)
    return torch.stack([fx * x[..., 0] / z + cx, fy * x[..., 1] / z + cy], dim=-1)


def pixel_rays(intrinsics, pixels):
    """Unit ray directions through pixel coordinates (camera at the origin)."""
    fx, fy, cx, cy = intrinsics.unbind(-1)
    d = torch.stack(
        [(pixels[..., 0] - cx) / fx, (pixels[..., 1] - cy) / fy, torch.ones_like(pixels[..., 0])], dim=-1
    )
    return d / d.norm(dim=-1, keepdim=True)
