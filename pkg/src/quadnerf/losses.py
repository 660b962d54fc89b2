"""Training losses and their weighted assembly into the total objective.

Every per-pixel term is a sum over the pixels of the batch (not a mean), and
pixels without the required observation contribute exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import InvalidArgument, TrainingFault
from .geometry import project_points

TERMS = (
    "pho_c",
    "pho_f",
    "sil_c",
    "sil_f",
    "of",
    "cse3d",
    "cse2d_c",
    "cse2d_f",
    "cyc2d",
    "cyc3d",
    "cam",
    "q_spatial",
    "q_temporal",
)
DEFAULT_NEIGHBORS = 6


@dataclass
class LossWeights:
    pho_f: float = 0.1
    sil_f: float = 1.0
    quad: float = 1e3
    pho_c: float = 0.1
    sil_c: float = 1.0
    flow: float = 0.1
    reg: float = 0.02
    quad_temporal: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value) or value < 0:
                raise InvalidArgument(f"loss weight {name} must be finite and >= 0, got {value}")


def coefficients(weights: LossWeights, flow_weight=None):
    """Multiplier applied to each named term inside the total objective."""
    return {
        "pho_f": weights.pho_f,
        "sil_f": weights.sil_f,
        "q_spatial": weights.quad,
        "q_temporal": weights.quad * weights.quad_temporal,
        "pho_c": weights.pho_c,
        "sil_c": weights.sil_c,
        "of": weights.flow if flow_weight is None else flow_weight,
        "cse3d": weights.reg,
        "cse2d_c": weights.reg,
        "cse2d_f": weights.reg,
        "cyc2d": 1.0,
        "cyc3d": 1.0,
        "cam": 1.0,
    }


def total(parts, weights: LossWeights, flow_weight=None):
    """Weighted sum of the present terms; raises TrainingFault on non-finite parts."""
    coef = coefficients(weights, flow_weight)
    out = 0.0
    for name in TERMS:
        if name not in parts:
            continue
        value = parts[name]
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise TrainingFault(name, scalar)
        out = out + coef[name] * value
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise InvalidArgument(f"unknown loss terms {sorted(unknown)}")
    return out


@dataclass
class LossReport:
    step: int
    parts: dict = field(default_factory=dict)
    total: float = 0.0

    def record(self) -> str:
        """One whitespace-separated ``key=value`` line; floats round-trip exactly."""
        items = [f"step={self.step}"]
        items += [f"{k}={self.parts[k]!r}" for k in TERMS if k in self.parts]
        items.append(f"total={self.total!r}")
        return " ".join(items)

    @classmethod
    def parse(cls, line: str) -> "LossReport":
        fields = dict(item.split("=", 1) for item in line.split())
        step = int(fields.pop("step"))
        tot = float(fields.pop("total"))
        return cls(step, {k: float(v) for k, v in fields.items()}, tot)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise InvalidArgument(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _masked_sum(values, valid):
    if valid is None:
        return values.sum()
    return torch.where(valid, values, torch.zeros_like(values)).sum()


def photometric(rendered, observed, valid=None):
    """Sum of per-pixel L1 color differences."""
    _check_same(rendered, observed, "photometric")
    return _masked_sum((rendered - observed).abs().sum(-1), valid)


def silhouette(pred, target, stop_target=False):
    """Sum of squared opacity differences.

    With ``stop_target`` the target acts as a fixed teacher: no gradient flows
    into it (used for the fine branch, whose target is the coarse opacity).
    """
    _check_same(pred, target, "silhouette")
    if stop_target:
        target = target.detach()
    return ((pred - target) ** 2).sum()


def optical_flow(posed_next, intrinsics, measured_flow, pixels, valid=None):
    """Squared distance between the projection of the expected surface point,
    warped into the next frame, and the pixel displaced by the measured flow.

    posed_next: (N, 3) camera-frame points of frame t+1.
    valid: (N,) bool; False for pixels on video-final frames or without flow.
    """
    _check_same(measured_flow, pixels, "optical_flow")
    target = pixels + measured_flow
    err = ((project_points(intrinsics, posed_next) - target) ** 2).sum(-1)
    return _masked_sum(err, valid)


def cse_losses(expected, matched, warp, intrinsics, valid=None):
    """(3D, 2D) canonical-embedding matching terms.

    The 3D term compares canonical points directly; the 2D term compares their
    projections after both are warped into frame t by ``warp``.
    """
    _check_same(expected, matched, "cse_losses")
    d3 = ((expected - matched) ** 2).sum(-1)
    p_exp = project_points(intrinsics, warp(expected))
    p_match = project_points(intrinsics, warp(matched))
    d2 = ((p_exp - p_match) ** 2).sum(-1)
    return _masked_sum(d3, valid), _masked_sum(d2, valid)


def cycle_losses(pixels, posed_expected, intrinsics, sample_points, roundtrip_points, weights, valid=None):
    """(2D, 3D) cycle-consistency terms.

    2D: reprojection of the forward-warped expected surface point vs the pixel.
    3D: weight-averaged squared error of frame->canonical->frame round trips of
    the ray samples. ``valid`` (N,) masks whole rays.
    """
    reproj = ((project_points(intrinsics, posed_expected) - pixels) ** 2).sum(-1)
    _check_same(sample_points, roundtrip_points, "cycle_losses")
    rt = (weights * ((roundtrip_points - sample_points) ** 2).sum(-1)).sum(-1)
    return _masked_sum(reproj, valid), _masked_sum(rt, valid)


def camera_smoothness(rotations, translations, video_ids):
    """Squared first-order differences of consecutive extrinsics within a video.

    rotations (T, 3, 3), translations (T, 3) and video_ids (T,) are ordered
    by global frame index.
    """
    if rotations.shape[0] < 2:
        return rotations.sum() * 0.0
    video_ids = torch.as_tensor(video_ids)
    same = video_ids[1:] == video_ids[:-1]
    dr = ((rotations[1:] - rotations[:-1]) ** 2).sum((-1, -2))
    dt = ((translations[1:] - translations[:-1]) ** 2).sum(-1)
    return _masked_sum(dr + dt, same)


def safe_frobenius(diff):
    """Frobenius norm over the last two axes with zero gradient at zero."""
    sq = (diff * diff).sum((-1, -2))
    pos = sq > 0
    return torch.where(pos, torch.where(pos, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def quad_smoothness(
    coeff_fn,
    points,
    frames,
    next_frames=None,
    next_valid=None,
    neighbors=DEFAULT_NEIGHBORS,
    eps=0.01,
    generator=None,
):
    """(spatial, temporal) local-coherence terms of the quadratic field.

    For every point, K Gaussian perturbations with covariance ``eps * I`` are
    drawn and the Frobenius distance between the coefficient matrices at the
    point and at its perturbed neighbors is summed. The temporal term compares
    against the next frame's code; points whose frame is the last of a video
    (``next_valid`` False) are skipped.
    """
    if neighbors < 1:
        raise InvalidArgument("neighbors must be >= 1")
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    N = points.shape[0]
    std = math.sqrt(eps)
    dtype = points.dtype
    base = coeff_fn(points, frames)  # (N, 3, 9)

    noise = torch.randn((N, neighbors, 3), generator=generator, dtype=dtype) * std
    nbr = points[:, None, :] + noise
    fr = frames[:, None].expand(N, neighbors)
    spatial = safe_frobenius(base[:, None] - coeff_fn(nbr, fr)).sum()

    if next_frames is None:
        return spatial, None
    noise_t = torch.randn((N, neighbors, 3), generator=generator, dtype=dtype) * std
    valid = torch.ones(N, dtype=torch.bool) if next_valid is None else next_valid
    nf = torch.where(valid, next_frames, frames)[:, None].expand(N, neighbors)
    dist = safe_frobenius(base[:, None] - coeff_fn(points[:, None, :] + noise_t, nf))
    temporal = _masked_sum(dist, valid[:, None].expand(N, neighbors))
    return spatial, temporal
