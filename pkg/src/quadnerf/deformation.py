"""Rigid transforms, Gaussian-bone skinning, blend-skinning warps and the
local quadratic deformation model.

Shapes follow torch broadcasting: a point batch ``(..., 3)`` is warped by
bone transforms shaped ``(..., B, 3, 3)`` / ``(..., B, 3)`` and a root
transform shaped ``(..., 3, 3)`` / ``(..., 3)``.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import InvalidArgument

DEFAULT_BONES = 25


class RigidTransform(NamedTuple):
    rotation: torch.Tensor  # (..., 3, 3)
    translation: torch.Tensor  # (..., 3)

    @classmethod
    def identity(cls, *batch, dtype=None):
        dtype = dtype or torch.get_default_dtype()
        rot = torch.eye(3, dtype=dtype).expand(*batch, 3, 3).clone()
        return cls(rot, torch.zeros(*batch, 3, dtype=dtype))

    @classmethod
    def from_matrix(cls, m):
        m = torch.as_tensor(m)
        return cls(m[..., :3, :3], m[..., :3, 3])

    def apply(self, x):
        return (self.rotation @ x[..., None])[..., 0] + self.translation

    def inverse(self):
        rt = self.rotation.transpose(-1, -2)
        return RigidTransform(rt, -(rt @ self.translation[..., None])[..., 0])

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        rot = self.rotation @ other.rotation
        return RigidTransform(rot, self.apply(other.translation))

    def matrix(self):
        top = torch.cat([self.rotation, self.translation[..., None]], dim=-1)
        bottom = torch.zeros_like(top[..., :1, :])
        bottom[..., 0, 3] = 1.0
        return torch.cat([top, bottom], dim=-2)

    def index(self, idx):
        return RigidTransform(self.rotation[idx], self.translation[idx])


def skew(v):
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v.unbind(-1)
    return torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(*v.shape[:-1], 3, 3)


def axis_angle_to_matrix(v):
    """Rodrigues' formula, exact (identity) at v = 0 and smooth around it."""
    theta2 = (v * v).sum(-1)[..., None, None]
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe2.sqrt()
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / safe2)
    k = skew(v)
    eye = torch.eye(3, dtype=v.dtype, device=v.device)
    return eye + a * k + b * (k @ k)


def se3_from_vector(vec) -> RigidTransform:
    """(..., 6) = (axis-angle, translation) -> rigid transform."""
    return RigidTransform(axis_angle_to_matrix(vec[..., :3]), vec[..., 3:6])


def orthonormality_residual(rot):
    eye = torch.eye(3, dtype=rot.dtype, device=rot.device)
    return (rot.transpose(-1, -2) @ rot - eye).abs().amax()


# ---------------------------------------------------------------------------
# Skinning
# ---------------------------------------------------------------------------


def precision_matrices(orientations, scales):
    """Q_b = V_b^T diag(scales_b) V_b."""
    return orientations.transpose(-1, -2) @ (scales[..., :, None] * orientations)


def mahalanobis(x, centers, orientations, scales):
    """Squared Mahalanobis distance of points (..., 3) to each bone -> (..., B)."""
    diff = x[..., None, :] - centers  # (..., B, 3)
    local = (orientations @ diff[..., None])[..., 0]
    return (scales * local * local).sum(-1)


def skinning_weights(x, centers, orientations, scales, delta=None):
    """Softmax over bones of the negated Mahalanobis distance (+ delta).

    Nearer bones receive larger weight. ``delta`` (..., B) is the learned
    per-bone correction added before negation; None means zero.
    """
    dist = mahalanobis(x, centers, orientations, scales)
    if delta is not None:
        dist = dist + delta
    return torch.softmax(-dist, dim=-1)


def pose_bones(centers, orientations, bone_transforms: RigidTransform):
    """Move canonical bone ellipsoids by their per-frame rigid transforms.

    Returns posed centers and orientations such that the Mahalanobis distance
    of a posed point to a posed bone equals that of the canonical point to the
    canonical bone.
    """
    posed_centers = bone_transforms.apply(centers)
    posed_orient = orientations @ bone_transforms.rotation.transpose(-1, -2)
    return posed_centers, posed_orient


# ---------------------------------------------------------------------------
# Blend-skinning warps
# ---------------------------------------------------------------------------


def blend_points(x, bone_transforms: RigidTransform, weights):
    """Sum_b W_b (R_b x + t_b)."""
    moved = (bone_transforms.rotation @ x[..., None, :, None])[..., 0] + bone_transforms.translation
    return (weights[..., None] * moved).sum(-2)


def warp_forward(x_c, root: RigidTransform, bone_transforms: RigidTransform, weights):
    """Canonical -> frame: blended bone motion followed by the root transform."""
    return root.apply(blend_points(x_c, bone_transforms, weights))


def warp_backward(x_t, root: RigidTransform, bone_transforms: RigidTransform, weights):
    """Frame -> canonical: inverse root followed by blended inverse bone motion.

    ``weights`` must be evaluated at the root-frame point (posed bones).
    """
    x_root = root.inverse().apply(x_t)
    return blend_points(x_root, bone_transforms.inverse(), weights)


# ---------------------------------------------------------------------------
# Local quadratic model
# ---------------------------------------------------------------------------


def extend_coords(x):
    """(x, y, z) -> (x, y, z, x^2, y^2, z^2, xy, yz, zx)."""
    px, py, pz = x.unbind(-1)
    return torch.stack([px, py, pz, px * px, py * py, pz * pz, px * py, py * pz, pz * px], dim=-1)


def apply_quadratic(coeffs, x):
    """A (..., 3, 9) times the extended coordinates of x (..., 3)."""
    if coeffs.shape[-2:] != (3, 9):
        raise InvalidArgument(f"quadratic coefficients must be 3x9, got {tuple(coeffs.shape[-2:])}")
    return (coeffs @ extend_coords(x)[..., None])[..., 0]


def identity_coeffs(*batch, dtype=None):
    dtype = dtype or torch.get_default_dtype()
    a = torch.zeros(*batch, 3, 9, dtype=dtype)
    a[..., 0, 0] = a[..., 1, 1] = a[..., 2, 2] = 1.0
    return a


def invert_quadratic(coeffs_fn, x_f, iters=10):
    """Solve ``A(x) D(x) = x_f`` for x by fixed-point iteration from x_f.

    ``coeffs_fn`` maps coarse canonical points (..., 3) to A (..., 3, 9).
    """
    x = x_f.clone()
    for _ in range(iters):
        x = x + (x_f - apply_quadratic(coeffs_fn(x), x))
    return x
