"""Learnable function approximators and per-frame latent codes."""

from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .deformation import (
    DEFAULT_BONES,
    RigidTransform,
    axis_angle_to_matrix,
    identity_coeffs,
    se3_from_vector,
)
from .errors import CheckpointError, InvalidArgument
from .geometry import encoded_size, positional_encode

CHECKPOINT_FORMAT = "quadnerf-checkpoint/1"
EMBEDDING_DIM = 16


@dataclass
class FieldConfig:
    pos_bands: int = 10
    dir_bands: int = 4
    canon_depth: int = 8
    canon_width: int = 256
    embed_depth: int = 4
    embed_width: int = 128
    pose_depth: int = 4
    pose_width: int = 128
    skin_depth: int = 4
    skin_width: int = 128
    quad_depth: int = 6
    quad_width: int = 128
    quad_bands: int = 4
    env_dim: int = 64
    code_dim: int = 128
    num_bones: int = DEFAULT_BONES
    alpha_init: float = 0.05
    sphere_radius: float = 0.3
    bound: float = 1.0


class MLP(nn.Module):
    """``depth`` hidden ReLU layers of ``width`` units plus a linear head.

    A zero head makes the network output exactly zero at initialization.
    """

    def __init__(self, in_dim, out_dim, depth, width, zero_head=False):
        super().__init__()
        layers = []
        dim = in_dim
        for _ in range(depth):
            layers.append(nn.Linear(dim, width))
            dim = width
        self.hidden = nn.ModuleList(layers)
        self.head = nn.Linear(dim, out_dim)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        for layer in self.hidden:
            x = torch.relu(layer(x))
        return self.head(x)


@torch.no_grad()
def geometric_init(net: MLP, radius):
    """Radial initialization: the network starts close to ``|x| - radius``.

    Weights on the sin/cos features of the first layer start at zero so the
    initial field is smooth; only the raw coordinates feed the first layer.
    """
    for i, layer in enumerate(net.hidden):
        nn.init.normal_(layer.weight, 0.0, math.sqrt(2) / math.sqrt(layer.out_features))
        nn.init.zeros_(layer.bias)
        if i == 0:
            layer.weight[:, 3:] = 0.0
    nn.init.normal_(net.head.weight, math.sqrt(math.pi) / math.sqrt(net.head.in_features), 1e-4)
    net.head.bias.fill_(-radius)


class CanonicalNet(nn.Module):
    """SDF and color networks of one canonical space (coarse or fine)."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        pos_dim = encoded_size(3, cfg.pos_bands)
        dir_dim = encoded_size(3, cfg.dir_bands)
        self.sdf = MLP(pos_dim, 1, cfg.canon_depth, cfg.canon_width)
        geometric_init(self.sdf, cfg.sphere_radius)
        self.color = MLP(pos_dim + dir_dim + cfg.env_dim, 3, cfg.canon_depth, cfg.canon_width)

    def signed_distance(self, x):
        return self.sdf(positional_encode(x, self.cfg.pos_bands))[..., 0]

    def rgb(self, x, view_dir, env_code):
        feats = [
            positional_encode(x, self.cfg.pos_bands),
            positional_encode(view_dir, self.cfg.dir_bands),
            env_code.expand(*x.shape[:-1], env_code.shape[-1]),
        ]
        return torch.sigmoid(self.color(torch.cat(feats, dim=-1)))


class BoneSet(nn.Module):
    """Gaussian-ellipsoid bones: centers, orientations (axis-angle) and
    log-precision scales."""

    def __init__(self, count, extent=0.3):
        super().__init__()
        g = torch.Generator().manual_seed(0)
        centers = (torch.rand(count, 3, generator=g) * 2 - 1) * extent
        self.centers = nn.Parameter(centers)
        self.orient = nn.Parameter(torch.zeros(count, 3))
        self.log_scales = nn.Parameter(torch.full((count, 3), float(torch.log(torch.tensor(1 / 0.1**2)))))

    @property
    def count(self):
        return self.centers.shape[0]

    def orientations(self):
        return axis_angle_to_matrix(self.orient)

    def scales(self):
        return torch.exp(self.log_scales)

    @torch.no_grad()
    def reset(self, centers, scales):
        centers = torch.as_tensor(centers, dtype=self.centers.dtype)
        if centers.shape != self.centers.shape:
            raise InvalidArgument(f"expected {tuple(self.centers.shape)} centers, got {tuple(centers.shape)}")
        self.centers.copy_(centers)
        self.orient.zero_()
        self.log_scales.copy_(torch.log(torch.as_tensor(scales, dtype=self.centers.dtype)).expand_as(self.log_scales))


class FieldBundle(nn.Module):
    """Every learnable quantity of the model.

    Parameter blocks (used by the trainer's freeze table) are exposed through
    :meth:`parameter_blocks`.
    """

    def __init__(self, cfg: FieldConfig, num_frames: int):
        super().__init__()
        self.cfg = cfg
        self.num_frames = num_frames
        pos_dim = encoded_size(3, cfg.pos_bands)
        B = cfg.num_bones
        self.coarse = CanonicalNet(cfg)
        self.fine = CanonicalNet(cfg)
        self.embedding = MLP(pos_dim, EMBEDDING_DIM, cfg.embed_depth, cfg.embed_width)
        with torch.no_grad():
            # smooth embedding: only raw coordinates feed the first layer, so
            # nearby surface points get nearby codes
            self.embedding.hidden[0].weight[:, 3:] = 0.0
        self.root_net = MLP(cfg.code_dim, 6, cfg.pose_depth, cfg.pose_width, zero_head=True)
        self.bone_net = MLP(cfg.code_dim, 6 * B, cfg.pose_depth, cfg.pose_width, zero_head=True)
        self.skin_net = MLP(pos_dim + cfg.code_dim, B, cfg.skin_depth, cfg.skin_width, zero_head=True)
        self.quad_net = MLP(
            encoded_size(3, cfg.quad_bands) + cfg.code_dim, 27, cfg.quad_depth, cfg.quad_width, zero_head=True
        )
        g = torch.Generator().manual_seed(1)
        self.env_codes = nn.Parameter(0.1 * torch.randn(num_frames, cfg.env_dim, generator=g))
        self.root_codes = nn.Parameter(0.1 * torch.randn(num_frames, cfg.code_dim, generator=g))
        self.bone_codes = nn.Parameter(0.1 * torch.randn(num_frames, cfg.code_dim, generator=g))
        self.deform_codes = nn.Parameter(0.1 * torch.randn(num_frames, cfg.code_dim, generator=g))
        self.log_alpha = nn.Parameter(torch.tensor(float(cfg.alpha_init)).log())
        self.bones = BoneSet(B)

    # -- bookkeeping -------------------------------------------------------

    def parameter_blocks(self):
        return {
            "coarse": list(self.coarse.parameters()),
            "fine": list(self.fine.parameters()),
            "embedding": list(self.embedding.parameters()),
            "root_pose": list(self.root_net.parameters()) + [self.root_codes],
            "bone_pose": list(self.bone_net.parameters()) + [self.bone_codes],
            "skin_delta": list(self.skin_net.parameters()),
            "quad": list(self.quad_net.parameters()) + [self.deform_codes],
            "env_codes": [self.env_codes],
            "bones": list(self.bones.parameters()),
            "alpha": [self.log_alpha],
        }

    def flat_parameters(self):
        return nn.utils.parameters_to_vector(self.parameters())

    def _frames(self, t):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.num_frames):
            raise InvalidArgument(f"frame index out of range [0, {self.num_frames})")
        return t

    @property
    def alpha(self):
        return self.log_alpha.exp()

    # -- canonical fields --------------------------------------------------

    def _canon(self, which):
        if which == "coarse":
            return self.coarse
        if which == "fine":
            return self.fine
        raise InvalidArgument(f"which must be 'coarse' or 'fine', got {which!r}")

    def canonical_sdf(self, x, which="coarse"):
        return self._canon(which).signed_distance(x)

    def canonical_color(self, x, view_dir, env_code, which="coarse"):
        return self._canon(which).rgb(x, view_dir, env_code)

    def canonical_embedding(self, x):
        return self.embedding(positional_encode(x, self.cfg.pos_bands))

    def env_code(self, t):
        return self.env_codes[self._frames(t)]

    # -- poses -------------------------------------------------------------

    def root_pose(self, t, init_pose: RigidTransform) -> RigidTransform:
        """Refined root pose ``MLP_G(code_t) * G0_t``."""
        t = self._frames(t)
        delta = se3_from_vector(self.root_net(self.root_codes[t]))
        return delta.compose(init_pose)

    def bone_pose(self, t, b=None) -> RigidTransform:
        """Per-bone rigid transforms for frame(s) t: (..., B) or a single bone."""
        t = self._frames(t)
        raw = self.bone_net(self.bone_codes[t]).reshape(*t.shape, self.cfg.num_bones, 6)
        if b is not None:
            if not 0 <= b < self.cfg.num_bones:
                raise InvalidArgument(f"bone index {b} out of range [0, {self.cfg.num_bones})")
            raw = raw[..., b, :]
        return se3_from_vector(raw)

    def skin_delta(self, x, t):
        """Learned skinning-logit correction at root-frame points x (..., 3)."""
        code = self.bone_codes[self._frames(t)]
        code = code.expand(*x.shape[:-1], code.shape[-1])
        return self.skin_net(torch.cat([positional_encode(x, self.cfg.pos_bands), code], dim=-1))

    def quad_coeffs(self, x_c, t):
        """3x9 local quadratic coefficients ``[I|0|0] + residual``."""
        code = self.deform_codes[self._frames(t)]
        code = code.expand(*x_c.shape[:-1], code.shape[-1])
        raw = self.quad_net(torch.cat([positional_encode(x_c, self.cfg.quad_bands), code], dim=-1))
        base = identity_coeffs(dtype=raw.dtype).to(raw.device)
        return base + raw.reshape(*raw.shape[:-1], 3, 9)


def prefit_sphere(bundle: FieldBundle, which=("coarse", "fine"), steps=1000, batch=4096, lr=1e-3, seed=0):
    """Fit SDF networks to a centered sphere so training starts from a closed
    surface. Returns the final max abs error on the last batch per network."""
    cfg = bundle.cfg
    errors = {}
    g = torch.Generator().manual_seed(seed)
    dtype = bundle.log_alpha.dtype
    for name in which:
        net = bundle._canon(name).sdf
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        for _ in range(steps):
            x = (torch.rand(batch, 3, generator=g, dtype=dtype) * 2 - 1) * cfg.bound
            target = x.norm(dim=-1) - cfg.sphere_radius
            pred = bundle.canonical_sdf(x, name)
            loss = ((pred - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        with torch.no_grad():
            errors[name] = float((pred - target).abs().max())
    return errors


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, bundle: FieldBundle, step: int, **extra):
    """Write a single archive with every parameter table, the bone set, alpha,
    the step counter and any trainer state passed as ``extra``."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "field_config": dataclasses.asdict(bundle.cfg),
        "num_frames": bundle.num_frames,
        "dtype": str(bundle.log_alpha.dtype),
        "state": bundle.state_dict(),
        "step": int(step),
        "extra": extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(bundle, step, extra)``."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:  # corrupt archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    cfg = FieldConfig(**payload["field_config"])
    bundle = FieldBundle(cfg, payload["num_frames"])
    if payload["dtype"] == "torch.float64":
        bundle = bundle.double()
    bundle.load_state_dict(payload["state"])
    return bundle, payload["step"], payload["extra"]
