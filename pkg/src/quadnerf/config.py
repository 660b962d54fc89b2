"""Run configuration: every tunable in one flat key/value namespace.

Resolution order: preset defaults, then the config file, then command-line
flags. Config files hold one ``key = value`` per line; ``#`` starts a
comment. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidArgument
from .fields import FieldConfig
from .losses import LossWeights
from .trainer import Schedule

PRESETS = ("paper", "desk")
OUTPUT_ENV = "QUADNERF_OUTPUT"


@dataclass
class RunConfig:
    preset: str = "paper"
    data: str = ""
    out: str = "runs/default"
    seed: int = 0
    dtype: str = "float32"
    # schedule
    warmup_steps: int = 9600
    phase1_extra_steps: int = 14400
    total_steps: int = 224000
    batch_rays: int = 416
    coarse_samples: int = 256
    fine_samples: int = 128
    lr: float = 5e-4
    lr_decay: float = 0.1
    flow_boost: float = 10.0
    active_fraction: float = 0.5
    error_half_life: float = 500.0
    cache_interval: int = 2000
    cache_resolution: int = 64
    quad_neighbors: int = 6
    quad_eps: float = 0.0
    # loss weights
    lambda_pf: float = 0.1
    lambda_sf: float = 1.0
    lambda_q: float = 1e3
    lambda_pc: float = 0.1
    lambda_sc: float = 1.0
    lambda_of: float = 0.1
    lambda_reg: float = 0.02
    lambda_qt: float = 1.0
    # fields
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
    num_bones: int = 25
    alpha_init: float = 0.05
    sphere_radius: float = 0.3
    bound: float = 1.0
    # data and bookkeeping
    object_radius: float = 1.0
    dilation: int = 5
    holdout_every: int = 0
    prefit_steps: int = 1000
    checkpoint_interval: int = 10000
    use_lqm: bool = True
    mesh_resolution: int = 512

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise InvalidArgument(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument("dtype must be float32 or float64")

    def schedule(self) -> Schedule:
        return Schedule(**{f.name: getattr(self, f.name) for f in fields(Schedule)})

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            pho_f=self.lambda_pf,
            sil_f=self.lambda_sf,
            quad=self.lambda_q,
            pho_c=self.lambda_pc,
            sil_c=self.lambda_sc,
            flow=self.lambda_of,
            reg=self.lambda_reg,
            quad_temporal=self.lambda_qt,
        )

    def field_config(self) -> FieldConfig:
        return FieldConfig(**{f.name: getattr(self, f.name) for f in fields(FieldConfig)})

    def lines(self):
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")


# Schedule lengths come from the toy-scene tuning run (3 videos x 30 frames
# at 64x64); total_steps may be raised up to DESK_MAX_STEPS.
DESK_OVERRIDES = {
    "warmup_steps": 300,
    "phase1_extra_steps": 900,
    "total_steps": 3000,
    "batch_rays": 192,
    "coarse_samples": 48,
    "fine_samples": 24,
    "cache_interval": 500,
    "pos_bands": 6,
    "canon_depth": 4,
    "canon_width": 64,
    "embed_depth": 2,
    "embed_width": 32,
    "pose_depth": 2,
    "pose_width": 64,
    "skin_depth": 2,
    "skin_width": 64,
    "quad_depth": 3,
    "quad_width": 64,
    "env_dim": 16,
    "code_dim": 32,
    "object_radius": 0.75,
    "checkpoint_interval": 500,
    "mesh_resolution": 128,
}
DESK_MAX_STEPS = 20000

HELP = {
    "preset": "paper (published hyperparameters) or desk (CPU-sized networks and schedule)",
    "data": "dataset root directory",
    "out": f"output directory (the {OUTPUT_ENV} environment variable overrides the config file)",
    "seed": "seed of every random stream",
    "dtype": "float32 or float64",
    "warmup_steps": "warmup iterations (boosted, decaying flow weight)",
    "phase1_extra_steps": "coarse-only iterations after warmup",
    "total_steps": "total iterations",
    "batch_rays": "rays per step",
    "coarse_samples": "uniform samples per ray",
    "fine_samples": "importance samples per ray for the fine branch",
    "lr": "Adam learning rate at the start of each phase segment",
    "lr_decay": "fraction of lr reached at the end of each segment",
    "flow_boost": "flow-weight multiplier at step 0, decaying to 1 over warmup",
    "active_fraction": "fraction of phase-2 rays drawn from the error map",
    "error_half_life": "half-life (steps) of the active-sampling error map",
    "cache_interval": "steps between surface-cache rebuilds",
    "cache_resolution": "grid resolution of the surface cache and bone re-initialization",
    "quad_neighbors": "neighbors K of the quadratic smoothness terms",
    "quad_eps": "neighbor noise variance (0 = 1%% of the scene box diagonal)",
    "lambda_pf": "fine photometric weight",
    "lambda_sf": "fine silhouette weight",
    "lambda_q": "quadratic smoothness weight",
    "lambda_pc": "coarse photometric weight",
    "lambda_sc": "coarse silhouette weight",
    "lambda_of": "optical-flow weight",
    "lambda_reg": "CSE weight",
    "lambda_qt": "temporal factor of the quadratic smoothness",
    "pos_bands": "positional-encoding bands for positions",
    "dir_bands": "positional-encoding bands for directions",
    "canon_depth": "canonical network hidden layers",
    "canon_width": "canonical network width",
    "embed_depth": "embedding network hidden layers",
    "embed_width": "embedding network width",
    "pose_depth": "pose network hidden layers",
    "pose_width": "pose network width",
    "skin_depth": "skinning-delta network hidden layers",
    "skin_width": "skinning-delta network width",
    "quad_depth": "quadratic-coefficient network hidden layers",
    "quad_width": "quadratic-coefficient network width",
    "quad_bands": "positional-encoding bands of the quadratic network",
    "env_dim": "environment code size",
    "code_dim": "pose and deformation code size",
    "num_bones": "number of bones",
    "alpha_init": "initial SDF-to-density scale",
    "sphere_radius": "radius of the initial SDF sphere",
    "bound": "half-size of the canonical box",
    "object_radius": "object radius around the root center (sets near/far)",
    "dilation": "mask dilation radius (pixels) of the ray-sampling region",
    "holdout_every": "hold out frames with index %% n == n // 2 (0 = none)",
    "prefit_steps": "steps of the initial sphere fit",
    "checkpoint_interval": "steps between checkpoints",
    "use_lqm": "enable the local quadratic model (false = coarse-only ablation)",
    "mesh_resolution": "marching-cubes resolution",
}


def _parse_value(kind, text, key):
    text = str(text).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise InvalidArgument(f"config key {key!r}: cannot parse {text!r}") from None


def _types():
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def read_config_file(path):
    """Parse a flat ``key = value`` file into a dict of raw strings."""
    out = {}
    known = _types()
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise InvalidArgument(f"{path}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


def resolve(file_values=None, flag_values=None, env=None):
    """Merge preset defaults, file values and flags (flags win).

    ``env`` maps environment variables; ``QUADNERF_OUTPUT`` replaces the
    file's output root unless ``out`` is passed as a flag.
    """
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}
    types = _types()
    for key in list(file_values) + list(flag_values):
        if key not in types:
            raise InvalidArgument(f"unknown config key {key!r}")
    preset = flag_values.get("preset", file_values.get("preset", "paper"))
    if preset not in PRESETS:
        raise InvalidArgument(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    values = {f.name: f.default for f in fields(RunConfig)}
    if preset == "desk":
        values.update(DESK_OVERRIDES)
    values.update({k: _parse_value(types[k], v, k) for k, v in file_values.items()})
    if env and env.get(OUTPUT_ENV) and "out" not in flag_values:
        values["out"] = env[OUTPUT_ENV]
    values.update({k: _parse_value(types[k], v, k) for k, v in flag_values.items()})
    values["preset"] = preset
    cfg = RunConfig(**values)
    if preset == "desk" and cfg.total_steps > DESK_MAX_STEPS:
        raise InvalidArgument(f"the desk preset caps total_steps at {DESK_MAX_STEPS}")
    return cfg


def as_dict(cfg: RunConfig):
    return dataclasses.asdict(cfg)
