import numpy as np
import pytest
import torch

from quadnerf.fields import FieldBundle, FieldConfig


def tiny_config(**overrides):
    """B = 3 bones and width-8 networks: the gradient-check configuration."""
    base = dict(
        pos_bands=2,
        dir_bands=1,
        canon_depth=2,
        canon_width=8,
        embed_depth=1,
        embed_width=8,
        pose_depth=1,
        pose_width=8,
        skin_depth=1,
        skin_width=8,
        quad_depth=1,
        quad_width=8,
        quad_bands=1,
        env_dim=4,
        code_dim=8,
        num_bones=3,
    )
    base.update(overrides)
    return FieldConfig(**base)


def tiny_bundle(frames=4, seed=0, randomize_heads=True, **overrides):
    """Double-precision bundle whose zero-initialized heads are randomized so
    every deformation path carries gradient."""
    torch.manual_seed(seed)
    b = FieldBundle(tiny_config(**overrides), frames).double()
    if randomize_heads:
        g = torch.Generator().manual_seed(seed + 7)
        with torch.no_grad():
            for net in (b.root_net, b.bone_net, b.skin_net, b.quad_net):
                net.head.weight.copy_(0.05 * torch.randn(net.head.weight.shape, generator=g, dtype=torch.float64))
                net.head.bias.copy_(0.05 * torch.randn(net.head.bias.shape, generator=g, dtype=torch.float64))
    return b


def finite_difference_error(fn, tensor, step=1e-5, max_entries=None, seed=0):
    """Relative error between autograd and central differences of the scalar
    ``fn()`` w.r.t. ``tensor`` (a leaf with requires_grad).

    Relative error is ``max|a - n| / max(max|n|, 1e-8)`` over the checked
    entries.
    """
    value = fn()
    (grad,) = torch.autograd.grad(value, tensor, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(tensor)
    flat = tensor.detach().view(-1)
    idx = np.arange(flat.numel())
    if max_entries is not None and len(idx) > max_entries:
        idx = np.random.default_rng(seed).choice(idx, max_entries, replace=False)
    numeric = []
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(fn())
            flat[i] = orig - step
            minus = float(fn())
            flat[i] = orig
            numeric.append((plus - minus) / (2 * step))
    numeric = np.asarray(numeric)
    analytic = grad.detach().view(-1).numpy()[idx]
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8)), analytic, numeric


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Bending capsule, 2 videos x 4 frames at 24x24."""
    from quadnerf.synthetic import SyntheticScene, generate_synthetic

    root = tmp_path_factory.mktemp("small")
    generate_synthetic(SyntheticScene(), root, videos=2, frames=4, size=24, mesh_resolution=32)
    return root


def tiny_trainer(root, schedule=None, holdout_every=0, seed=0, log_path=None, use_lqm=True, **overrides):
    from quadnerf.dataio import load_dataset
    from quadnerf.trainer import Schedule, TrainData, Trainer

    coll = load_dataset(root)
    data = TrainData.from_collection(coll, holdout_every=holdout_every, radius=0.75, dtype=torch.float64)
    bundle = tiny_bundle(frames=data.num_frames, randomize_heads=False, **overrides)
    schedule = schedule or Schedule(
        warmup_steps=3,
        phase1_extra_steps=3,
        total_steps=12,
        batch_rays=24,
        coarse_samples=8,
        fine_samples=4,
        cache_interval=4,
        cache_resolution=16,
        quad_neighbors=2,
    )
    return Trainer(bundle, data, schedule, seed=seed, log_path=log_path, use_lqm=use_lqm), coll


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
