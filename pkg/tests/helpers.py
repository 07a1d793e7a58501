"""Shared test utilities: finite-difference oracles and desk-scale configs."""

from __future__ import annotations

import numpy as np
import torch

from promptseg.encoder_cache import EncoderSpec
from promptseg.training import TrainConfig

DESK_IMAGE_SIZE = 32
DESK_SPEC = EncoderSpec(
    name="standin", tap_layers=(2,), tap_channels=16, final_channels=16, grid=8
)


def desk_config(**overrides) -> TrainConfig:
    """Small decoder configuration used across the desk-scale suites."""
    base = dict(
        mode="grid_points",
        learning_rate=3e-3,
        batch_size=8,
        epochs=28,
        seed=0,
        eval_grid=3,
        token_dim=16,
        n_layers=1,
        n_heads=4,
        stage_widths=(16, 8),
        blocks_per_stage=1,
        image_size=DESK_IMAGE_SIZE,
        encoder=DESK_SPEC,
    )
    base.update(overrides)
    return TrainConfig(**base)


def ablation_config(seed: int, variant: str = "full") -> TrainConfig:
    """Short-budget configuration where the decoder ablations separate."""
    return desk_config(learning_rate=4e-3, epochs=5, seed=seed, variant=variant)


def finite_diff_grads(f, tensors, h: float = 1e-6) -> list[torch.Tensor]:
    """Central finite differences of scalar f() w.r.t. each tensor, element-wise.

    Independent oracle for autograd: f is re-evaluated with each element
    nudged by +/-h while gradients are disabled.
    """
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gf = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(f())
                flat[i] = orig - h
                fm = float(f())
                flat[i] = orig
                gf[i] = (fp - fm) / (2.0 * h)
            grads.append(g)
    return grads


def max_rel_error(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    """Largest element-wise relative error, ignoring entries that are ~0 on both sides."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = a.detach()
        denom = torch.maximum(a.abs(), n.abs())
        mask = denom > 1e-8
        if mask.any():
            rel = ((a - n).abs() / denom)[mask]
            worst = max(worst, float(rel.max()))
    return worst


def autograd_check(build_loss, params, h: float = 1e-6) -> float:
    """Compare autograd gradients of build_loss() against central differences.

    Returns the max relative error over every parameter element.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    numeric = finite_diff_grads(lambda: build_loss().detach(), params, h=h)
    return max_rel_error(analytic, numeric)


def random_binary_mask(rng: np.random.Generator, shape=(8, 8), p: float = 0.5) -> np.ndarray:
    return (rng.random(shape) < p).astype(np.uint8)
