"""Adversarial, geometry, semantic and appearance losses and their weighted sum.

All reductions are per-element means so the weights do not depend on
resolution or embedding size.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch


class NonFiniteLoss(FloatingPointError):
    pass


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteLoss(f"{name} contains NaN/Inf (shape {tuple(t.shape)})")


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass
class LossWeights:
    lambda_clip: float = 10.0
    lambda_geom: float = 10.0
    lambda_gan: float = 1.0
    lambda_cycle: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class LossBundle:
    gan_g: float | torch.Tensor = 0.0
    gan_d_A: float | torch.Tensor = 0.0
    gan_d_B: float | torch.Tensor = 0.0
    geom: float | torch.Tensor = 0.0
    clip: float | torch.Tensor = 0.0
    cycle: float | torch.Tensor = 0.0
    total: float | torch.Tensor = 0.0

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def lsgan_discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean((D(real) - 1)^2) + mean(D(fake)^2); fakes must already be detached."""
    _check_finite(real_scores, "real_scores")
    _check_finite(fake_scores, "fake_scores")
    return ((real_scores - 1) ** 2).mean() + (fake_scores**2).mean()


def lsgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    _check_finite(fake_scores, "fake_scores")
    return ((fake_scores - 1) ** 2).mean()


def geometry_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth error. A 1-channel target is broadcast over a 3-channel prediction."""
    if target.dim() == 4 and pred.dim() == 4 and target.shape[1] == 1 and pred.shape[1] != 1:
        target = target.expand(-1, pred.shape[1], -1, -1)
    _check_shapes(pred, target, "geometry_loss")
    return (pred - target).abs().mean()


def semantic_loss(e_drawing: torch.Tensor, e_photo: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of embeddings; for unit vectors 2(1 - cos)/dim."""
    _check_shapes(e_drawing, e_photo, "semantic_loss")
    return ((e_drawing - e_photo) ** 2).mean()


def appearance_loss(recon_a, a, recon_b, b) -> torch.Tensor:
    _check_shapes(recon_a, a, "appearance_loss (A)")
    _check_shapes(recon_b, b, "appearance_loss (B)")
    return (recon_a - a).abs().mean() + (recon_b - b).abs().mean()


def total_objective(bundle: LossBundle, w: LossWeights | None = None):
    w = w or LossWeights()
    return (
        w.lambda_clip * bundle.clip
        + w.lambda_geom * bundle.geom
        + w.lambda_gan * bundle.gan_g
        + w.lambda_cycle * bundle.cycle
    )
