"""Training objective: binary cross-entropy + soft Dice loss, and the cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

# Clipping keeps log() finite at hard 0/1 predictions.
BCE_EPS = 1e-7
# Smoothing keeps the soft Dice defined when both masks are empty.
DICE_SMOOTH = 1.0


@dataclass
class LossTerms:
    bce: torch.Tensor
    dice_loss: torch.Tensor
    combined: torch.Tensor


@dataclass
class ScheduleConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    total_steps: int = 1

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} must be below lr_max {self.lr_max}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def _as_pair(probabilities, targets) -> tuple[torch.Tensor, torch.Tensor]:
    p = torch.as_tensor(probabilities)
    y = torch.as_tensor(targets, dtype=p.dtype, device=p.device)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(p.shape)} vs targets {tuple(y.shape)}")
    return p, y


def bce(probabilities, targets) -> torch.Tensor:
    """Mean binary cross-entropy over all pixels, with probabilities clipped to [eps, 1-eps]."""
    p, y = _as_pair(probabilities, targets)
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -((1.0 - y) * torch.log(1.0 - p) + y * torch.log(p)).mean()


def dice_loss(probabilities, targets) -> torch.Tensor:
    """Soft Dice loss, computed per image and averaged over the batch.

    Leading dimension is treated as the batch when the input has 3+ dims;
    a 1-D/2-D input is a single image.
    """
    p, y = _as_pair(probabilities, targets)
    if p.ndim >= 3:
        p = p.reshape(p.shape[0], -1)
        y = y.reshape(y.shape[0], -1)
    else:
        p = p.reshape(1, -1)
        y = y.reshape(1, -1)
    intersection = (p * y).sum(dim=1)
    denom = p.sum(dim=1) + y.sum(dim=1)
    dice = (2.0 * intersection + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1.0 - dice).mean()


def combined_loss(probabilities, targets) -> LossTerms:
    """Unweighted sum of BCE and Dice loss."""
    b = bce(probabilities, targets)
    d = dice_loss(probabilities, targets)
    return LossTerms(bce=b, dice_loss=d, combined=b + d)


def cosine_lr(step: int, config: ScheduleConfig) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at total_steps, endpoints exact."""
    if step < 0 or step > config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if step == 0:
        return config.lr_max
    if step == config.total_steps:
        return config.lr_min
    cos = math.cos(math.pi * step / config.total_steps)
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + cos)
