"""Training objective: reconstruction plus four regularisers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch

from .exceptions import ValidationError

DEFAULT_WEIGHTS = (5e-5, 1e-3, 5e-1, 1e-3)
NORMAL_EPS = 1e-8
LOSS_NAMES = ("rec", "reg", "cor", "nor", "smo")


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    reg: torch.Tensor
    cor: torch.Tensor
    nor: torch.Tensor
    smo: torch.Tensor
    total: torch.Tensor
    weights: Tuple[float, float, float, float]

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in LOSS_NAMES + ("total",)}


def reconstruction_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if rendered.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return ((rendered - target) ** 2).mean()


def code_regularization(shape_codes: torch.Tensor, appearance_codes: torch.Tensor) -> torch.Tensor:
    """Mean over objects of ``|z_s|^2 + |z_a|^2``."""
    return (shape_codes.pow(2).sum(-1) + appearance_codes.pow(2).sum(-1)).mean()


def correction_regularization(delta_sigma: torch.Tensor) -> torch.Tensor:
    return delta_sigma.abs().mean()


def _ray_weighted_mean(values: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Average ``values`` over samples with per-ray normalised weights, then over rays.

    ``values``/``weights`` are ``(R, P)`` or flat ``(P,)`` for a single ray.
    """
    if values.dim() == 1:
        values, weights = values[None], weights[None]
    w = weights / torch.clamp(weights.sum(-1, keepdim=True), min=NORMAL_EPS)
    return (w * values).sum(-1).mean()


def normal_consistency_values(grad_sigma: torch.Tensor, grad_template: torch.Tensor) -> torch.Tensor:
    """Per-sample ``1 - cos`` between instance and template density gradients."""
    na = grad_sigma.norm(dim=-1)
    nb = grad_template.norm(dim=-1)
    n = grad_sigma / torch.clamp(na, min=NORMAL_EPS).unsqueeze(-1)
    m = grad_template / torch.clamp(nb, min=NORMAL_EPS).unsqueeze(-1)
    val = 1.0 - (n * m).sum(-1)
    both_flat = (na < NORMAL_EPS) & (nb < NORMAL_EPS)
    return torch.where(both_flat, torch.zeros_like(val), val)


def normal_consistency_loss(grad_sigma, grad_template, weights) -> torch.Tensor:
    vals = normal_consistency_values(grad_sigma, grad_template)
    return _ray_weighted_mean(vals.reshape(weights.shape), weights)


def smoothness_values(jacobians: torch.Tensor) -> torch.Tensor:
    eye = torch.eye(3, dtype=jacobians.dtype, device=jacobians.device)
    sq = (jacobians - eye).pow(2).sum((-2, -1))
    # double where keeps the gradient at J = I zero instead of NaN
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def smoothness_loss(jacobians, weights) -> torch.Tensor:
    vals = smoothness_values(jacobians)
    return _ray_weighted_mean(vals.reshape(weights.shape), weights)


def total_objective(rec, reg, cor, nor, smo, weights=DEFAULT_WEIGHTS) -> LossBreakdown:
    w1, w2, w3, w4 = weights
    total = rec + w1 * reg + w2 * cor + w3 * nor + w4 * smo
    return LossBreakdown(rec, reg, cor, nor, smo, total, tuple(weights))
