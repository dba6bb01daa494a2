"""Sinusoidal layers, exponential-frequency FiLM conditioning and mapping networks.

Every layer can optionally carry forward-mode tangents with respect to the
network input. A tangent tensor has shape ``(N, 3, width)``: one row per
spatial input direction. Tangents are built from ordinary differentiable
torch ops, so losses that contain spatial derivatives can still be
back-propagated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

FIRST_W0 = 30.0
HIDDEN_W0 = 1.0
LEAKY_SLOPE = 0.2


class SirenLayer(nn.Module):
    """Affine map followed by ``sin(w0 * (W h + b))``."""

    def __init__(self, in_features: int, out_features: int, w0: float = HIDDEN_W0):
        super().__init__()
        if w0 <= 0:
            raise ValueError(f"w0 must be positive, got {w0}")
        self.in_features = in_features
        self.out_features = out_features
        self.w0 = float(w0)
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features))

    def pre_activation(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.in_features:
            raise ValueError(
                f"layer expects input width {self.in_features}, got {h.shape[-1]}"
            )
        return torch.nn.functional.linear(h, self.weight, self.bias)

    def forward(
        self,
        h: torch.Tensor,
        gamma: Optional[torch.Tensor] = None,
        beta: Optional[torch.Tensor] = None,
        tangent: Optional[torch.Tensor] = None,
    ):
        """Evaluate the layer; with ``gamma``/``beta`` it becomes FiLM-SIREN.

        Returns ``(output, output_tangent)``; the tangent is None when no
        input tangent was given.
        """
        a = self.pre_activation(h)
        scale = self.w0
        if gamma is not None:
            if gamma.shape[-1] != self.out_features:
                raise ValueError("gamma width does not match layer width")
            scale = torch.exp(gamma) * self.w0
        a = a * scale
        if beta is not None:
            if beta.shape[-1] != self.out_features:
                raise ValueError("beta width does not match layer width")
            a = a + beta
        out = torch.sin(a)
        if tangent is None:
            return out, None
        t = torch.matmul(tangent, self.weight.t())
        t = t * (scale.unsqueeze(-2) if torch.is_tensor(scale) else scale)
        return out, t * torch.cos(a).unsqueeze(-2)


def siren_forward(layer: SirenLayer, h: torch.Tensor) -> torch.Tensor:
    return layer(h)[0]


def film_siren_forward(
    layer: SirenLayer, h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor
) -> torch.Tensor:
    """``sin(exp(gamma) * w0 * (W h + b) + beta)``.

    The frequency is exponentiated, so ``gamma = 0`` is the neutral
    modulation and the layer reduces exactly to :func:`siren_forward`.
    """
    return layer(h, gamma=gamma, beta=beta)[0]


@torch.no_grad()
def init_siren(
    layer: SirenLayer,
    is_first: bool,
    generator: Optional[torch.Generator] = None,
    w0: float = HIDDEN_W0,
) -> SirenLayer:
    """SIREN initialisation.

    First layers draw weights from ``U(-1/in, 1/in)`` and run with
    ``w0 = 30``. Hidden layers draw from ``U(-sqrt(6/in)/w0, sqrt(6/in)/w0)``
    and run with a unit multiplier; the default ``w0 = 1`` gives the
    ``sqrt(6/in)`` bound that keeps activations unit-scale through depth.
    """
    fan_in = layer.in_features
    if is_first:
        bound = 1.0 / fan_in
        layer.w0 = FIRST_W0
    else:
        bound = math.sqrt(6.0 / fan_in) / w0
        layer.w0 = HIDDEN_W0
    layer.weight.uniform_(-bound, bound, generator=generator)
    b = 1.0 / math.sqrt(fan_in)
    layer.bias.uniform_(-b, b, generator=generator)
    return layer


@dataclass
class FilmParams:
    """Per-layer log-frequencies and phase shifts, each ``(batch, width)``."""

    gamma: List[torch.Tensor]
    beta: List[torch.Tensor]

    def __len__(self):
        return len(self.gamma)

    def take(self, index: torch.Tensor) -> "FilmParams":
        """Expand per-object parameters to per-point rows."""
        return FilmParams(
            gamma=[g.index_select(0, index) for g in self.gamma],
            beta=[b.index_select(0, index) for b in self.beta],
        )


class MappingNetwork(nn.Module):
    """Leaky-ReLU MLP mapping a latent code to FiLM parameters.

    The output head is zero-initialised, so a fresh network returns
    ``gamma = beta = 0`` for every input.
    """

    def __init__(
        self,
        latent_dim: int,
        layer_widths: Sequence[int],
        hidden: int = 256,
        depth: int = 3,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.layer_widths = list(layer_widths)
        dims = [latent_dim] + [hidden] * depth
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(depth)
        )
        self.head = nn.Linear(hidden, 2 * sum(self.layer_widths))

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        for lin in self.layers:
            # kaiming-uniform bound for leaky relu
            gain = math.sqrt(2.0 / (1 + LEAKY_SLOPE**2))
            bound = gain * math.sqrt(3.0 / lin.in_features)
            lin.weight.uniform_(-bound, bound, generator=generator)
            lin.bias.zero_()
        self.head.weight.zero_()
        self.head.bias.zero_()

    def forward(self, z: torch.Tensor) -> FilmParams:
        if z.shape[-1] != self.latent_dim:
            raise ValueError(
                f"mapping network expects latent width {self.latent_dim}, got {z.shape[-1]}"
            )
        h = z
        for lin in self.layers:
            h = torch.nn.functional.leaky_relu(lin(h), LEAKY_SLOPE)
        out = self.head(h)
        gammas, betas = [], []
        offset = 0
        for w in self.layer_widths:
            gammas.append(out[..., offset : offset + w])
            betas.append(out[..., offset + w : offset + 2 * w])
            offset += 2 * w
        return FilmParams(gammas, betas)


def mapping_forward(net: MappingNetwork, z: torch.Tensor) -> FilmParams:
    return net(z)
