"""Template radiance field with latent-conditioned deformation and density correction."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .film_siren import FilmParams, MappingNetwork, SirenLayer, init_siren


@dataclass
class FieldConfig:
    shape_dim: int = 128
    appearance_dim: int = 128
    width: int = 128
    trunk_depth: int = 5
    radiance_depth: int = 2
    shape_depth: int = 4
    mapping_width: int = 256
    mapping_depth: int = 3

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentPair:
    shape_code: torch.Tensor
    appearance_code: torch.Tensor


@dataclass
class FieldSample:
    """Batched field outputs; every tensor has leading dimension N."""

    sigma: torch.Tensor
    color: Optional[torch.Tensor]
    sigma_template: torch.Tensor
    delta_sigma: torch.Tensor
    warped_pos: torch.Tensor
    offset: torch.Tensor
    jacobian: Optional[torch.Tensor] = None
    grad_sigma: Optional[torch.Tensor] = None
    grad_sigma_template: Optional[torch.Tensor] = None


def _eye_tangent(x: torch.Tensor) -> torch.Tensor:
    return torch.eye(3, dtype=x.dtype, device=x.device).expand(x.shape[0], 3, 3)


class FieldModel(nn.Module):
    """Shared template NeRF plus the shape-variance networks.

    * ``trunk`` -- SIREN stack on template-space positions.
    * ``density_head`` -- affine map to the template pre-density.
    * ``radiance_layers`` -- FiLM-SIREN branch on trunk features and view
      direction, conditioned by ``appearance_mapping``.
    * ``shape_layers`` -- FiLM-SIREN stack on instance-space positions,
      conditioned by ``shape_mapping``; its features feed both
      ``deform_head`` (offsets) and ``correction_head`` (signed density).
    """

    def __init__(self, config: Optional[FieldConfig] = None):
        super().__init__()
        self.config = config = config or FieldConfig()
        w = config.width
        self.trunk = nn.ModuleList(
            SirenLayer(3 if i == 0 else w, w) for i in range(config.trunk_depth)
        )
        self.density_head = nn.Linear(w, 1)
        self.radiance_layers = nn.ModuleList(
            SirenLayer(w + 3 if i == 0 else w, w) for i in range(config.radiance_depth)
        )
        self.rgb_head = nn.Linear(w, 3)
        self.shape_layers = nn.ModuleList(
            SirenLayer(3 if i == 0 else w, w) for i in range(config.shape_depth)
        )
        self.deform_head = nn.Linear(w, 3)
        self.correction_head = nn.Linear(w, 1)
        self.shape_mapping = MappingNetwork(
            config.shape_dim,
            [w] * config.shape_depth,
            hidden=config.mapping_width,
            depth=config.mapping_depth,
        )
        self.appearance_mapping = MappingNetwork(
            config.appearance_dim,
            [w] * config.radiance_depth,
            hidden=config.mapping_width,
            depth=config.mapping_depth,
        )

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        for i, layer in enumerate(self.trunk):
            init_siren(layer, i == 0, generator)
        for layer in self.radiance_layers:
            init_siren(layer, False, generator)
        for i, layer in enumerate(self.shape_layers):
            init_siren(layer, i == 0, generator)
        for head in (self.density_head, self.rgb_head):
            bound = (6.0 / head.in_features) ** 0.5 / 30.0
            head.weight.uniform_(-bound, bound, generator=generator)
            head.bias.zero_()
        for head in (self.deform_head, self.correction_head):
            head.weight.zero_()
            head.bias.zero_()
        self.shape_mapping.reset_parameters(generator)
        self.appearance_mapping.reset_parameters(generator)
        return self

    def film(self, latents: LatentPair):
        """Per-object FiLM parameters for shape and appearance branches."""
        return self.shape_mapping(latents.shape_code), self.appearance_mapping(
            latents.appearance_code
        )

    # -- shape branch -----------------------------------------------------

    def shape_features(self, x, film: FilmParams, tangent=None):
        h = x
        for i, layer in enumerate(self.shape_layers):
            h, tangent = layer(h, film.gamma[i], film.beta[i], tangent)
        return h, tangent

    # -- template branch --------------------------------------------------

    def trunk_features(self, x_tau, tangent=None):
        h = x_tau
        for layer in self.trunk:
            h, tangent = layer(h, tangent=tangent)
        return h, tangent

    def template_density(self, x_tau, with_grad=False):
        feat, tan = self.trunk_features(x_tau, _eye_tangent(x_tau) if with_grad else None)
        pre = self.density_head(feat)[..., 0]
        sigma = F.softplus(pre)
        grad = None
        if with_grad:
            dpre = torch.matmul(tan, self.density_head.weight[0])
            grad = torch.sigmoid(pre).unsqueeze(-1) * dpre
        return sigma, feat, grad

    def radiance(self, feat, d, film: FilmParams):
        h = torch.cat([feat, d], dim=-1)
        for i, layer in enumerate(self.radiance_layers):
            h, _ = layer(h, film.gamma[i], film.beta[i])
        return torch.sigmoid(self.rgb_head(h))

    # -- composite --------------------------------------------------------

    def evaluate(
        self,
        x: torch.Tensor,
        d: Optional[torch.Tensor],
        shape_film: FilmParams,
        app_film: Optional[FilmParams] = None,
        with_derivatives: bool = False,
    ) -> FieldSample:
        """Evaluate the instance field at points ``x`` (N, 3).

        ``shape_film``/``app_film`` must already hold one row per point
        (see :meth:`FilmParams.take`). With ``d=None`` only the density
        path runs. ``with_derivatives`` additionally returns the warp
        Jacobian and both density gradients, computed analytically.
        """
        tan = _eye_tangent(x) if with_derivatives else None
        h, htan = self.shape_features(x, shape_film, tan)
        offset = self.deform_head(h)
        delta = self.correction_head(h)[..., 0]
        x_tau = x + offset
        sigma_t, feat, grad_t = self.template_density(x_tau, with_grad=with_derivatives)
        sigma = torch.clamp(sigma_t + delta, min=0.0)

        jac = grad = None
        if with_derivatives:
            # htan[n, j, :] is d h / d x_j, so jac[n, i, j] = d W_i / d x_j
            jac = torch.eye(3, dtype=x.dtype, device=x.device) + torch.matmul(
                htan, self.deform_head.weight.t()
            ).transpose(-1, -2)
            grad_delta = torch.matmul(htan, self.correction_head.weight[0])
            grad = torch.matmul(jac.transpose(-1, -2), grad_t.unsqueeze(-1))[..., 0] + grad_delta

        color = None
        if d is not None:
            if app_film is None:
                raise ValueError("appearance FiLM parameters required for radiance")
            color = self.radiance(feat, d, app_film)
        return FieldSample(
            sigma=sigma,
            color=color,
            sigma_template=sigma_t,
            delta_sigma=delta,
            warped_pos=x_tau,
            offset=offset,
            jacobian=jac,
            grad_sigma=grad,
            grad_sigma_template=grad_t,
        )


def _per_point(film: FilmParams, n: int) -> FilmParams:
    if film.gamma[0].dim() == 1:
        return FilmParams(
            [g.expand(n, -1) for g in film.gamma], [b.expand(n, -1) for b in film.beta]
        )
    if film.gamma[0].shape[0] == 1:
        return FilmParams(
            [g.expand(n, -1) for g in film.gamma], [b.expand(n, -1) for b in film.beta]
        )
    return film


def warp(model: FieldModel, x: torch.Tensor, z_s: torch.Tensor):
    """Map instance-space points to template space: ``x + D(x)``.

    Returns ``(warped_pos, offset)``.
    """
    x = torch.as_tensor(x)
    film = _per_point(model.shape_mapping(z_s), x.shape[0])
    h, _ = model.shape_features(x, film)
    offset = model.deform_head(h)
    return x + offset, offset


def template_density(model: FieldModel, x_tau: torch.Tensor) -> torch.Tensor:
    return model.template_density(x_tau)[0]


def instance_density(model: FieldModel, x: torch.Tensor, z_s: torch.Tensor) -> FieldSample:
    film = _per_point(model.shape_mapping(z_s), x.shape[0])
    return model.evaluate(x, None, film)


def instance_radiance(
    model: FieldModel,
    x: torch.Tensor,
    d: torch.Tensor,
    z_s: torch.Tensor,
    z_a: torch.Tensor,
) -> torch.Tensor:
    n = x.shape[0]
    shape_film = _per_point(model.shape_mapping(z_s), n)
    app_film = _per_point(model.appearance_mapping(z_a), n)
    return model.evaluate(x, d, shape_film, app_film).color
