"""Volume rendering by piecewise-constant quadrature along each ray."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import View, encode_srgb8
from .exceptions import ValidationError
from .fields import FieldModel, FieldSample, LatentPair
from .film_siren import FilmParams
from .rays import pixels_to_rays, sample_t

DEPTH_EPS = 1e-8


@dataclass
class TransmittanceTrace:
    alphas: torch.Tensor
    transmittances: torch.Tensor
    weights: torch.Tensor


@dataclass
class RenderOutput:
    color: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor
    trace: TransmittanceTrace


def composite(t, deltas, sigma, color, background=1.0) -> RenderOutput:
    """Alpha-composite samples along rays.

    Shapes: ``t``, ``deltas``, ``sigma`` are ``(R, P)``; ``color`` is
    ``(R, P, 3)``. ``alpha_k = 1 - exp(-sigma_k delta_k)`` and the
    transmittance before sample k is ``exp(-sum_{j<k} sigma_j delta_j)``.
    """
    t, deltas, sigma, color = (torch.as_tensor(a) for a in (t, deltas, sigma, color))
    if (sigma < 0).any():
        raise ValidationError("densities must be nonnegative")
    if (deltas <= 0).any():
        raise ValidationError("sample intervals must be positive")
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    shifted = torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], dim=-1)
    trans = torch.exp(-torch.cumsum(shifted, dim=-1))
    weights = trans * alpha
    opacity = weights.sum(-1)
    bg = torch.as_tensor(background, dtype=color.dtype)
    rgb = (weights.unsqueeze(-1) * color).sum(-2) + (1.0 - opacity).unsqueeze(-1) * bg
    depth = (weights * t).sum(-1) / torch.clamp(opacity, min=DEPTH_EPS)
    return RenderOutput(rgb, depth, opacity, TransmittanceTrace(alpha, trans, weights))


@dataclass
class RayBatchResult:
    output: RenderOutput
    samples: FieldSample
    t: torch.Tensor
    deltas: torch.Tensor
    positions: torch.Tensor


def render_rays(
    model: FieldModel,
    shape_film: FilmParams,
    app_film: FilmParams,
    origins,
    directions,
    near,
    far,
    n_samples: int,
    stratified: bool = False,
    rng=None,
    background=1.0,
    with_derivatives: bool = False,
) -> RayBatchResult:
    """Render R rays; FiLM parameters hold one row per ray."""
    dtype = next(model.parameters()).dtype
    t_np, d_np = sample_t(near, far, n_samples, stratified, rng)
    t = torch.as_tensor(t_np, dtype=dtype)
    deltas = torch.as_tensor(d_np, dtype=dtype)
    # positions are formed in float64 and rounded once, since o + t d cancels
    # and the w0 = 30 first layer amplifies any coordinate error
    o64 = torch.as_tensor(np.asarray(origins, dtype=np.float64))
    d64 = torch.as_tensor(np.asarray(directions, dtype=np.float64))
    t64 = torch.as_tensor(np.asarray(t_np, dtype=np.float64))
    d = d64.to(dtype)
    r = o64.shape[0]
    x = (o64[:, None, :] + t64[..., None] * d64[:, None, :]).reshape(-1, 3).to(dtype)
    dirs = d[:, None, :].expand(r, n_samples, 3).reshape(-1, 3)
    point_index = torch.arange(r).repeat_interleave(n_samples)
    fs = model.evaluate(
        x, dirs, shape_film.take(point_index), app_film.take(point_index), with_derivatives
    )
    out = composite(
        t,
        deltas,
        fs.sigma.reshape(r, n_samples),
        fs.color.reshape(r, n_samples, 3),
        background,
    )
    return RayBatchResult(out, fs, t, deltas, x)


def scaled_intrinsic(camera: View, resolution=None) -> np.ndarray:
    K = camera.intrinsic.copy()
    if resolution is None:
        return K
    h, w = resolution
    K[0] *= w / camera.width
    K[1] *= h / camera.height
    K[2] = [0.0, 0.0, 1.0]
    return K


@torch.no_grad()
def render_view(
    model: FieldModel,
    latents: LatentPair,
    camera: View,
    resolution=None,
    n_samples: int = 64,
    background=1.0,
    chunk: int = 1024,
    stratified: bool = False,
    rng=None,
):
    """Render an image, expected-depth map and opacity map for one camera."""
    if resolution is None:
        resolution = (camera.height, camera.width)
    h, w = resolution
    K = scaled_intrinsic(camera, resolution)
    ys, xs = np.mgrid[0:h, 0:w]
    o, d = pixels_to_rays(camera.extrinsic, K, xs.ravel() + 0.5, ys.ravel() + 0.5)
    dtype = next(model.parameters()).dtype
    zs = torch.as_tensor(latents.shape_code, dtype=dtype).reshape(1, -1)
    za = torch.as_tensor(latents.appearance_code, dtype=dtype).reshape(1, -1)
    sf, af = model.film(LatentPair(zs, za))
    colors, depths, opac = [], [], []
    for s in range(0, o.shape[0], chunk):
        n = min(chunk, o.shape[0] - s)
        idx = torch.zeros(n, dtype=torch.long)
        res = render_rays(
            model, sf.take(idx), af.take(idx), o[s : s + n], d[s : s + n],
            camera.near, camera.far, n_samples, stratified, rng, background,
        )
        colors.append(res.output.color)
        depths.append(res.output.depth)
        opac.append(res.output.opacity)
    image = torch.cat(colors).reshape(h, w, 3).cpu().numpy().astype(np.float64)
    depth = torch.cat(depths).reshape(h, w).cpu().numpy().astype(np.float64)
    opacity = torch.cat(opac).reshape(h, w).cpu().numpy().astype(np.float64)
    return image, depth, opacity


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def write_render(prefix, image, depth, opacity, depth_range=None):
    """Write ``<prefix>_color.png``, ``_depth.png`` (16-bit), ``_opacity.png``
    and ``_depth.json`` holding the (min, max) used to scale depth."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_srgb8(image)).save(f"{prefix}_color.png")
    if depth_range is None:
        depth_range = (float(depth.min()), float(depth.max()))
    lo, hi = depth_range
    scale = (depth - lo) / max(hi - lo, 1e-12)
    d16 = np.round(np.clip(scale, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(d16).save(f"{prefix}_depth.png")
    with open(f"{prefix}_depth.json", "w") as f:
        json.dump({"min": lo, "max": hi}, f)
    Image.fromarray(np.round(np.clip(opacity, 0, 1) * 255).astype(np.uint8)).save(f"{prefix}_opacity.png")
    return [Path(f"{prefix}_{s}") for s in ("color.png", "depth.png", "opacity.png")]


def read_depth(prefix) -> np.ndarray:
    with open(f"{prefix}_depth.json") as f:
        rng = json.load(f)
    with Image.open(f"{prefix}_depth.png") as im:
        d16 = np.asarray(im, dtype=np.float64)
    return rng["min"] + d16 / 65535.0 * (rng["max"] - rng["min"])
