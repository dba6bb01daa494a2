"""Auto-decoder training: network weights and per-object latent codes learned jointly."""
from __future__ import annotations

import csv
import dataclasses
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .autodiff import backward
from .dataset import ObjectRecord
from .exceptions import NonFiniteError, ValidationError
from .fields import FieldConfig, FieldModel, LatentPair
from .losses import (
    DEFAULT_WEIGHTS,
    LOSS_NAMES,
    NORMAL_EPS,
    LossBreakdown,
    code_regularization,
    correction_regularization,
    normal_consistency_loss,
    normal_consistency_values,
    reconstruction_loss,
    smoothness_loss,
    smoothness_values,
    total_objective,
)
from .rays import pixels_to_rays
from .render import render_rays


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    batch_objects: int = 5
    views_per_object: int = 1
    rays_per_view: int = 1024
    samples_per_ray: int = 64
    lr_halving_interval: int = 100_000
    w1: float = DEFAULT_WEIGHTS[0]
    w2: float = DEFAULT_WEIGHTS[1]
    w3: float = DEFAULT_WEIGHTS[2]
    w4: float = DEFAULT_WEIGHTS[3]
    max_steps: int = 1000
    seed: int = 0
    precision: int = 32
    latent_std: float = 0.01
    stratified: bool = True
    background: float = 1.0
    # 0 evaluates the normal/smoothness terms on every sample; k > 0 draws
    # k samples per ray in proportion to the rendering weights
    reg_samples: int = 0
    shape_dim: int = 128
    appearance_dim: int = 128
    width: int = 128
    trunk_depth: int = 5
    radiance_depth: int = 2
    shape_depth: int = 4
    mapping_width: int = 256
    mapping_depth: int = 3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.precision not in (32, 64):
            raise ValidationError("precision must be 32 or 64")
        if self.samples_per_ray < 2:
            raise ValidationError("samples_per_ray must be at least 2")

    @property
    def weights(self):
        return (self.w1, self.w2, self.w3, self.w4)

    @property
    def dtype(self):
        return torch.float64 if self.precision == 64 else torch.float32

    def field_config(self) -> FieldConfig:
        names = {f.name for f in dataclasses.fields(FieldConfig)}
        return FieldConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_config(path: Union[str, Path]) -> TrainConfig:
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as err:
            raise ValidationError(f"{path}: {err}") from err
    return TrainConfig.from_dict(data)


def save_config(config: TrainConfig, path: Union[str, Path]):
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f'{k} = "{v}"')
        else:
            lines.append(f"{k} = {v!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- optimiser ------------------------------------------------------------------------


@dataclass
class AdamMoments:
    m: torch.Tensor
    v: torch.Tensor


@torch.no_grad()
def adam_update(values: torch.Tensor, grad: torch.Tensor, moments: AdamMoments, step: int,
                lr: float, beta1: float = 0.0, beta2: float = 0.9, eps: float = 1e-8):
    """One bias-corrected Adam step, in place. ``step`` counts from 1."""
    if values.shape != grad.shape:
        raise ValidationError("gradient shape does not match parameter shape")
    moments.m.mul_(beta1).add_(grad, alpha=1 - beta1)
    moments.v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    m_hat = moments.m / (1 - beta1**step)
    v_hat = moments.v / (1 - beta2**step)
    values.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return values


# -- state ----------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: FieldModel
    latent_shape: torch.Tensor
    latent_appearance: torch.Tensor
    moments: Dict[str, AdamMoments]
    latent_steps: torch.Tensor
    step: int
    rng: np.random.Generator

    @property
    def num_objects(self) -> int:
        return self.latent_shape.shape[0]

    def latents(self, index: int) -> LatentPair:
        return LatentPair(self.latent_shape[index], self.latent_appearance[index])

    def net_params(self) -> Dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())


def _fresh_moments(model, latent_shape, latent_appearance):
    moments = {
        f"net.{n}": AdamMoments(torch.zeros_like(p), torch.zeros_like(p))
        for n, p in model.named_parameters()
    }
    moments["latent.shape"] = AdamMoments(torch.zeros_like(latent_shape), torch.zeros_like(latent_shape))
    moments["latent.appearance"] = AdamMoments(
        torch.zeros_like(latent_appearance), torch.zeros_like(latent_appearance)
    )
    return moments


def init_training(config: TrainConfig, dataset: Sequence[ObjectRecord]) -> TrainState:
    """Fresh model, latents ~ N(0, latent_std^2), zero moments; deterministic in the seed."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    n = len(dataset)
    gen = torch.Generator().manual_seed(config.seed)
    model = FieldModel(config.field_config()).to(config.dtype)
    model.reset_parameters(gen)
    latent_shape = torch.randn(n, config.shape_dim, generator=gen, dtype=config.dtype) * config.latent_std
    latent_app = torch.randn(n, config.appearance_dim, generator=gen, dtype=config.dtype) * config.latent_std
    return TrainState(
        config=config,
        model=model,
        latent_shape=latent_shape,
        latent_appearance=latent_app,
        moments=_fresh_moments(model, latent_shape, latent_app),
        latent_steps=torch.zeros(n, dtype=torch.float64),
        step=0,
        rng=np.random.default_rng(config.seed),
    )


def current_lr(config: TrainConfig, step: int) -> float:
    return config.lr * 2.0 ** (-(step // config.lr_halving_interval))


# -- data -----------------------------------------------------------------------------


class RayTable:
    """Per-view ray origins, directions and target colours, computed once."""

    def __init__(self, dataset: Sequence[ObjectRecord]):
        self.views = []
        for obj in dataset:
            per_obj = []
            for v in obj.views:
                h, w = v.height, v.width
                ys, xs = np.mgrid[0:h, 0:w]
                o, d = pixels_to_rays(v.extrinsic, v.intrinsic, xs.ravel() + 0.5, ys.ravel() + 0.5)
                per_obj.append((o, d, v.image.reshape(-1, 3), v.near, v.far))
            self.views.append(per_obj)

    def __len__(self):
        return len(self.views)


@dataclass
class Batch:
    object_index: np.ndarray
    ray_object: np.ndarray
    origins: np.ndarray
    directions: np.ndarray
    targets: np.ndarray
    near: np.ndarray
    far: np.ndarray


def sample_batch(rays: RayTable, config: TrainConfig, rng: np.random.Generator) -> Batch:
    n = len(rays)
    b = min(config.batch_objects, n)
    objs = rng.choice(n, size=b, replace=False)
    parts = {k: [] for k in ("ray_object", "origins", "directions", "targets", "near", "far")}
    for slot, i in enumerate(objs):
        for _ in range(config.views_per_object):
            j = rng.integers(len(rays.views[i]))
            o, d, c, near, far = rays.views[i][j]
            k = min(config.rays_per_view, o.shape[0])
            pix = rng.choice(o.shape[0], size=k, replace=False)
            parts["ray_object"].append(np.full(k, slot))
            parts["origins"].append(o[pix])
            parts["directions"].append(d[pix])
            parts["targets"].append(c[pix])
            parts["near"].append(np.full(k, near))
            parts["far"].append(np.full(k, far))
    return Batch(objs, **{k: np.concatenate(v) for k, v in parts.items()})


# -- objective --------------------------------------------------------------------------


def _subsampled_regularizers(model, shape_film_pp, positions, weights, k, rng):
    """Importance-sampled estimate of the weighted normal/smoothness terms.

    Draws ``k`` samples per ray with probability ``q`` equal to the per-ray
    normalised rendering weights. Each draw is scaled by ``w / stop(q)``,
    which is 1 in value but keeps the gradient through the weights, so both
    the estimate and its gradient are unbiased.
    """
    r, p = weights.shape
    totals = weights.sum(1, keepdim=True)
    norm_w = weights / torch.clamp(totals, min=NORMAL_EPS)
    q = norm_w.detach().cpu().numpy().astype(np.float64)
    live = totals.detach().cpu().numpy()[:, 0] >= NORMAL_EPS
    probs = np.where(live[:, None], q, 1.0 / p)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((r, k))
    picks = np.minimum((u[:, :, None] > cdf[:, None, :]).sum(-1), p - 1)
    flat = torch.as_tensor((np.arange(r)[:, None] * p + picks).ravel())
    fs = model.evaluate(
        positions[flat], None, shape_film_pp.take(flat // p), None, with_derivatives=True
    )
    picked = norm_w.reshape(-1)[flat].reshape(r, k)
    ratio = picked / torch.clamp(picked.detach(), min=NORMAL_EPS)
    mask = torch.as_tensor(live, dtype=positions.dtype)
    nor_vals = normal_consistency_values(fs.grad_sigma, fs.grad_sigma_template).reshape(r, k)
    smo_vals = smoothness_values(fs.jacobian).reshape(r, k)
    nor = ((ratio * nor_vals).mean(1) * mask).mean()
    smo = ((ratio * smo_vals).mean(1) * mask).mean()
    return nor, smo


def compute_objective(state: TrainState, batch: Batch, rng=None, stratified=None) -> LossBreakdown:
    """Full weighted objective on one ray batch (graph kept for backward)."""
    cfg = state.config
    idx = torch.as_tensor(batch.object_index)
    zs = state.latent_shape.index_select(0, idx)
    za = state.latent_appearance.index_select(0, idx)
    return _objective(state.model, zs, za, batch, cfg, rng if rng is not None else state.rng,
                      cfg.stratified if stratified is None else stratified)


def _objective(model, zs, za, batch: Batch, cfg: TrainConfig, rng, stratified) -> LossBreakdown:
    sf, af = model.film(LatentPair(zs, za))
    ray_obj = torch.as_tensor(batch.ray_object)
    shape_pp, app_pp = sf.take(ray_obj), af.take(ray_obj)
    exact = cfg.reg_samples <= 0
    res = render_rays(
        model, shape_pp, app_pp, batch.origins, batch.directions, batch.near, batch.far,
        cfg.samples_per_ray, stratified, rng, cfg.background, with_derivatives=exact,
    )
    dtype = res.t.dtype
    target = torch.as_tensor(batch.targets, dtype=dtype)
    rec = reconstruction_loss(res.output.color, target)
    reg = code_regularization(zs, za)
    cor = correction_regularization(res.samples.delta_sigma)
    weights = res.output.trace.weights
    if exact:
        nor = normal_consistency_loss(res.samples.grad_sigma, res.samples.grad_sigma_template, weights)
        smo = smoothness_loss(res.samples.jacobian, weights)
    else:
        nor, smo = _subsampled_regularizers(
            model, shape_pp, res.positions.detach(), weights, cfg.reg_samples, rng
        )
    return total_objective(rec, reg, cor, nor, smo, cfg.weights)


def _check_finite(loss: LossBreakdown):
    for name in LOSS_NAMES + ("total",):
        if not torch.isfinite(getattr(loss, name)):
            raise NonFiniteError(f"loss term {name!r} is not finite")


def train_step(state: TrainState, rays: RayTable) -> dict:
    """Sample a batch, evaluate the objective, apply Adam to weights and batch latents."""
    t0 = time.perf_counter()
    cfg = state.config
    batch = sample_batch(rays, cfg, state.rng)
    idx = torch.as_tensor(batch.object_index)
    zs = state.latent_shape.index_select(0, idx).requires_grad_(True)
    za = state.latent_appearance.index_select(0, idx).requires_grad_(True)
    loss = _objective(state.model, zs, za, batch, cfg, state.rng, cfg.stratified)
    _check_finite(loss)

    params = {f"net.{n}": p for n, p in state.model.named_parameters()}
    params["latent.shape"] = zs
    params["latent.appearance"] = za
    grads = backward(loss.total, params)

    lr = current_lr(cfg, state.step)
    step = state.step + 1
    for name, p in state.model.named_parameters():
        adam_update(p.data, grads[f"net.{name}"], state.moments[f"net.{name}"], step, lr,
                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state.latent_steps[idx] += 1
    for key, table in (("latent.shape", state.latent_shape), ("latent.appearance", state.latent_appearance)):
        mom = state.moments[key]
        g = grads[key]
        for row, obj in enumerate(batch.object_index):
            row_m = AdamMoments(mom.m[obj], mom.v[obj])
            adam_update(table[obj], g[row], row_m, int(state.latent_steps[obj]), lr,
                        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state.step = step
    metrics = {"step": step, **loss.as_floats(), "lr": lr, "seconds": time.perf_counter() - t0}
    return metrics


METRIC_FIELDS = ("step", "rec", "reg", "cor", "nor", "smo", "total")


class MetricsWriter:
    """Appends per-step loss values as CSV."""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self._f = open(self.path, "a" if append else "w", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(METRIC_FIELDS)

    def write(self, metrics: dict):
        self._w.writerow([metrics["step"]] + [repr(float(metrics[k])) for k in METRIC_FIELDS[1:]])
        self._f.flush()

    def close(self):
        self._f.close()


def train(
    state: TrainState,
    dataset_or_rays,
    steps: Optional[int] = None,
    metrics_path=None,
    callback: Optional[Callable[[TrainState, dict], bool]] = None,
) -> List[dict]:
    """Run ``steps`` training steps (default: up to ``max_steps``).

    ``callback(state, metrics)`` may return True to stop early.
    """
    rays = dataset_or_rays if isinstance(dataset_or_rays, RayTable) else RayTable(dataset_or_rays)
    if steps is None:
        steps = max(state.config.max_steps - state.step, 0)
    writer = MetricsWriter(metrics_path, append=state.step > 0) if metrics_path else None
    history = []
    try:
        for _ in range(steps):
            m = train_step(state, rays)
            history.append(m)
            if writer:
                writer.write(m)
            if callback is not None and callback(state, m):
                break
    finally:
        if writer:
            writer.close()
    return history
