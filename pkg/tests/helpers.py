"""Shared fixtures for gradient checks and small end-to-end runs."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from tnrf.autodiff import backward, central_difference, relative_error, ridders_difference
from tnrf.dataset import generate_synthetic_family, toy_chair_spec
from tnrf.fields import FieldModel, LatentPair
from tnrf.render import render_rays
from tnrf.trainer import Batch, RayTable, TrainConfig, _objective

MICRO_FIELD = dict(shape_dim=4, appearance_dim=4, width=8, trunk_depth=2, radiance_depth=1,
                   shape_depth=2, mapping_width=8, mapping_depth=2)


def randomize_heads(model: FieldModel, gen: torch.Generator, scale: float = 0.05):
    # modest head scales keep the w0 = 30 field from becoming so curved that
    # no finite-difference step resolves it in float64
    with torch.no_grad():
        dh, ch = model.deform_head, model.correction_head
        dh.weight.copy_(scale * torch.randn(dh.weight.shape, generator=gen, dtype=dh.weight.dtype))
        dh.bias.copy_(0.1 * torch.randn(dh.bias.shape, generator=gen, dtype=dh.bias.dtype))
        # a strictly positive correction keeps |delta_sigma| and the density
        # clamp away from their kinks, so the objective is smooth here
        ch.weight.copy_(0.05 * torch.randn(ch.weight.shape, generator=gen, dtype=ch.weight.dtype))
        ch.bias.fill_(0.5)
        for net in (model.shape_mapping, model.appearance_mapping):
            for p in net.head.parameters():
                p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        # lift the template density so rendering weights are not negligible
        model.density_head.bias.fill_(1.5)


@dataclass
class MicroProblem:
    model: FieldModel
    zs: torch.Tensor
    za: torch.Tensor
    batch: Batch
    config: TrainConfig

    def min_correction(self) -> float:
        """Smallest delta_sigma over all batch samples."""
        with torch.no_grad():
            sf, af = self.model.film(LatentPair(self.zs, self.za))
            ro = torch.as_tensor(self.batch.ray_object)
            res = render_rays(self.model, sf.take(ro), af.take(ro), self.batch.origins,
                              self.batch.directions, self.batch.near, self.batch.far,
                              self.config.samples_per_ray)
        return float(res.samples.delta_sigma.min())

    def breakdown(self):
        return _objective(self.model, self.zs, self.za, self.batch, self.config, None, False)

    def params(self):
        named = {f"net.{n}": p for n, p in self.model.named_parameters()}
        named["latent.shape"] = self.zs
        named["latent.appearance"] = self.za
        return named


TINY_FIELD = dict(shape_dim=2, appearance_dim=2, width=4, trunk_depth=1, radiance_depth=1,
                  shape_depth=1, mapping_width=3, mapping_depth=1)


def micro_problem(precision: int = 64, seed: int = 0, field: dict = None, fresh: bool = False) -> MicroProblem:
    """2 objects, one 4x4 view each, P = 8, layer widths 8 (or ``field``).

    ``fresh`` keeps the untrained initialisation (zero heads, latents with
    std ``latent_std``) instead of generic random heads and latents.
    """
    spec = toy_chair_spec(instance_count=2, views_per_instance=1, image_size=4, seed=seed)
    objects, _ = generate_synthetic_family(spec)
    cfg = TrainConfig(samples_per_ray=8, batch_objects=2, rays_per_view=16, precision=precision,
                      stratified=False, reg_samples=0, **(field or MICRO_FIELD))
    gen = torch.Generator().manual_seed(seed)
    model = FieldModel(cfg.field_config()).to(cfg.dtype).reset_parameters(gen)
    std = cfg.latent_std if fresh else 0.5
    if not fresh:
        randomize_heads(model, gen)
    zs = (std * torch.randn(2, cfg.shape_dim, generator=gen, dtype=cfg.dtype)).requires_grad_(True)
    za = (std * torch.randn(2, cfg.appearance_dim, generator=gen, dtype=cfg.dtype)).requires_grad_(True)
    rays = RayTable(objects)
    parts = {k: [] for k in ("ray_object", "origins", "directions", "targets", "near", "far")}
    for slot in range(2):
        o, d, c, near, far = rays.views[slot][0]
        parts["ray_object"].append(np.full(len(o), slot))
        parts["origins"].append(o)
        parts["directions"].append(d)
        parts["targets"].append(c)
        parts["near"].append(np.full(len(o), near))
        parts["far"].append(np.full(len(o), far))
    batch = Batch(np.arange(2), **{k: np.concatenate(v) for k, v in parts.items()})
    for p in model.parameters():
        p.requires_grad_(True)
    return MicroProblem(model, zs, za, batch, cfg)


def single_precision(problem: MicroProblem) -> MicroProblem:
    """Float32 copy of a float64 problem at the rounded parameter values.

    The float64 parameters are rounded in place first, so both problems sit
    at exactly the same point.
    """
    with torch.no_grad():
        for t in problem.params().values():
            t.copy_(t.float().double())
    return MicroProblem(copy.deepcopy(problem.model).float(),
                        problem.zs.detach().float().requires_grad_(True),
                        problem.za.detach().float().requires_grad_(True), problem.batch,
                        dataclasses.replace(problem.config, precision=32))


def mixed_precision_check(problem: MicroProblem, term: str = "total", step: float = 1e-3):
    """Max relative error of float32 backward() against float64 differences."""
    low = single_precision(problem)
    grads = backward(getattr(low.breakdown(), term), low.params())

    def f():
        with torch.no_grad():
            return getattr(problem.breakdown(), term).item()

    worst, worst_name = 0.0, None
    for name, t in problem.params().items():
        numeric = ridders_difference(f, t, step)
        err = relative_error(grads[name].reshape(-1).double().numpy(), numeric).max()
        if err > worst:
            worst, worst_name = float(err), name
    return worst, worst_name


def gradient_check(problem: MicroProblem, term: str = "total", step: float = 1e-3,
                   order: int = 0, max_per_group: int = None, seed: int = 0):
    """Max relative error between backward() and finite differences.

    ``order=0`` uses Ridders' adaptive scheme starting at ``step``; 2 and 4
    use fixed central stencils.

    Returns ``(max_error, n_checked, worst_name)``.
    """
    loss = getattr(problem.breakdown(), term)
    params = problem.params()
    grads = backward(loss, params)
    rng = np.random.default_rng(seed)
    worst, worst_name, count = 0.0, None, 0

    def f():
        with torch.no_grad():
            return getattr(problem.breakdown(), term).item()

    for name, t in params.items():
        n = t.numel()
        idx = np.arange(n) if max_per_group is None or n <= max_per_group else np.sort(
            rng.choice(n, max_per_group, replace=False))
        if order == 0:
            numeric = ridders_difference(f, t, step, idx)
        else:
            numeric = central_difference(f, t, step, idx, order)
        analytic = grads[name].detach().reshape(-1).numpy()[idx]
        err = relative_error(analytic, numeric).max()
        count += len(idx)
        if err > worst:
            worst, worst_name = float(err), name
    return worst, count, worst_name
