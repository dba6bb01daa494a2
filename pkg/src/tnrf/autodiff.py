"""Gradient plumbing on top of torch autograd.

Reverse-mode gradients come from torch. This module adds the pieces the
training objective needs around it: named parameter groups with zero-filled
gradients, non-finite diagnostics, generic spatial derivatives of point
fields, and central-difference checkers used by the test-suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional

import numpy as np
import torch

from .exceptions import NonFiniteError


@dataclass
class ParamGroup:
    name: str
    values: np.ndarray
    gradient: np.ndarray


def backward(
    loss: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    retain_graph: bool = False,
    diagnose: bool = False,
) -> Dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to every named tensor.

    Tensors the loss does not depend on get zero gradients. Raises
    :class:`NonFiniteError` when the loss or any gradient is not finite;
    with ``diagnose`` the backward pass runs under anomaly detection so the
    message names the offending operation.
    """
    if loss.dim() != 0:
        raise ValueError("backward needs a scalar loss")
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is {loss.item()}")
    names = list(params)
    tensors = [params[n] for n in names]
    try:
        with torch.autograd.set_detect_anomaly(diagnose):
            grads = torch.autograd.grad(
                loss, tensors, retain_graph=retain_graph, allow_unused=True
            )
    except RuntimeError as err:
        if "nan" in str(err).lower():
            raise NonFiniteError(str(err)) from err
        raise
    out = {}
    for name, t, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        elif not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter group {name!r}")
        out[name] = g
    return out


def param_groups(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor]) -> List[ParamGroup]:
    return [
        ParamGroup(
            name,
            params[name].detach().cpu().numpy().ravel().copy(),
            grads[name].detach().cpu().numpy().ravel().copy(),
        )
        for name in params
    ]


def spatial_gradient(field: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, create_graph: bool = False):
    """Gradient of a per-point scalar field, ``(N, 3) -> (N, 3)``.

    ``field`` maps ``(N, 3)`` points to ``(N,)`` values with no coupling
    between rows.
    """
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        y = field(x)
        (g,) = torch.autograd.grad(y.sum(), x, create_graph=create_graph)
    return g


def warp_jacobian_matrix(warp_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, create_graph: bool = False):
    """Per-point Jacobian ``J[n, i, j] = d W_i / d x_j`` of a 3-vector field."""
    x = x.detach().requires_grad_(True)
    rows = []
    with torch.enable_grad():
        w = warp_fn(x)
        for i in range(3):
            (g,) = torch.autograd.grad(w[:, i].sum(), x, retain_graph=True, create_graph=create_graph)
            rows.append(g)
    return torch.stack(rows, dim=1)


# -- finite differences ------------------------------------------------------------


def central_difference(fn: Callable[[], float], tensor: torch.Tensor, step: float = 1e-5,
                       indices: Optional[Iterable[int]] = None, order: int = 2) -> np.ndarray:
    """Central-difference gradient of ``fn()`` w.r.t. entries of ``tensor``.

    ``order=2`` is the three-point stencil; ``order=4`` is the five-point
    stencil (Richardson extrapolation of steps ``h`` and ``2h``), whose
    truncation error is O(h^4). ``tensor`` is perturbed in place and
    restored; ``fn`` must read it.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else list(indices)
    out = np.zeros(len(idx))

    def at(i, orig, delta):
        flat[i] = orig + delta
        return float(fn())

    for k, i in enumerate(idx):
        orig = flat[i].item()
        if order == 2:
            out[k] = (at(i, orig, step) - at(i, orig, -step)) / (2 * step)
        else:
            out[k] = (
                -at(i, orig, 2 * step) + 8 * at(i, orig, step)
                - 8 * at(i, orig, -step) + at(i, orig, -2 * step)
            ) / (12 * step)
        flat[i] = orig
    return out


def ridders_difference(fn: Callable[[], float], tensor: torch.Tensor, step: float = 1e-2,
                       indices: Optional[Iterable[int]] = None, shrink: float = 2.0,
                       max_levels: int = 10, min_levels: int = 4) -> np.ndarray:
    """Ridders' adaptive central differences.

    Starts from central differences at ``step`` and repeatedly divides the
    step by ``shrink``, extrapolating the tableau towards zero step. The
    entry with the smallest estimated error is kept, and the search stops
    once the error estimate starts to grow. This resolves both flat
    directions (large steps beat round-off) and sharply curved ones (small
    steps beat truncation).
    """
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else list(indices)
    out = np.zeros(len(idx))
    s2 = shrink * shrink

    for k, i in enumerate(idx):
        orig = flat[i].item()

        def cd(h):
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            return (fp - fm) / (2 * h)

        h = step
        prev = [cd(h)]
        best, best_err = prev[0], np.inf
        for level in range(1, max_levels):
            h /= shrink
            row = [cd(h)]
            fac = s2
            for j in range(1, len(prev) + 1):
                row.append((row[j - 1] * fac - prev[j - 1]) / (fac - 1))
                fac *= s2
                err = max(abs(row[j] - row[j - 1]), abs(row[j] - prev[j - 1]))
                if err <= best_err:
                    best_err, best = err, row[j]
            if level >= min_levels and abs(row[-1] - prev[-1]) >= 2 * best_err:
                break
            prev = row
        flat[i] = orig
        out[k] = best
    return out


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_spatial_gradient(field, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    cols = []
    for j in range(3):
        e = torch.zeros_like(x)
        e[:, j] = step
        cols.append((field(x + e) - field(x - e)) / (2 * step))
    return torch.stack(cols, dim=-1)


def numeric_jacobian(warp_fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    cols = []
    for j in range(3):
        e = torch.zeros_like(x)
        e[:, j] = step
        cols.append((warp_fn(x + e) - warp_fn(x - e)) / (2 * step))
    return torch.stack(cols, dim=-1)
