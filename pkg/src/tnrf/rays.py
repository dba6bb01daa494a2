"""Pinhole ray generation and sampling along rays.

Conventions: the extrinsic maps world to camera, the camera looks down its
-z axis with +y up, and pixel (0, 0) is the top-left corner. Pixel centres
sit at half-integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


@dataclass
class RaySamples:
    positions: np.ndarray
    t_values: np.ndarray
    deltas: np.ndarray


def camera_center(extrinsic) -> np.ndarray:
    E = np.asarray(extrinsic, dtype=np.float64)
    R, t = E[:, :3], E[:, 3]
    return -R.T @ t


def pixels_to_rays(extrinsic, intrinsic, px, py):
    """Vectorised pixel-to-ray conversion.

    ``px``/``py`` are continuous pixel coordinates of any (matching) shape.
    Returns ``(origins, directions)`` with a trailing axis of size 3.
    """
    E = np.asarray(extrinsic, dtype=np.float64)
    K = np.asarray(intrinsic, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise np.linalg.LinAlgError("intrinsic matrix is singular")
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    pix = np.stack([px, py, np.ones_like(px)], axis=-1)
    uvw = pix @ np.linalg.inv(K).T
    # image y grows downward and the camera looks down -z
    d_cam = np.stack([uvw[..., 0], -uvw[..., 1], -uvw[..., 2]], axis=-1)
    R = E[:, :3]
    d_world = d_cam @ R
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = np.broadcast_to(camera_center(E), d_world.shape).copy()
    return origin, d_world


def pixel_to_ray(camera, px: float, py: float) -> Ray:
    """Ray through continuous pixel coordinate ``(px, py)`` of ``camera``."""
    h, w = camera.image.shape[:2]
    if not (0 <= px < w and 0 <= py < h):
        raise ValueError(f"pixel ({px}, {py}) outside {w}x{h} image")
    o, d = pixels_to_rays(camera.extrinsic, camera.intrinsic, px, py)
    return Ray(o, d, float(camera.near), float(camera.far))


def project_points(extrinsic, intrinsic, points) -> np.ndarray:
    """Inverse of :func:`pixels_to_rays`: world points to pixel coordinates."""
    E = np.asarray(extrinsic, dtype=np.float64)
    K = np.asarray(intrinsic, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    cam = p @ E[:, :3].T + E[:, 3]
    cv = np.stack([cam[..., 0], -cam[..., 1], -cam[..., 2]], axis=-1)
    uvw = cv @ K.T
    return uvw[..., :2] / uvw[..., 2:3]


def sample_t(t_near, t_far, n_samples: int, stratified: bool = False, rng=None):
    """Sample depths for a batch of rays.

    ``t_near``/``t_far`` broadcast to shape ``(R,)``. Deterministic mode uses
    bin midpoints; stratified mode draws one uniform value per bin. The last
    interval extends to ``t_far`` rather than infinity.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    t_near, t_far = np.broadcast_arrays(t_near, t_far)
    if np.any(t_far <= t_near):
        raise ValueError("t_near must be smaller than t_far")
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((t_near.shape[0], n_samples))
    else:
        u = np.full((t_near.shape[0], n_samples), 0.5)
    frac = (np.arange(n_samples) + u) / n_samples
    span = (t_far - t_near)[:, None]
    t = t_near[:, None] + span * frac
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = t_far - t[:, -1]
    return t, deltas


def sample_along_ray(ray: Ray, n_samples: int, stratified: bool = False, rng=None) -> RaySamples:
    t, deltas = sample_t(ray.t_near, ray.t_far, n_samples, stratified, rng)
    t, deltas = t[0], deltas[0]
    positions = ray.origin[None, :] + t[:, None] * ray.direction[None, :]
    return RaySamples(positions, t, deltas)
