"""Surface extraction and template-mediated dense correspondence."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import torch
from skimage import measure

from .dataset import View
from .exceptions import BackgroundPixelError, ValidationError
from .fields import FieldModel, LatentPair, instance_radiance, warp
from .rays import pixels_to_rays, project_points
from .render import render_rays, render_view
from .spatial_hash import SpatialHashGrid

DEFAULT_LEVEL = 10.0
DEFAULT_GRID = 64
MIN_TRIANGLE_AREA = 1e-12


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None
    empty_warning: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValidationError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted outward vertex normals."""
        v = self.vertices[self.triangles]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        n = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(n, self.triangles[:, k], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-12)

    def edge_use_counts(self) -> Dict[tuple, int]:
        counts: Dict[tuple, int] = {}
        for a, b, c in self.triangles.tolist():
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        counts = self.edge_use_counts()
        return bool(counts) and all(c == 2 for c in counts.values())


@dataclass
class CorrespondenceMap:
    source_instance: int
    target_instance: int
    source_points: np.ndarray
    template_points: np.ndarray
    target_points: np.ndarray
    distances_in_template: np.ndarray
    target_vertex_index: np.ndarray = field(default=None)


@dataclass
class KeypointAnnotation:
    name: str
    instance: int
    xyz: Optional[np.ndarray] = None
    pixel: Optional[dict] = None

    def __post_init__(self):
        if (self.xyz is None) == (self.pixel is None):
            raise ValidationError(
                f"keypoint {self.name!r} needs exactly one of 'xyz' or 'pixel'"
            )
        if self.xyz is not None:
            self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(3)


# -- marching cubes -------------------------------------------------------------------


def grid_points(resolution: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, resolution)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def mesh_from_volume(volume: np.ndarray, level: float) -> Mesh:
    """Marching cubes on a density volume sampled on a grid spanning [-1, 1]^3."""
    g = volume.shape[0]
    if volume.max() < level or volume.min() > level:
        warnings.warn(f"isosurface at level {level} is empty", RuntimeWarning)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), empty_warning=True)
    spacing = (2.0 / (g - 1),) * 3
    verts, faces, _, _ = measure.marching_cubes(
        volume, level=level, spacing=spacing, allow_degenerate=False
    )
    verts = verts - 1.0
    mesh = Mesh(verts, faces)
    keep = mesh.triangle_areas() > MIN_TRIANGLE_AREA
    if not keep.all():
        mesh = Mesh(verts, faces[keep])
    return mesh


def extract_density_mesh(density_fn: Callable[[np.ndarray], np.ndarray], resolution: int = DEFAULT_GRID,
                         level: float = DEFAULT_LEVEL, chunk: int = 65536) -> Mesh:
    if resolution < 8:
        raise ValidationError("grid resolution must be at least 8")
    pts = grid_points(resolution)
    vals = np.concatenate([np.asarray(density_fn(pts[s : s + chunk])) for s in range(0, len(pts), chunk)])
    return mesh_from_volume(vals.reshape(resolution, resolution, resolution), level)


def _model_dtype(model):
    return next(model.parameters()).dtype


def _as_code(z, model):
    return torch.as_tensor(z, dtype=_model_dtype(model)).reshape(1, -1)


def instance_density_fn(model: FieldModel, z_s):
    z = _as_code(z_s, model)

    @torch.no_grad()
    def fn(points):
        film = model.shape_mapping(z)
        x = torch.as_tensor(points, dtype=_model_dtype(model))
        idx = torch.zeros(len(x), dtype=torch.long)
        return model.evaluate(x, None, film.take(idx)).sigma.double().numpy()

    return fn


def extract_mesh(model: FieldModel, z_s, grid_resolution: int = DEFAULT_GRID,
                 level: float = DEFAULT_LEVEL) -> Mesh:
    return extract_density_mesh(instance_density_fn(model, z_s), grid_resolution, level)


@torch.no_grad()
def to_template(model: FieldModel, points, z_s, chunk: int = 65536) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = _as_code(z_s, model)
    out = []
    for s in range(0, len(pts), chunk):
        x = torch.as_tensor(pts[s : s + chunk], dtype=_model_dtype(model))
        out.append(warp(model, x, z)[0].double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 3))


def template_coordinate_colors(template_points) -> np.ndarray:
    """Visualisation colours: template coordinates mapped from [-1, 1] to [0, 1]."""
    return np.clip((np.asarray(template_points) + 1.0) / 2.0, 0.0, 1.0)


# -- correspondence ---------------------------------------------------------------------


def correspond_points(
    model: FieldModel,
    source: LatentPair,
    target: LatentPair,
    query_points,
    target_mesh: Mesh,
    cell_size: float,
    source_instance: int = 0,
    target_instance: int = 0,
) -> CorrespondenceMap:
    if target_mesh.is_empty or len(target_mesh.vertices) == 0:
        raise ValidationError("target mesh is empty")
    q = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    zs_i = np.asarray(torch.as_tensor(source.shape_code).detach().cpu(), dtype=np.float64)
    zs_j = np.asarray(torch.as_tensor(target.shape_code).detach().cpu(), dtype=np.float64)
    if np.array_equal(zs_i, zs_j):
        # one batch for both sets, since BLAS results can depend on batch size
        both = to_template(model, np.concatenate([q, target_mesh.vertices]), source.shape_code,
                           chunk=len(q) + len(target_mesh.vertices))
        q_tau, v_tau = both[: len(q)], both[len(q) :]
    else:
        q_tau = to_template(model, q, source.shape_code)
        v_tau = to_template(model, target_mesh.vertices, target.shape_code)
    grid = SpatialHashGrid(v_tau, cell_size)
    idx, dist = grid.query(q_tau)
    return CorrespondenceMap(
        source_instance, target_instance, q, q_tau, target_mesh.vertices[idx], dist, idx
    )


def correspond(
    model: FieldModel,
    latents_i: LatentPair,
    latents_j: LatentPair,
    query_points,
    grid_resolution: int = DEFAULT_GRID,
    level: float = DEFAULT_LEVEL,
    target_mesh: Optional[Mesh] = None,
    source_instance: int = 0,
    target_instance: int = 0,
) -> CorrespondenceMap:
    """Match points on instance i to mesh vertices of instance j through template space.

    Query points and the vertices of j's extracted surface are warped to the
    template; each query takes its nearest warped vertex (ties to the lowest
    index) and reports that vertex's original coordinates on j.
    """
    if target_mesh is None:
        target_mesh = extract_mesh(model, latents_j.shape_code, grid_resolution, level)
    cell = 2.0 * (2.0 / grid_resolution)
    return correspond_points(
        model, latents_i, latents_j, query_points, target_mesh, cell, source_instance, target_instance
    )


def identity_baseline(query_points, target_mesh: Mesh, grid_resolution: int = DEFAULT_GRID):
    """Nearest target vertex at the same raw coordinates (no warping)."""
    grid = SpatialHashGrid(target_mesh.vertices, 2.0 * (2.0 / grid_resolution))
    idx, dist = grid.query(query_points)
    return target_mesh.vertices[idx], dist


# -- lifting and transfer -------------------------------------------------------------


@torch.no_grad()
def lift_pixel(model: FieldModel, latents: LatentPair, camera: View, pixel, n_samples: int = 64,
               min_opacity: float = 0.5) -> np.ndarray:
    """3D surface point under a pixel, from the expected termination depth."""
    px, py = float(pixel[0]), float(pixel[1])
    o, d = pixels_to_rays(camera.extrinsic, camera.intrinsic, np.array([px]), np.array([py]))
    sf, af = model.film(LatentPair(_as_code(latents.shape_code, model), _as_code(latents.appearance_code, model)))
    idx = torch.zeros(1, dtype=torch.long)
    res = render_rays(model, sf.take(idx), af.take(idx), o, d, camera.near, camera.far, n_samples)
    opacity = float(res.output.opacity[0])
    if opacity < min_opacity:
        raise BackgroundPixelError(f"pixel ({px}, {py}) has opacity {opacity:.3f} < {min_opacity}")
    return o[0] + float(res.output.depth[0]) * d[0]


def read_keypoints(path: Union[str, Path]):
    with open(path) as f:
        data = json.load(f)
    instance = int(data["instance"])
    kps = []
    for k in data["keypoints"]:
        kps.append(
            KeypointAnnotation(k["name"], instance, xyz=k.get("xyz"), pixel=k.get("pixel"))
        )
    return instance, kps


def write_keypoints(path: Union[str, Path], instance: int, keypoints: Sequence[KeypointAnnotation]):
    out = []
    for k in keypoints:
        entry = {"name": k.name}
        if k.xyz is not None:
            entry["xyz"] = [float(v) for v in k.xyz]
        else:
            entry["pixel"] = k.pixel
        out.append(entry)
    with open(path, "w") as f:
        json.dump({"instance": instance, "keypoints": out}, f, indent=1)


def transfer_keypoints(
    model: FieldModel,
    latent_table: Callable[[int], LatentPair],
    annotations: Sequence[KeypointAnnotation],
    targets: Sequence[int],
    source_views: Optional[Sequence[View]] = None,
    target_views: Optional[Dict[int, Sequence[View]]] = None,
    grid_resolution: int = DEFAULT_GRID,
    level: float = DEFAULT_LEVEL,
    n_samples: int = 64,
) -> dict:
    """Carry annotated keypoints from one instance to each target instance.

    Pixel annotations are lifted to 3D first. Returns a JSON-ready dict
    with per-target 3D positions, template-space distances and, when target
    views are given, projected pixel coordinates per view.
    """
    if not annotations:
        raise ValidationError("no keypoints to transfer")
    src = annotations[0].instance
    src_lat = latent_table(src)
    names, pts = [], []
    for k in annotations:
        if k.xyz is not None:
            pts.append(k.xyz)
        else:
            if source_views is None:
                raise ValidationError("pixel keypoints need the source instance's views")
            view = source_views[int(k.pixel["view"])]
            pts.append(lift_pixel(model, src_lat, view, (k.pixel["x"], k.pixel["y"]), n_samples))
        names.append(k.name)
    pts = np.array(pts)
    result = {"source_instance": src, "targets": []}
    for t in targets:
        cmap = correspond(model, src_lat, latent_table(t), pts, grid_resolution, level,
                          source_instance=src, target_instance=t)
        entries = []
        for n, name in enumerate(names):
            e = {
                "name": name,
                "source_xyz": pts[n].tolist(),
                "xyz": cmap.target_points[n].tolist(),
                "distance": float(cmap.distances_in_template[n]),
            }
            if target_views and t in target_views:
                e["pixels"] = [
                    {"view": vi, "x": float(uv[0]), "y": float(uv[1])}
                    for vi, v in enumerate(target_views[t])
                    for uv in [project_points(v.extrinsic, v.intrinsic, cmap.target_points[n])]
                ]
            entries.append(e)
        result["targets"].append({"instance": t, "keypoints": entries})
    return result


@torch.no_grad()
def transfer_texture(
    model: FieldModel,
    source: LatentPair,
    target: LatentPair,
    grid_resolution: int = DEFAULT_GRID,
    level: float = DEFAULT_LEVEL,
    cameras: Sequence[View] = (),
    n_samples: int = 64,
    background: float = 1.0,
    source_mesh: Optional[Mesh] = None,
    target_mesh: Optional[Mesh] = None,
):
    """Paint the target's surface with the source's radiance.

    Each target vertex is matched to a source vertex through template space
    and coloured with the source radiance there, using the matched source
    vertex's outward normal as the viewing direction. Returns ``(colored_target_mesh, images)`` where
    ``images`` renders the target geometry with colours found the same way.
    """
    if source_mesh is None:
        source_mesh = extract_mesh(model, source.shape_code, grid_resolution, level)
    if target_mesh is None:
        target_mesh = extract_mesh(model, target.shape_code, grid_resolution, level)
    cell = 2.0 * (2.0 / grid_resolution)
    cmap = correspond_points(model, target, source, target_mesh.vertices, source_mesh, cell)
    source_normals = source_mesh.vertex_normals()
    normals = source_normals[cmap.target_vertex_index]
    colors = _radiance_at(model, source, cmap.target_points, normals)
    painted = Mesh(target_mesh.vertices, target_mesh.triangles, colors)

    images = []
    for cam in cameras:
        _, depth, opacity = render_view(model, target, cam, n_samples=n_samples, background=background)
        h, w = depth.shape
        ys, xs = np.mgrid[0:h, 0:w]
        o, d = pixels_to_rays(cam.extrinsic, cam.intrinsic, xs.ravel() + 0.5, ys.ravel() + 0.5)
        img = np.full((h * w, 3), background, dtype=np.float64)
        hit = opacity.ravel() >= 0.5
        if hit.any():
            surf = o[hit] + depth.ravel()[hit, None] * d[hit]
            pm = correspond_points(model, target, source, surf, source_mesh, cell)
            pn = source_normals[pm.target_vertex_index]
            c = _radiance_at(model, source, pm.target_points, pn)
            a = opacity.ravel()[hit, None]
            img[hit] = a * c + (1 - a) * background
        images.append(img.reshape(h, w, 3))
    return painted, images


def _radiance_at(model, latents: LatentPair, points, directions) -> np.ndarray:
    dtype = _model_dtype(model)
    x = torch.as_tensor(points, dtype=dtype)
    d = torch.as_tensor(directions, dtype=dtype)
    d = d / torch.clamp(d.norm(dim=-1, keepdim=True), min=1e-12)
    c = instance_radiance(model, x, d, _as_code(latents.shape_code, model), _as_code(latents.appearance_code, model))
    return c.double().numpy()


# -- file formats -------------------------------------------------------------------------


def write_ply(path: Union[str, Path], mesh: Mesh):
    has_color = mesh.colors is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z"]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    if has_color:
        c8 = np.round(np.clip(mesh.colors, 0, 1) * 255).astype(int)
    for n, v in enumerate(mesh.vertices):
        row = f"{v[0]:.7g} {v[1]:.7g} {v[2]:.7g}"
        if has_color:
            row += " {} {} {}".format(*c8[n])
        lines.append(row)
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path: Union[str, Path]) -> Mesh:
    text = Path(path).read_text().splitlines()
    n_vert = n_face = 0
    has_color = False
    i = 0
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:2] == ["property", "uchar"] and parts[2] == "red":
            has_color = True
        i += 1
    body = text[i + 1 :]
    vrows = [list(map(float, r.split())) for r in body[:n_vert]]
    frows = [list(map(int, r.split()))[1:4] for r in body[n_vert : n_vert + n_face]]
    v = np.array(vrows).reshape(-1, 6 if has_color else 3)
    colors = v[:, 3:6] / 255.0 if has_color else None
    return Mesh(v[:, :3], np.array(frows, dtype=np.int64).reshape(-1, 3), colors)


def write_correspondence_csv(path: Union[str, Path], cmap: CorrespondenceMap):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source_x", "source_y", "source_z", "template_x", "template_y", "template_z",
                    "target_x", "target_y", "target_z", "distance"])
        for s, q, t, d in zip(cmap.source_points, cmap.template_points, cmap.target_points,
                              cmap.distances_in_template):
            w.writerow([*(f"{a:.9g}" for a in s), *(f"{a:.9g}" for a in q),
                        *(f"{a:.9g}" for a in t), f"{d:.9g}"])
