"""Posed multi-view datasets and procedurally generated box-assembly families.

On disk a dataset is a directory with ``manifest.json`` and 8-bit sRGB PNG
images. In memory images are linear RGB floats in [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .exceptions import DomainError, GenerationError, LoadError, ValidationError
from .rays import pixels_to_rays

ORTHO_TOL = 1e-5
DEFAULT_EPS_SURF = 1e-3
LIGHT_DIR = np.array([0.3, 1.0, 0.5]) / np.linalg.norm([0.3, 1.0, 0.5])
AMBIENT = 0.35


# -- color space --------------------------------------------------------------


def srgb_to_linear(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def encode_srgb8(img) -> np.ndarray:
    return np.round(linear_to_srgb(img) * 255.0).astype(np.uint8)


def decode_srgb8(img8) -> np.ndarray:
    return srgb_to_linear(np.asarray(img8, dtype=np.float64) / 255.0)


# -- records -------------------------------------------------------------------


@dataclass
class View:
    image: np.ndarray
    extrinsic: np.ndarray
    intrinsic: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(3, 4)
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        self.near = float(self.near)
        self.far = float(self.far)
        self.validate()

    def validate(self):
        R = self.extrinsic[:, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise ValidationError("extrinsic rotation is not orthonormal")
        K = self.intrinsic
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValidationError("intrinsic focal entries must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValidationError("intrinsic matrix must be upper triangular")
        if not 0 < self.near < self.far:
            raise ValidationError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError("image must be H x W x 3")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class ObjectRecord:
    object_id: str
    views: List[View]

    def __post_init__(self):
        if not self.views:
            raise ValidationError(f"object {self.object_id} has no views")
        shapes = {v.image.shape for v in self.views}
        if len(shapes) != 1:
            raise ValidationError(
                f"object {self.object_id} mixes image resolutions {sorted(shapes)}"
            )


def load_dataset(root: Union[str, Path]) -> List[ObjectRecord]:
    """Read ``manifest.json`` and its images; objects are sorted by id."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise LoadError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    objects = []
    for obj in manifest["objects"]:
        views = []
        for v in obj["views"]:
            path = root / v["image"]
            if not path.is_file():
                raise LoadError(f"missing image file: {path}")
            with Image.open(path) as im:
                img8 = np.asarray(im.convert("RGB"))
            views.append(
                View(
                    image=decode_srgb8(img8),
                    extrinsic=np.array(v["extrinsic"], dtype=np.float64).reshape(3, 4),
                    intrinsic=np.array(v["intrinsic"], dtype=np.float64).reshape(3, 3),
                    near=v["near"],
                    far=v["far"],
                )
            )
        objects.append(ObjectRecord(str(obj["id"]), views))
    objects.sort(key=lambda o: o.object_id)
    return objects


def save_dataset(objects: Sequence[ObjectRecord], root: Union[str, Path]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for obj in objects:
        views = []
        for j, v in enumerate(obj.views):
            rel = f"images/{obj.object_id}_{j:03d}.png"
            Image.fromarray(encode_srgb8(v.image)).save(root / rel)
            views.append(
                {
                    "image": rel,
                    "extrinsic": [float(a) for a in v.extrinsic.ravel()],
                    "intrinsic": [float(a) for a in v.intrinsic.ravel()],
                    "near": v.near,
                    "far": v.far,
                }
            )
        entries.append({"id": obj.object_id, "views": views})
    with open(root / "manifest.json", "w") as f:
        json.dump({"objects": entries}, f, indent=1)
    return root


# -- box geometry ----------------------------------------------------------------


@dataclass
class Box:
    center: np.ndarray
    half_extent: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extent = np.asarray(self.half_extent, dtype=np.float64)

    @property
    def lo(self):
        return self.center - self.half_extent

    @property
    def hi(self):
        return self.center + self.half_extent

    def signed_distance(self, p) -> np.ndarray:
        q = np.abs(np.asarray(p) - self.center) - self.half_extent
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def to_local(self, p) -> np.ndarray:
        return (np.asarray(p) - self.lo) / (2.0 * self.half_extent)

    def from_local(self, uvw) -> np.ndarray:
        return self.lo + 2.0 * self.half_extent * np.asarray(uvw)


@dataclass
class GroundTruthCorrespondence:
    part_index: int
    local_uvw: np.ndarray


class CorrespondenceOracle:
    """Analytic correspondence between instances of a box family.

    A surface point is identified with the part whose surface is nearest
    (ties go to the lowest part index) and its normalised coordinates inside
    that part's box.
    """

    def __init__(self, instances: Sequence[Sequence[Box]], colors=None, eps_surf=DEFAULT_EPS_SURF):
        self.instances = [list(parts) for parts in instances]
        self.colors = None if colors is None else np.asarray(colors, dtype=np.float64)
        self.eps_surf = eps_surf

    def __len__(self):
        return len(self.instances)

    def locate(self, instance: int, point) -> GroundTruthCorrespondence:
        point = np.asarray(point, dtype=np.float64)
        dists = np.array([abs(b.signed_distance(point)) for b in self.instances[instance]])
        k = int(np.argmin(dists))
        if dists[k] > self.eps_surf:
            raise DomainError(
                f"point {point.tolist()} is {dists[k]:.3g} from the surface of instance {instance}"
            )
        uvw = np.clip(self.instances[instance][k].to_local(point), 0.0, 1.0)
        return GroundTruthCorrespondence(k, uvw)

    def point_at(self, instance: int, corr: GroundTruthCorrespondence) -> np.ndarray:
        return self.instances[instance][corr.part_index].from_local(corr.local_uvw)

    def union_signed_distance(self, instance: int, points) -> np.ndarray:
        return np.min([b.signed_distance(points) for b in self.instances[instance]], axis=0)

    def bbox(self, instance: int) -> Tuple[np.ndarray, np.ndarray]:
        parts = self.instances[instance]
        return np.min([b.lo for b in parts], axis=0), np.max([b.hi for b in parts], axis=0)

    def bbox_diagonal(self, instance: int) -> float:
        lo, hi = self.bbox(instance)
        return float(np.linalg.norm(hi - lo))

    def sample_surface(self, instance: int, n: int, rng, exterior_only=True):
        """Area-weighted samples on the union's surface.

        Returns ``(points, part_indices)``. Points on faces buried inside
        another part are rejected when ``exterior_only`` is set.
        """
        parts = self.instances[instance]
        faces = []
        for k, b in enumerate(parts):
            h = b.half_extent
            for axis in range(3):
                a, c = [i for i in range(3) if i != axis]
                area = 4.0 * h[a] * h[c]
                for sign in (-1.0, 1.0):
                    faces.append((k, axis, sign, area))
        areas = np.array([f[3] for f in faces])
        probs = areas / areas.sum()
        pts, idx = [], []
        while len(pts) < n:
            m = 2 * (n - len(pts)) + 16
            choice = rng.choice(len(faces), size=m, p=probs)
            uvw = rng.random((m, 3))
            for fi, u in zip(choice, uvw):
                k, axis, sign, _ = faces[fi]
                u = u.copy()
                u[axis] = 1.0 if sign > 0 else 0.0
                p = parts[k].from_local(u)
                if exterior_only and any(
                    parts[o].signed_distance(p) < 1e-9 for o in range(len(parts)) if o != k
                ):
                    continue
                pts.append(p)
                idx.append(k)
                if len(pts) == n:
                    break
        return np.array(pts), np.array(idx)

    def to_json(self) -> dict:
        out = []
        for i, parts in enumerate(self.instances):
            out.append(
                {
                    "index": i,
                    "parts": [
                        {"center": b.center.tolist(), "half_extent": b.half_extent.tolist()}
                        for b in parts
                    ],
                }
            )
        data = {"eps_surf": self.eps_surf, "instances": out}
        if self.colors is not None:
            data["part_colors"] = self.colors.tolist()
        return data

    @classmethod
    def from_json(cls, data: dict) -> "CorrespondenceOracle":
        instances = [
            [Box(p["center"], p["half_extent"]) for p in inst["parts"]]
            for inst in data["instances"]
        ]
        return cls(instances, data.get("part_colors"), data.get("eps_surf", DEFAULT_EPS_SURF))


def gt_correspond(oracle: CorrespondenceOracle, source_instance: int, target_instance: int, point):
    """Move a surface point of one instance to the same part coordinates on another."""
    corr = oracle.locate(source_instance, point)
    return oracle.point_at(target_instance, corr)


def load_oracle(path: Union[str, Path]) -> CorrespondenceOracle:
    with open(path) as f:
        return CorrespondenceOracle.from_json(json.load(f))


# -- synthetic family spec -------------------------------------------------------------


def _param_bounds(p) -> Tuple[float, float]:
    if isinstance(p, (int, float)):
        return float(p), float(p)
    if isinstance(p, (list, tuple)):
        return float(p[0]), float(p[1])
    base = float(p.get("base", 0.0))
    coeffs = p.get("drivers", {}).values()
    return base + sum(min(0.0, c) for c in coeffs), base + sum(max(0.0, c) for c in coeffs)


@dataclass
class PartSpec:
    """Ranges for one box part.

    Each of the six parameters (three center coordinates, three half
    extents) is a constant, an independent ``[lo, hi]`` range, or a linear
    form ``{"base": b, "drivers": {"name": coeff}}`` over shared uniform
    drivers in [0, 1]. Shared drivers keep attached parts attached.
    """

    name: str
    center: list
    half_extent: list
    color: Sequence[float] = (0.8, 0.8, 0.8)

    def validate(self):
        if len(self.center) != 3 or len(self.half_extent) != 3:
            raise ValidationError(f"part {self.name}: need 3 center and 3 extent parameters")
        for p in list(self.center) + list(self.half_extent):
            lo, hi = _param_bounds(p)
            if lo > hi:
                raise ValidationError(f"part {self.name}: empty range {p}")
        for p in self.half_extent:
            if _param_bounds(p)[0] <= 0:
                raise ValidationError(f"part {self.name}: extents must be positive")


@dataclass
class SyntheticFamilySpec:
    parts: List[PartSpec]
    instance_count: int = 8
    views_per_instance: int = 20
    image_size: int = 64
    seed: int = 0
    camera_radius: float = 3.2
    fov_degrees: float = 50.0
    elevation_range: Tuple[float, float] = (-10.0, 60.0)
    overlap_tolerance: float = 1e-6
    eps_surf: float = DEFAULT_EPS_SURF

    @property
    def part_count(self) -> int:
        return len(self.parts)

    def validate(self):
        if not self.parts:
            raise ValidationError("family needs at least one part")
        for p in self.parts:
            p.validate()
        if self.instance_count < 1 or self.views_per_instance < 1 or self.image_size < 1:
            raise ValidationError("counts and image size must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticFamilySpec":
        data = dict(data)
        parts = [PartSpec(**p) for p in data.pop("parts")]
        if "elevation_range" in data:
            data["elevation_range"] = tuple(data["elevation_range"])
        data.pop("part_count", None)
        return cls(parts=parts, **data)

    def to_dict(self) -> dict:
        return {
            "parts": [
                {"name": p.name, "center": p.center, "half_extent": p.half_extent, "color": list(p.color)}
                for p in self.parts
            ],
            "instance_count": self.instance_count,
            "views_per_instance": self.views_per_instance,
            "image_size": self.image_size,
            "seed": self.seed,
            "camera_radius": self.camera_radius,
            "fov_degrees": self.fov_degrees,
            "elevation_range": list(self.elevation_range),
            "overlap_tolerance": self.overlap_tolerance,
            "eps_surf": self.eps_surf,
        }


def toy_chair_spec(**overrides) -> SyntheticFamilySpec:
    """Six-part chair: seat, back and four legs, floor at y = -0.9.

    Drivers: ``leg`` (leg length 0.5..0.9), ``seat_w``/``seat_d`` (seat half
    width/depth 0.4..0.6) and ``back`` (back height 0.4..0.7).
    """
    leg = {"leg": 0.4}

    def lin(base, **drivers):
        return {"base": base, "drivers": drivers}

    seat = PartSpec(
        "seat",
        center=[0.0, lin(-0.35, **leg), 0.0],
        half_extent=[lin(0.4, seat_w=0.2), 0.05, lin(0.4, seat_d=0.2)],
        color=(0.85, 0.25, 0.2),
    )
    # back rests on the seat top (y = -0.3 + 0.4 leg) at the rear edge
    back = PartSpec(
        "back",
        center=[0.0, lin(-0.1, leg=0.4, back=0.15), lin(-0.35, seat_d=-0.2)],
        half_extent=[lin(0.4, seat_w=0.2), lin(0.2, back=0.15), 0.05],
        color=(0.2, 0.45, 0.85),
    )
    legs = []
    leg_colors = [(0.2, 0.75, 0.3), (0.9, 0.75, 0.15), (0.6, 0.3, 0.75), (0.15, 0.7, 0.7)]
    for n, (sx, sz) in enumerate([(-1, -1), (1, -1), (-1, 1), (1, 1)]):
        legs.append(
            PartSpec(
                f"leg{n}",
                center=[lin(sx * 0.34, seat_w=sx * 0.2), lin(-0.65, leg=0.2), lin(sz * 0.34, seat_d=sz * 0.2)],
                half_extent=[0.06, lin(0.25, leg=0.2), 0.06],
                color=leg_colors[n],
            )
        )
    spec = SyntheticFamilySpec(parts=[seat, back] + legs)
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def _draw_instance(spec: SyntheticFamilySpec, rng) -> List[Box]:
    drivers: Dict[str, float] = {}

    def value(p):
        if isinstance(p, (int, float)):
            return float(p)
        if isinstance(p, (list, tuple)):
            return float(p[0] + (p[1] - p[0]) * rng.random())
        total = float(p.get("base", 0.0))
        for name, coeff in sorted(p.get("drivers", {}).items()):
            total += coeff * drivers[name]
        return total

    # drivers are drawn in a fixed order so instances do not depend on dict order
    names = sorted(
        {n for part in spec.parts for p in list(part.center) + list(part.half_extent)
         if isinstance(p, dict) for n in p.get("drivers", {})}
    )
    for n in names:
        drivers[n] = float(rng.random())
    return [
        Box([value(p) for p in part.center], [value(p) for p in part.half_extent])
        for part in spec.parts
    ]


def check_overlaps(boxes: Sequence[Box], tolerance: float = 1e-6):
    for a in range(len(boxes)):
        for b in range(a + 1, len(boxes)):
            depth = np.minimum(boxes[a].hi, boxes[b].hi) - np.maximum(boxes[a].lo, boxes[b].lo)
            if np.all(depth > tolerance):
                raise GenerationError(
                    f"parts {a} and {b} overlap by {depth.min():.3g} (tolerance {tolerance})"
                )


# -- cameras and analytic rendering ----------------------------------------------


def look_at_extrinsic(position) -> np.ndarray:
    """World-to-camera matrix for a camera at ``position`` looking at the origin."""
    c = np.asarray(position, dtype=np.float64)
    z = c / np.linalg.norm(c)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return np.concatenate([R, (-R @ c)[:, None]], axis=1)


def pinhole_intrinsic(image_size: int, fov_degrees: float) -> np.ndarray:
    f = 0.5 * image_size / math.tan(math.radians(fov_degrees) / 2)
    c = image_size / 2.0
    return np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])


def orbit_camera(radius: float, azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    pos = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    return look_at_extrinsic(pos)


def intersect_boxes(origins, directions, boxes: Sequence[Box]):
    """Nearest ray/box hit. Returns ``(t, part_index, normal)``; misses get t = inf, part -1."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    n = o.shape[0]
    best_t = np.full(n, np.inf)
    best_k = np.full(n, -1)
    best_axis = np.zeros(n, dtype=int)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for k, b in enumerate(boxes):
            t0 = (b.lo - o) * inv
            t1 = (b.hi - o) * inv
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            t_enter = tmin.max(axis=1)
            t_exit = tmax.min(axis=1)
            hit = (t_enter <= t_exit) & (t_enter > 0) & (t_enter < best_t)
            best_t = np.where(hit, t_enter, best_t)
            best_k = np.where(hit, k, best_k)
            best_axis = np.where(hit, tmin.argmax(axis=1), best_axis)
    normal = np.zeros((n, 3))
    rows = np.arange(n)
    normal[rows, best_axis] = -np.sign(d[rows, best_axis])
    normal[best_k < 0] = 0.0
    return best_t, best_k, normal


def shade(part_colors, part_index, normal, background=1.0) -> np.ndarray:
    colors = np.asarray(part_colors, dtype=np.float64)
    lambert = AMBIENT + (1 - AMBIENT) * np.maximum(normal @ LIGHT_DIR, 0.0)
    out = colors[np.maximum(part_index, 0)] * lambert[:, None]
    out[part_index < 0] = background
    return out


def render_boxes(boxes, part_colors, extrinsic, intrinsic, height, width, background=1.0):
    """Render a flat-shaded box assembly; returns ``(image, part_index_map)``."""
    ys, xs = np.mgrid[0:height, 0:width]
    o, d = pixels_to_rays(extrinsic, intrinsic, xs.ravel() + 0.5, ys.ravel() + 0.5)
    _, k, normal = intersect_boxes(o, d, boxes)
    img = shade(part_colors, k, normal, background)
    return img.reshape(height, width, 3), k.reshape(height, width)


def make_view(boxes, part_colors, extrinsic, intrinsic, image_size, radius) -> View:
    img, _ = render_boxes(boxes, part_colors, extrinsic, intrinsic, image_size, image_size)
    # quantise so the in-memory image equals what a reload returns
    img = decode_srgb8(encode_srgb8(img))
    near = max(radius - math.sqrt(3.0), 1e-2)
    return View(img, extrinsic, intrinsic, near, radius + math.sqrt(3.0))


def generate_synthetic_family(spec: SyntheticFamilySpec):
    """Draw box-assembly instances and render posed views of each.

    Returns ``(objects, oracle)``. Identical specs produce bit-identical
    output.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    colors = np.array([p.color for p in spec.parts], dtype=np.float64)
    K = pinhole_intrinsic(spec.image_size, spec.fov_degrees)
    instances, objects = [], []
    for i in range(spec.instance_count):
        boxes = _draw_instance(spec, rng)
        check_overlaps(boxes, spec.overlap_tolerance)
        for b in boxes:
            if np.any(b.lo < -1.0) or np.any(b.hi > 1.0):
                raise GenerationError(f"instance {i} leaves the [-1, 1]^3 cube")
        instances.append(boxes)
        views = []
        lo, hi = spec.elevation_range
        for _ in range(spec.views_per_instance):
            az = rng.uniform(0.0, 360.0)
            el = rng.uniform(lo, hi)
            E = orbit_camera(spec.camera_radius, az, el)
            views.append(make_view(boxes, colors, E, K, spec.image_size, spec.camera_radius))
        objects.append(ObjectRecord(f"obj_{i:03d}", views))
    oracle = CorrespondenceOracle(instances, colors, spec.eps_surf)
    return objects, oracle


def write_synthetic_family(objects, oracle: CorrespondenceOracle, root: Union[str, Path]) -> Path:
    root = save_dataset(objects, root)
    with open(Path(root) / "gt_family.json", "w") as f:
        json.dump(oracle.to_json(), f, indent=1)
    return root
