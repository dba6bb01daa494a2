import json

import numpy as np
import pytest
import torch
from torch import nn

from conftest import MICRO, randomize
from tnrf.correspondence import (
    CorrespondenceMap,
    KeypointAnnotation,
    Mesh,
    correspond,
    correspond_points,
    extract_density_mesh,
    extract_mesh,
    grid_points,
    instance_density_fn,
    lift_pixel,
    read_keypoints,
    read_ply,
    template_coordinate_colors,
    to_template,
    transfer_keypoints,
    transfer_texture,
    write_correspondence_csv,
    write_keypoints,
    write_ply,
)
from tnrf.dataset import View, orbit_camera, pinhole_intrinsic
from tnrf.exceptions import BackgroundPixelError, ValidationError
from tnrf.fields import FieldModel, FieldSample, LatentPair, instance_radiance, warp
from tnrf.film_siren import FilmParams
from tnrf.render import render_rays


def sphere_density(points):
    return 50.0 * (np.linalg.norm(points, axis=1) < 0.5)


def radial_error(mesh):
    return abs(np.linalg.norm(mesh.vertices, axis=1).mean() - 0.5)


@pytest.fixture(scope="module")
def sphere_meshes():
    return {g: extract_density_mesh(sphere_density, g, 10.0) for g in (16, 32, 64, 128)}


@pytest.fixture(scope="module")
def shaped_model():
    """Random micro model with an iso-level chosen so its surface is nonempty."""
    model = randomize(FieldModel(MICRO).double(), seed=4)
    lat = LatentPair(torch.full((4,), 0.3, dtype=torch.float64), torch.full((4,), -0.2, dtype=torch.float64))
    vals = instance_density_fn(model, lat.shape_code)(grid_points(16))
    return model, lat, float(np.quantile(vals, 0.6))


# -- marching cubes -------------------------------------------------------------------


def test_sphere_radius_within_tolerance(sphere_meshes):
    mesh = sphere_meshes[64]
    assert radial_error(mesh) <= 1.5 * (2.0 / 64)
    assert mesh.is_watertight()
    assert (mesh.triangle_areas() > 1e-12).all()


def test_sphere_error_does_not_grow_with_resolution(sphere_meshes):
    errs = [radial_error(sphere_meshes[g]) for g in (16, 32, 64, 128)]
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


def test_zero_density_gives_empty_mesh():
    with pytest.warns(RuntimeWarning):
        mesh = extract_density_mesh(lambda p: np.zeros(len(p)), 16, 10.0)
    assert mesh.is_empty and mesh.empty_warning


def test_grid_too_small():
    with pytest.raises(ValidationError):
        extract_density_mesh(sphere_density, 7, 10.0)


def test_mesh_rejects_bad_indices():
    with pytest.raises(ValidationError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


def test_extract_mesh_uses_instance_density(shaped_model):
    model, lat, level = shaped_model
    mesh = extract_mesh(model, lat.shape_code, 16, level)
    assert not mesh.is_empty
    assert np.abs(mesh.vertices).max() <= 1.0 + 1e-12


# -- template mapping and correspondence -------------------------------------------


def test_to_template_matches_warp(random_micro_model):
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    z = torch.full((4,), 0.4, dtype=torch.float64)
    ref = warp(random_micro_model, torch.as_tensor(pts), z.reshape(1, -1))[0].detach().numpy()
    assert np.array_equal(to_template(random_micro_model, pts, z), ref)
    # chunking changes BLAS blocking, so only rounding-level agreement is owed
    assert np.allclose(to_template(random_micro_model, pts, z, chunk=7), ref, rtol=0, atol=1e-14)


def test_to_template_identity_at_init(micro_model):
    pts = np.random.default_rng(1).uniform(-1, 1, (20, 3))
    assert np.array_equal(to_template(micro_model, pts, np.zeros(4)), pts)


def test_self_correspondence_exact(shaped_model):
    model, lat, level = shaped_model
    mesh = extract_mesh(model, lat.shape_code, 16, level)
    cmap = correspond(model, lat, lat, mesh.vertices, 16, level, target_mesh=mesh)
    assert np.array_equal(cmap.target_points, mesh.vertices)
    assert np.all(cmap.distances_in_template == 0.0)
    n = len(mesh.vertices)
    assert all(len(a) == n for a in (cmap.source_points, cmap.template_points, cmap.target_points,
                                     cmap.distances_in_template))


def test_distances_shrink_as_target_mesh_refines(micro_model, sphere_meshes):
    # identity warp at init, so template distances are raw distances to the sphere's vertices
    rng = np.random.default_rng(2)
    q = rng.normal(size=(200, 3))
    q = 0.5 * q / np.linalg.norm(q, axis=1, keepdims=True)
    lat = LatentPair(np.zeros(4), np.zeros(4))
    dists = [correspond_points(micro_model, lat, lat, q, sphere_meshes[g], 4.0 / g).distances_in_template
             for g in (16, 32, 64, 128)]
    for a, b in zip(dists, dists[1:]):
        assert b.max() <= a.max() and b.mean() <= a.mean()


def test_ties_pick_lower_vertex_index(micro_model):
    verts = np.array([[0.2, 0.0, 0.0], [-0.2, 0.0, 0.0], [0.0, 0.9, 0.0]])
    mesh = Mesh(verts, np.array([[0, 1, 2]]))
    lat = LatentPair(np.zeros(4), np.zeros(4))
    cmap = correspond_points(micro_model, lat, lat, np.zeros((1, 3)), mesh, 0.1)
    assert cmap.target_vertex_index[0] == 0
    assert np.array_equal(cmap.target_points[0], verts[0])


def test_empty_target_rejected(micro_model):
    lat = LatentPair(np.zeros(4), np.zeros(4))
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValidationError):
        correspond_points(micro_model, lat, lat, np.zeros((1, 3)), empty, 0.1)


def test_template_colors_in_unit_cube():
    c = template_coordinate_colors(np.array([[-1.0, 0.0, 1.0], [-3.0, 0.5, 2.0]]))
    assert np.allclose(c, [[0.0, 0.5, 1.0], [0.0, 0.75, 1.0]])


# -- lifting --------------------------------------------------------------------------


class SlabField(nn.Module):
    """Opaque slab occupying ``z_front - thickness <= z <= z_front``."""

    def __init__(self, z_front=-2.0, thickness=1.0, sigma=1e4):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.z_front, self.thickness, self.sigma = z_front, thickness, sigma

    def film(self, latents):
        n = latents.shape_code.shape[0]
        return FilmParams([torch.zeros(n, 1)], []), FilmParams([torch.zeros(n, 1)], [])

    def evaluate(self, x, d, shape_film, app_film=None, with_derivatives=False):
        z = x[:, 2]
        inside = (z <= self.z_front) & (z >= self.z_front - self.thickness)
        sigma = torch.where(inside, torch.full_like(z, self.sigma), torch.zeros_like(z))
        zeros = torch.zeros_like(x)
        return FieldSample(sigma, torch.full_like(x, 0.5), sigma, zeros[:, 0], x, zeros)


def slab_camera(size=9, near=1.0, far=5.0):
    E = np.hstack([np.eye(3), np.zeros((3, 1))])
    return View(np.zeros((size, size, 3)), E, pinhole_intrinsic(size, 40.0), near, far)


def test_lift_center_pixel_on_slab():
    cam, p = slab_camera(), 64
    lat = LatentPair(torch.zeros(1), torch.zeros(1))
    point = lift_pixel(SlabField(), lat, cam, (4.5, 4.5), n_samples=p)
    tol = 2.0 / p * (cam.far - cam.near)
    assert np.allclose(point, [0.0, 0.0, -2.0], atol=tol)


def test_lift_background_pixel_raises():
    cam = slab_camera()
    lat = LatentPair(torch.zeros(1), torch.zeros(1))
    with pytest.raises(BackgroundPixelError):
        lift_pixel(SlabField(z_front=-10.0), lat, cam, (4.5, 4.5))


def test_lifted_point_rerenders_consistent_depth():
    cam, p = slab_camera(), 64
    lat = LatentPair(torch.zeros(1), torch.zeros(1))
    model = SlabField()
    point = lift_pixel(model, lat, cam, (2.5, 6.5), n_samples=p)
    # re-render along the ray from the camera centre through the lifted point
    d = point / np.linalg.norm(point)
    sf, af = model.film(LatentPair(torch.zeros(1, 1), torch.zeros(1, 1)))
    res = render_rays(model, sf, af, np.zeros((1, 3)), d[None], cam.near, cam.far, p)
    assert abs(float(res.output.depth[0]) - np.linalg.norm(point)) <= 2.0 / p * (cam.far - cam.near)


# -- keypoints ------------------------------------------------------------------------


def test_keypoint_needs_exactly_one_form():
    with pytest.raises(ValidationError):
        KeypointAnnotation("seat", 0, xyz=[0, 0, 0], pixel={"view": 0, "x": 1, "y": 2})
    with pytest.raises(ValidationError):
        KeypointAnnotation("seat", 0)


def test_keypoint_json_round_trip(tmp_path):
    kps = [KeypointAnnotation("a", 2, xyz=[0.1, -0.2, 0.3]), KeypointAnnotation("b", 2, pixel={"view": 1, "x": 3.5, "y": 4.0})]
    write_keypoints(tmp_path / "k.json", 2, kps)
    instance, back = read_keypoints(tmp_path / "k.json")
    assert instance == 2 and [k.name for k in back] == ["a", "b"]
    assert np.array_equal(back[0].xyz, kps[0].xyz) and back[1].pixel == kps[1].pixel
    raw = json.loads((tmp_path / "k.json").read_text())
    assert set(raw) == {"instance", "keypoints"}


def test_keypoint_transfer_to_self_unchanged(shaped_model):
    model, lat, level = shaped_model
    mesh = extract_mesh(model, lat.shape_code, 16, level)
    chosen = mesh.vertices[[0, len(mesh.vertices) // 2, -1]]
    kps = [KeypointAnnotation(f"k{n}", 0, xyz=p) for n, p in enumerate(chosen)]
    cam = View(np.zeros((8, 8, 3)), orbit_camera(3.0, 20.0, 15.0), pinhole_intrinsic(8, 50.0), 1.0, 5.0)
    out = transfer_keypoints(model, lambda i: lat, kps, [0], target_views={0: [cam]},
                             grid_resolution=16, level=level)
    entries = out["targets"][0]["keypoints"]
    for e, p in zip(entries, chosen):
        assert np.array_equal(e["xyz"], p) and e["distance"] == 0.0
        assert len(e["pixels"]) == 1
    with pytest.raises(ValidationError):
        transfer_keypoints(model, lambda i: lat, [], [0])


# -- texture transfer ---------------------------------------------------------------


def test_texture_transfer_identity(shaped_model):
    model, lat, level = shaped_model
    cam = View(np.zeros((8, 8, 3)), orbit_camera(3.0, 30.0, 20.0), pinhole_intrinsic(8, 50.0), 1.0, 5.0)
    painted, images = transfer_texture(model, lat, lat, 16, level, cameras=[cam], n_samples=16)
    mesh = extract_mesh(model, lat.shape_code, 16, level)
    normals = torch.as_tensor(mesh.vertex_normals())
    own = instance_radiance(model, torch.as_tensor(mesh.vertices), normals,
                            torch.as_tensor(lat.shape_code).reshape(1, -1),
                            torch.as_tensor(lat.appearance_code).reshape(1, -1)).detach().numpy()
    assert np.abs(painted.colors - own).max() <= 1.0 / 255
    assert painted.colors.min() >= 0 and painted.colors.max() <= 1
    assert len(images) == 1 and images[0].shape == (8, 8, 3)
    assert images[0].min() >= 0 and images[0].max() <= 1


# -- file formats ---------------------------------------------------------------------


def test_ply_round_trip(tmp_path, sphere_meshes):
    mesh = sphere_meshes[16]
    write_ply(tmp_path / "m.ply", mesh)
    back = read_ply(tmp_path / "m.ply")
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
    assert back.colors is None


def test_colored_ply_round_trip(tmp_path):
    colors = np.array([[0.0, 0.5, 1.0], [1.0, 1.0, 1.0], [0.2, 0.4, 0.6]])
    mesh = Mesh(np.eye(3), np.array([[0, 1, 2]]), colors)
    write_ply(tmp_path / "c.ply", mesh)
    back = read_ply(tmp_path / "c.ply")
    assert np.abs(back.colors - colors).max() <= 0.5 / 255 + 1e-12


def test_correspondence_csv(tmp_path):
    pts = np.arange(6, dtype=float).reshape(2, 3) / 7
    cmap = CorrespondenceMap(0, 1, pts, pts + 1, pts - 1, np.array([0.0, 0.25]), np.array([3, 4]))
    write_correspondence_csv(tmp_path / "c.csv", cmap)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0].split(",")[-1] == "distance" and len(rows) == 3
    vals = np.array([list(map(float, r.split(","))) for r in rows[1:]])
    assert np.allclose(vals[:, :3], pts, atol=1e-9) and np.allclose(vals[:, 9], [0.0, 0.25])
