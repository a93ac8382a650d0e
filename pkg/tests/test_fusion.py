from collections import Counter

import numpy as np
import pytest

from splatdepth.core import Camera
from splatdepth.fusion import TriangleMesh, TsdfVolume, extract_mesh, integrate_depth, volume_for_scene
from splatdepth.synthetic import orbit_cameras, plane_cameras, plane_depth, random_scene


def sphere_depth(camera: Camera, radius: float = 1.0) -> np.ndarray:
    """Exact z-depth of a sphere at the origin (0 where the ray misses)."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones(u.shape)], -1)
    d = d_cam @ camera.rotation
    o = camera.center
    a = np.einsum("...i,...i", d, d)
    b = 2 * d @ o
    c = o @ o - radius**2
    disc = b * b - 4 * a * c
    t = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), 0.0)
    return np.where(disc >= 0, t, 0.0)


def sphere_volume(voxel=0.05):
    n = int(np.ceil(2.6 / voxel)) + 1
    return TsdfVolume([-1.3] * 3, voxel, (n, n, n))


@pytest.fixture(scope="module")
def fused_sphere():
    vol = sphere_volume()
    cams = orbit_cameras(12, width=96, height=96)
    for cam in cams:
        integrate_depth(vol, sphere_depth(cam), cam)
    return vol, cams


def test_volume_validation():
    with pytest.raises(ValueError):
        TsdfVolume([0, 0, 0], 0.0, (4, 4, 4))
    with pytest.raises(ValueError):
        TsdfVolume([0, 0, 0], 0.1, (1, 4, 4))
    with pytest.raises(ValueError):
        TsdfVolume([0, 0, 0], 0.1, (4, 4, 4), truncation=0.05)
    vol = TsdfVolume([1, 2, 3], 0.5, (2, 3, 4))
    np.testing.assert_array_equal(vol.grid_points()[1, 2, 3], [1.5, 3.0, 4.5])
    assert vol.truncation == 2.0


def test_volume_for_scene_enlarges_voxels(rng):
    s = random_scene(rng, 10)
    vol = volume_for_scene(s, 1e-4)
    assert max(vol.dims) <= 256
    assert vol.voxel_size > 1e-4
    lo = s.centers.min(0)
    assert np.all(vol.origin < lo)
    with pytest.raises(ValueError):
        volume_for_scene(s.subset(np.zeros(0, int)), 0.1)


def test_depth_shape_mismatch():
    cam = orbit_cameras(1, width=32, height=32)[0]
    with pytest.raises(ValueError, match="does not match"):
        integrate_depth(sphere_volume(0.2), np.ones((16, 32)), cam)


def test_unobserved_volume_gives_empty_mesh():
    vol = sphere_volume(0.2)
    assert len(extract_mesh(vol)) == 0
    cam = orbit_cameras(1, width=32, height=32)[0]
    integrate_depth(vol, np.zeros((32, 32)), cam)  # all holes
    assert not vol.weight.any()
    assert len(extract_mesh(vol)) == 0


def test_analytic_sphere(fused_sphere):
    vol, _ = fused_sphere
    mesh = extract_mesh(vol)
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1.0)
    # distances are measured along camera z, not to the nearest surface point,
    # so oblique views pull the zero crossing by a fraction of a voxel
    assert err.mean() < 0.15 * vol.voxel_size
    assert err.max() < 1.0 * vol.voxel_size
    # normals point away from the center
    assert np.all(np.einsum("ij,ij->i", mesh.normals, mesh.vertices) > 0)
    assert np.all(np.einsum("ij,ij->i", mesh.face_normals(), mesh.vertices[mesh.triangles].mean(1)) > 0)


def test_sphere_mesh_is_watertight(fused_sphere):
    mesh = extract_mesh(fused_sphere[0])
    edges = Counter()
    for tri in mesh.triangles:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges[tuple(sorted((tri[a], tri[b])))] += 1
    assert set(edges.values()) == {2}
    # closed genus-0 surface
    assert len(mesh.vertices) - len(edges) + len(mesh) == 2


def test_integration_order_does_not_matter(fused_sphere):
    _, cams = fused_sphere
    fwd, rev = sphere_volume(0.1), sphere_volume(0.1)
    for cam in cams[:5]:
        integrate_depth(fwd, sphere_depth(cam), cam)
    for cam in cams[:5][::-1]:
        integrate_depth(rev, sphere_depth(cam), cam)
    np.testing.assert_array_equal(fwd.weight, rev.weight)
    np.testing.assert_allclose(fwd.tsdf, rev.tsdf, atol=1e-14)


def test_repeated_view_keeps_average():
    cam = orbit_cameras(1, width=48, height=48)[0]
    once = integrate_depth(sphere_volume(0.1), sphere_depth(cam), cam)
    twice = integrate_depth(once.copy(), sphere_depth(cam), cam)
    np.testing.assert_allclose(twice.tsdf, once.tsdf, atol=1e-15)
    np.testing.assert_array_equal(twice.weight, 2 * once.weight)


def test_plane_from_one_view():
    cam = plane_cameras(1, width=64, height=64)[0]
    vol = TsdfVolume([-0.4, -0.4, -0.2], 0.02, (41, 41, 21))
    integrate_depth(vol, plane_depth(cam), cam)
    mesh = extract_mesh(vol)
    assert len(mesh) > 0
    assert np.abs(mesh.vertices[:, 2]).max() < 1e-9 + 0.5 * vol.voxel_size
    # the surface faces the camera
    assert np.mean(mesh.normals[:, 2] > 0) > 0.99


def test_depth_cap_drops_far_samples():
    cam = orbit_cameras(1, width=32, height=32)[0]
    vol = integrate_depth(sphere_volume(0.2), sphere_depth(cam), cam, depth_cap=0.5)
    assert not vol.weight.any()


def test_triangle_mesh_checks():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert m.areas()[0] == 0.5
    np.testing.assert_array_equal(m.face_normals()[0], [0, 0, 1])
