"""Synthetic scenes and camera rigs with known geometry."""

from __future__ import annotations

import numpy as np

from .core import SH_C0, Camera, SplatSet


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def rgb_to_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def frame_quaternion(normal) -> np.ndarray:
    """Quaternion whose rotation maps local +z onto ``normal``."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    z = np.array([0.0, 0.0, 1.0])
    c = float(z @ n)
    if c < -1 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(z, n)
    q = np.array([1.0 + c, *axis])
    return q / np.linalg.norm(q)


def random_camera(rng: np.random.Generator, width: int = 64, height: int = 64, focal: float | None = None) -> Camera:
    """Camera at a random pose looking at the origin from 2-4 units away."""
    d = rng.normal(size=3)
    eye = d / np.linalg.norm(d) * rng.uniform(2.0, 4.0)
    up = rng.normal(size=3)
    while abs(up @ eye) > 0.95 * np.linalg.norm(up) * np.linalg.norm(eye):
        up = rng.normal(size=3)
    f = focal if focal is not None else 0.9 * max(width, height)
    return Camera.look_at(eye, np.zeros(3), up, f, width=width, height=height)


def random_scene(
    rng: np.random.Generator,
    n: int,
    radius: float = 0.6,
    scale_range: tuple[float, float] = (0.05, 0.25),
    opacity_range: tuple[float, float] = (0.3, 0.95),
    sh_degree: int = 0,
) -> SplatSet:
    """Well-conditioned anisotropic splats scattered in a ball around the origin."""
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0] = rgb_to_dc(rng.uniform(0.1, 0.9, size=(n, 3)))
    if k > 1:
        sh[:, 1:] = rng.normal(scale=0.1, size=(n, k - 1, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = dirs * radius * rng.uniform(0, 1, size=(n, 1)) ** (1 / 3)
    return SplatSet(
        centers=centers,
        rotations=random_quaternions(rng, n),
        scales=rng.uniform(*scale_range, size=(n, 3)),
        opacities=rng.uniform(*opacity_range, size=n),
        sh=sh,
    )


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def sphere_scene(
    n: int = 2000,
    radius: float = 1.0,
    tangent_scale: float | None = None,
    flatness: float = 1e-2,
    opacity: float = 0.95,
    rng: np.random.Generator | None = None,
) -> SplatSet:
    """Flat discs tangent to a sphere, evenly spread over its surface."""
    rng = rng or np.random.default_rng(0)
    pts = fibonacci_sphere(n)
    if tangent_scale is None:
        tangent_scale = 1.2 * radius * np.sqrt(4 * np.pi / n)
    quats = np.stack([frame_quaternion(p) for p in pts])
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = rgb_to_dc(rng.uniform(0.2, 0.8, size=(n, 3)))
    scales = np.tile([tangent_scale, tangent_scale, tangent_scale * flatness], (n, 1))
    return SplatSet(pts * radius, quats, scales, np.full(n, opacity), sh)


def orbit_cameras(
    n: int, distance: float = 3.0, width: int = 256, height: int = 256, focal: float | None = None,
    target=(0.0, 0.0, 0.0),
) -> list[Camera]:
    """Cameras spread over a sphere of radius ``distance`` looking at ``target``."""
    focal = focal if focal is not None else 1.1 * width
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for p in fibonacci_sphere(n):
        up = np.array([0.0, 0.0, 1.0]) if abs(p[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        cams.append(Camera.look_at(target + p * distance, target, up, focal, width=width, height=height))
    return cams


def plane_generator(grid: int = 4, size: float = 1.0, rng: np.random.Generator | None = None) -> SplatSet:
    """A textured square on the z = 0 plane: ``grid x grid`` flat colored discs."""
    rng = rng or np.random.default_rng(7)
    n = grid * grid
    step = size / grid
    ij = np.stack(np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij"), -1).reshape(-1, 2)
    centers = np.column_stack([(ij + 0.5) * step - size / 2, np.zeros(n)])
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = rgb_to_dc(rng.uniform(0.15, 0.85, size=(n, 3)))
    scales = np.tile([0.6 * step, 0.6 * step, 1e-3 * step], (n, 1))
    return SplatSet(centers, np.tile([1.0, 0, 0, 0], (n, 1)), scales, np.full(n, 0.9), sh)


def plane_cameras(n: int = 5, distance: float = 2.0, width: int = 128, height: int = 128, tilt_deg: float = 25.0) -> list[Camera]:
    """Cameras looking down at the z = 0 plane from above, on a tilted ring."""
    cams = []
    tilt = np.deg2rad(tilt_deg)
    for k in range(n):
        az = 2 * np.pi * k / n
        eye = distance * np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)])
        cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), 1.0 * width, width=width, height=height))
    return cams


def plane_depth(camera: Camera, plane_z: float = 0.0) -> np.ndarray:
    """Ground-truth depth map of the infinite plane ``z = plane_z`` (0 where not hit)."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones(u.shape)], -1)
    d_world = d_cam @ camera.rotation  # R^T applied row-wise
    o = camera.center
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (plane_z - o[2]) / d_world[..., 2]
    return np.where(s > 0, s, 0.0)
