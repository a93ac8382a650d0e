"""TSDF fusion of rendered depth maps and marching-cubes surface extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .core import Camera, as_splat_set, scene_extent
from .rasterizer import RenderOptions, render

TRUNCATION_VOXELS = 4.0
MAX_DIM = 256
DEPTH_CAP_EXTENTS = 10.0
SLAB = 16  # x-slices per integration chunk


@dataclass
class TsdfVolume:
    """Dense grid of truncated signed distances; voxel ``(i, j, k)`` sits at ``origin + (i, j, k) * voxel_size``."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)
    truncation: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(self.voxel_size)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or min(self.dims) < 2:
            raise ValueError("voxel size must be positive and every dimension >= 2")
        if self.truncation is None:
            self.truncation = TRUNCATION_VOXELS * self.voxel_size
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    def grid_points(self, xs: slice = slice(None)) -> np.ndarray:
        """World coordinates of voxel centers, shape ``dims[xs] + (3,)``."""
        idx = [np.arange(d, dtype=np.float64) for d in self.dims]
        idx[0] = idx[0][xs]
        g = np.stack(np.meshgrid(*idx, indexing="ij"), -1)
        return self.origin + g * self.voxel_size

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.tsdf.copy(), self.weight.copy(),
                          self.truncation)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int
    normals: np.ndarray | None = None  # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    def __len__(self):
        return len(self.triangles)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def volume_for_scene(scene, voxel_size: float, max_dim: int = MAX_DIM) -> TsdfVolume:
    """Box around the splat centers padded by 3x the largest scale.

    When the box needs more than ``max_dim`` voxels along an axis the voxel
    size is enlarged to fit.
    """
    s = as_splat_set(scene)
    if len(s) == 0:
        raise ValueError("cannot size a volume for an empty scene")
    pad = 3.0 * float(s.scales.max())
    lo = s.centers.min(0) - pad
    hi = s.centers.max(0) + pad
    voxel_size = max(float(voxel_size), float((hi - lo).max()) / (max_dim - 1))
    dims = np.minimum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, max_dim)
    return TsdfVolume(lo, voxel_size, tuple(np.maximum(dims, 2)))


def integrate_depth(volume: TsdfVolume, depth: np.ndarray, camera: Camera, depth_cap: float | None = None) -> TsdfVolume:
    """Fold one depth map (0 = hole) into the running TSDF average, in place.

    Each voxel reads the depth at the nearest pixel to its projection.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise ValueError(f"depth map {depth.shape} does not match camera {camera.height}x{camera.width}")
    trunc = volume.truncation
    for x0 in range(0, volume.dims[0], SLAB):
        xs = slice(x0, min(x0 + SLAB, volume.dims[0]))
        pts = camera.to_camera(volume.grid_points(xs).reshape(-1, 3))
        z = pts[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        col = np.rint(camera.fx * pts[:, 0] / zs + camera.cx)
        row = np.rint(camera.fy * pts[:, 1] / zs + camera.cy)
        inside = front & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
        d = np.zeros_like(z)
        d[inside] = depth[row[inside].astype(np.int64), col[inside].astype(np.int64)]
        ok = inside & (d > 0)
        if depth_cap is not None:
            ok &= d <= depth_cap
        sdf = d - z
        ok &= sdf > -trunc
        if not ok.any():
            continue
        val = np.clip(sdf / trunc, -1.0, 1.0)
        t = volume.tsdf[xs].reshape(-1)
        w = volume.weight[xs].reshape(-1)
        t[ok] = (t[ok] * w[ok] + val[ok]) / (w[ok] + 1.0)
        w[ok] += 1.0
        volume.tsdf[xs] = t.reshape(volume.tsdf[xs].shape)
        volume.weight[xs] = w.reshape(volume.weight[xs].shape)
    return volume


def fuse_views(scene, cameras: list[Camera], voxel_size: float, opts: RenderOptions | None = None,
               volume: TsdfVolume | None = None) -> TsdfVolume:
    """Render the median depth for every camera and integrate it."""
    s = as_splat_set(scene)
    volume = volume or volume_for_scene(s, voxel_size)
    cap = DEPTH_CAP_EXTENTS * scene_extent(s)
    for cam in cameras:
        integrate_depth(volume, render(s, cam, opts).median_depth, cam, cap)
    return volume


def extract_mesh(volume: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Marching cubes on the TSDF; triangles from cells with an unobserved corner are dropped."""
    observed = volume.weight > 0
    vals = volume.tsdf
    if not observed.any():
        return TriangleMesh.empty()
    obs_vals = vals[observed]
    if not (obs_vals.min() < iso < obs_vals.max()):
        return TriangleMesh.empty()
    verts, faces, normals, _ = measure.marching_cubes(vals, level=iso, allow_degenerate=False, method="lorensen")
    if len(faces) == 0:
        return TriangleMesh.empty()

    # a cell is usable when all eight corners carry weight
    cell_ok = observed[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cell_ok &= observed[dx : dx + observed.shape[0] - 1, dy : dy + observed.shape[1] - 1,
                                    dz : dz + observed.shape[2] - 1]
    centroid = verts[faces].mean(1)
    hi = np.array(cell_ok.shape) - 1
    keep = np.ones(len(faces), bool)
    # centroids on a shared cell face are checked against the cells on both sides
    for nudge in (-1e-9, 1e-9):
        cell = np.clip(np.floor(centroid + nudge).astype(np.int64), 0, hi)
        keep &= cell_ok[cell[:, 0], cell[:, 1], cell[:, 2]]
    faces = faces[keep]

    world = volume.origin + verts * volume.voxel_size
    v = world[faces]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    faces = faces[area > 1e-12]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, np.int64)
    remap[used] = np.arange(len(used))
    # skimage normals point toward decreasing values; flip to face out of the surface
    return TriangleMesh(world[used], remap[faces], -normals[used])
