"""Gaussian primitives, pinhole cameras and per-view splat projection.

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)``;
* cameras map world to camera space with ``x_cam = R @ x_world + t``,
  +z forward, +y down, +x right;
* pixel ``(col, row)`` has its center at image coordinates ``(u, v) = (col, row)``;
* ray space is ``(u, v, t)`` with ``t`` the Euclidean distance to the camera center.

The batched projection is written in torch so the same code serves the
forward renderer (under ``no_grad``) and the autodiff backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import (
    BehindCameraError,
    DegenerateCovarianceError,
    DegenerateProjectionError,
    InvalidPrimitiveError,
)

NEAR_PLANE = 0.01
# px^2 added to the screen covariance used for alpha only
SCREEN_DILATION = 0.3
MAX_CONDITION = 1e12
MIN_SCALE = 1e-9

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_SIZES = {1: 0, 4: 1, 9: 2, 16: 3}


# ---------------------------------------------------------------------------
# array-module agnostic helpers (numpy and torch share these)
# ---------------------------------------------------------------------------

def _stack_fn(a) -> Callable:
    return torch.stack if isinstance(a, torch.Tensor) else np.stack


def quat_to_rotmat(q):
    """Rotation matrix for (..., 4) quaternions ``(w, x, y, z)``; normalizes first."""
    stack = _stack_fn(q)
    if isinstance(q, torch.Tensor):
        q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    else:
        q = np.asarray(q, dtype=np.float64)
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return stack(rows, -2)


def _covariance(q, s):
    m = quat_to_rotmat(q) * s[..., None, :]
    return m @ m.swapaxes(-1, -2)


def sh_basis(dirs, degree: int):
    """Real SH basis (3DGS sign convention) up to ``degree`` for (..., 3) unit dirs."""
    stack = _stack_fn(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [x * 0 + SH_C0]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return stack(out, -1)


def sh_degree(n_coeffs: int) -> int:
    try:
        return SH_SIZES[n_coeffs]
    except KeyError:
        raise InvalidPrimitiveError(
            f"unsupported SH block with {n_coeffs} coefficients per channel"
        ) from None


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class Gaussian3D:
    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacity: float
    sh: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(3)
        self.opacity = float(self.opacity)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)
        sh_degree(self.sh.shape[0])
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise InvalidPrimitiveError("rotation quaternion is not unit length")
        if not np.all(self.scales > 0):
            raise InvalidPrimitiveError(f"non-positive scale {self.scales}")
        if not 0.0 < self.opacity < 1.0:
            raise InvalidPrimitiveError(f"opacity {self.opacity} outside (0, 1)")
        for name in ("center", "rotation", "scales", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidPrimitiveError(f"non-finite {name}")

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.rotation, self.scales)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid image size {self.width}x{self.height}")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def ray_directions(self, u, v) -> np.ndarray:
        """Unit camera-space directions through image points ``(u, v)``."""
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def scaled(self, factor: float) -> "Camera":
        """Same pose with the image resampled by ``factor``."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return replace(
            self,
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=w,
            height=h,
        )

    @classmethod
    def look_at(cls, eye, target, up, fx, fy=None, width=64, height=64, cx=None, cy=None):
        eye = np.asarray(eye, float)
        f = np.asarray(target, float) - eye
        f /= np.linalg.norm(f)
        up = np.asarray(up, float)
        down = -(up - (up @ f) * f)
        if np.linalg.norm(down) < 1e-9:
            raise ValueError("up vector parallel to viewing direction")
        down /= np.linalg.norm(down)
        right = np.cross(down, f)
        rot = np.stack([right, down, f])
        return cls(
            fx=fx,
            fy=fx if fy is None else fy,
            cx=(width - 1) / 2 if cx is None else cx,
            cy=(height - 1) / 2 if cy is None else cy,
            width=width,
            height=height,
            rotation=rot,
            translation=-rot @ eye,
        )


@dataclass
class SplatSet:
    """Structure-of-arrays scene; the working form for rendering and fitting."""

    centers: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.rotations = np.asarray(self.rotations, np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, np.float64).reshape(n)
        sh = np.asarray(self.sh, np.float64)
        self.sh = sh.reshape(n, -1, 3) if n else sh.reshape((0,) + sh.shape[-2:])

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "SplatSet":
        if len(gaussians) == 0:
            return cls.empty()
        k = max(g.sh.shape[0] for g in gaussians)
        sh = np.zeros((len(gaussians), k, 3))
        for i, g in enumerate(gaussians):
            sh[i, : g.sh.shape[0]] = g.sh
        return cls(
            np.stack([g.center for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.scales for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            sh,
        )

    @classmethod
    def empty(cls, n_sh: int = 1) -> "SplatSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, n_sh, 3)))

    def to_gaussians(self) -> list[Gaussian3D]:
        return [self.gaussian(i) for i in range(len(self))]

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.centers[i], self.rotations[i], self.scales[i], self.opacities[i], self.sh[i])

    def subset(self, idx) -> "SplatSet":
        return SplatSet(*(getattr(self, f.name)[idx] for f in fields(self)))

    def copy(self) -> "SplatSet":
        return SplatSet(*(getattr(self, f.name).copy() for f in fields(self)))

    def validate(self) -> None:
        """Check every primitive's invariants; raises on the first violation."""
        for i in range(len(self)):
            try:
                self.gaussian(i)
            except InvalidPrimitiveError as exc:
                raise InvalidPrimitiveError(f"splat {i}: {exc}") from None


def as_splat_set(scene) -> SplatSet:
    if isinstance(scene, SplatSet):
        return scene
    return SplatSet.from_gaussians(list(scene))


def scene_extent(scene) -> float:
    """Radius of the splat-center cloud around its mean (at least 1e-3)."""
    if len(scene) == 0:
        return 1.0
    c = scene.centers
    return max(float(np.linalg.norm(c - c.mean(0), axis=1).max()), 1e-3)


# ---------------------------------------------------------------------------
# scalar operations
# ---------------------------------------------------------------------------

def covariance_from(rotation, scales) -> np.ndarray:
    """``R S S^T R^T`` for a unit quaternion and per-axis standard deviations."""
    scales = np.asarray(scales, dtype=np.float64)
    if not np.all(scales > 0):
        raise InvalidPrimitiveError(f"non-positive scale {scales}")
    return _covariance(np.asarray(rotation, dtype=np.float64), scales)


def eval_gaussian(g: Gaussian3D, x) -> float:
    """Unnormalized Gaussian ``exp(-(x - c)^T Sigma^-1 (x - c))`` (no 1/2 factor)."""
    if g.scales.min() < MIN_SCALE:
        raise DegenerateCovarianceError(f"scale {g.scales.min():g} below {MIN_SCALE:g}")
    local = quat_to_rotmat(g.rotation).T @ (np.asarray(x, float) - g.center)
    return float(np.exp(-np.sum((local / g.scales) ** 2)))


def eval_sh(color, view_dir) -> np.ndarray:
    """RGB from an SH coefficient block ``(K, 3)``, offset by 0.5 and clamped at zero."""
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), sh_degree(color.shape[0]))
    return np.maximum(basis @ color + 0.5, 0.0)


def perspective_jacobian(camera: Camera, x_cam, near: float = NEAR_PLANE) -> np.ndarray:
    """Jacobian of camera space -> ray space ``(u, v, t)`` at ``x_cam``."""
    x, y, z = np.asarray(x_cam, dtype=np.float64)
    if z <= near:
        raise BehindCameraError(f"point depth {z:g} at or behind near plane {near:g}")
    return _jacobian(x, y, z, np.sqrt(x * x + y * y + z * z), camera.fx, camera.fy)


def _jacobian(x, y, z, t, fx, fy):
    stack = _stack_fn(x)
    zero = x * 0
    return stack(
        [
            stack([fx / z, zero, -fx * x / (z * z)], -1),
            stack([zero, fy / z, -fy * y / (z * z)], -1),
            stack([x / t, y / t, z / t], -1),
        ],
        -2,
    )


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectionBatch:
    """Per-view projection of N splats (torch tensors or numpy arrays)."""

    x_cam: object  # (N, 3)
    uv: object  # (N, 2) projected centers
    z: object  # (N,) center depth
    t: object  # (N,) center distance
    jacobian: object  # (N, 3, 3)
    ray_cov: object  # (N, 3, 3) covariance in ray space, undilated
    cov2d: object  # (N, 2, 2) undilated screen covariance
    conic: object  # (N, 2, 2) inverse of the dilated screen covariance
    q: object  # (N, 2) ray-space plane vector
    p: object  # (N, 2) depth-plane vector
    normal: object  # (N, 3) camera-space unit normal
    extent: object  # (N, 2) half widths of the 3-sigma footprint box
    valid: object  # (N,) bool
    flipped: object  # (N,) bool, normal sign was flipped toward the camera

    def numpy(self) -> "ProjectionBatch":
        return ProjectionBatch(
            *(
                getattr(self, f.name).detach().cpu().numpy()
                if isinstance(getattr(self, f.name), torch.Tensor)
                else getattr(self, f.name)
                for f in fields(self)
            )
        )

    def __len__(self):
        return len(self.z)

    def splat(self, i: int) -> "SplatProjection":
        b = self if isinstance(self.z, np.ndarray) else self.numpy()
        return SplatProjection(
            splat_index=int(i),
            uv_center=b.uv[i].copy(),
            z_c=float(b.z[i]),
            t_c=float(b.t[i]),
            conic=b.conic[i].copy(),
            p=b.p[i].copy(),
            q=b.q[i].copy(),
            normal=b.normal[i].copy(),
            affine_jacobian=b.jacobian[i].copy(),
            ray_cov=b.ray_cov[i].copy(),
            cov2d=b.cov2d[i].copy(),
            center_cam=b.x_cam[i].copy(),
            extent=b.extent[i].copy(),
        )


@dataclass
class SplatProjection:
    splat_index: int
    uv_center: np.ndarray
    z_c: float
    t_c: float
    conic: np.ndarray
    p: np.ndarray
    q: np.ndarray
    normal: np.ndarray
    affine_jacobian: np.ndarray
    ray_cov: np.ndarray
    cov2d: np.ndarray
    center_cam: np.ndarray
    extent: np.ndarray

    @property
    def q_hat(self) -> np.ndarray:
        return np.array([self.q[0], self.q[1], 1.0])

    @property
    def u_center(self) -> np.ndarray:
        """Ray-space center ``(u_c, v_c, t_c)``."""
        return np.array([self.uv_center[0], self.uv_center[1], self.t_c])


def project_tensors(
    centers: torch.Tensor,
    quats: torch.Tensor,
    scales: torch.Tensor,
    camera: Camera,
    near: float = NEAR_PLANE,
    dilation: float = SCREEN_DILATION,
) -> ProjectionBatch:
    """Differentiable batched projection of splats into one view.

    Culled splats (behind the near plane or with a degenerate footprint)
    get ``valid = False``; their other fields are finite but meaningless.
    """
    dt = centers.dtype
    rot = torch.as_tensor(camera.rotation, dtype=dt)
    x_cam = centers @ rot.T + torch.as_tensor(camera.translation, dtype=dt)
    x, y, z = x_cam.unbind(-1)
    in_front = z > near
    z = torch.where(in_front, z, torch.ones_like(z))
    x_cam = torch.stack([x, y, z], -1)
    t = torch.linalg.vector_norm(x_cam, dim=-1)
    uv = torch.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], -1)

    jac = _jacobian(x, y, z, t, camera.fx, camera.fy)
    tm = jac @ rot
    ray_cov = tm @ _covariance(quats, scales) @ tm.swapaxes(-1, -2)

    a, b, c = ray_cov[:, 0, 0], ray_cov[:, 0, 1], ray_cov[:, 1, 1]
    det = a * c - b * b
    half = 0.5 * (a + c)
    disc = torch.sqrt(((a - c) * 0.5) ** 2 + b * b)
    lam_min, lam_max = half - disc, half + disc
    ok = in_front & (lam_min > 0) & (lam_max <= MAX_CONDITION * lam_min) & torch.isfinite(det)
    det = torch.where(ok, det, torch.ones_like(det))

    # plane vector from the Schur complement of Sigma': q = -A^-1 b
    b0, b1 = ray_cov[:, 0, 2], ray_cov[:, 1, 2]
    q = -torch.stack([c * b0 - b * b1, a * b1 - b * b0], -1) / det[:, None]
    p = (z / t)[:, None] * q

    ad, cd = a + dilation, c + dilation
    det_d = ad * cd - b * b
    conic = torch.stack([torch.stack([cd, -b], -1), torch.stack([-b, ad], -1)], -2) / det_d[:, None, None]
    extent = 3.0 * torch.sqrt(torch.stack([ad, cd], -1))

    n_ray = -torch.cat([q, torch.ones_like(q[:, :1])], -1)
    n = (jac.swapaxes(-1, -2) @ n_ray[..., None])[..., 0]
    n = n / torch.linalg.vector_norm(n, dim=-1, keepdim=True)
    facing = (n * x_cam).sum(-1) > 0
    n = torch.where(facing[:, None], -n, n)

    return ProjectionBatch(
        x_cam=x_cam,
        uv=uv,
        z=z,
        t=t,
        jacobian=jac,
        ray_cov=ray_cov,
        cov2d=ray_cov[:, :2, :2],
        conic=conic,
        q=q,
        p=p,
        normal=n,
        extent=extent,
        valid=ok,
        flipped=facing,
    )


def project_scene(scene, camera: Camera) -> ProjectionBatch:
    """Numpy-valued projection of a whole scene (float64, no autograd)."""
    s = as_splat_set(scene)
    with torch.no_grad():
        batch = project_tensors(
            torch.from_numpy(s.centers),
            torch.from_numpy(s.rotations),
            torch.from_numpy(s.scales),
            camera,
        )
    return batch.numpy()


def project_splat(camera: Camera, g: Gaussian3D, index: int = 0) -> SplatProjection:
    """Project one Gaussian; raises instead of silently culling."""
    z = camera.to_camera(g.center)[2]
    if z <= NEAR_PLANE:
        raise BehindCameraError(f"splat center depth {z:g} at or behind near plane")
    batch = project_scene([g], camera)
    if not batch.valid[0]:
        raise DegenerateProjectionError("screen covariance is singular or ill-conditioned")
    proj = batch.splat(0)
    proj.splat_index = index
    return proj
