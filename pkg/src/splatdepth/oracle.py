"""Brute-force validators for the closed-form intersection and blending code.

Everything here is deliberately slow and direct: dense sampling of the 1D
Gaussian along a ray, plain linear solves against the full covariance,
and a per-pixel blending loop with no tiling. None of it reuses the
rasterizer's depth-plane vectors except where an operation is defined on
a SplatProjection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .core import Camera, Gaussian3D, SplatProjection, as_splat_set, covariance_from, project_scene, project_splat
from .errors import DegenerateCovarianceError
from .rasterizer import ALPHA_MAX, FOOTPRINT_SIGMA2, WEIGHT_EPS, FrameBuffers, RenderOptions, splat_colors

N_SAMPLES = 100_000
WINDOW_KAPPA = 3.0


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.direction = d / np.linalg.norm(d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def _precision(cov: np.ndarray) -> np.ndarray:
    if np.linalg.cond(cov) > 1e15:
        raise DegenerateCovarianceError("covariance is numerically singular")
    return np.linalg.inv(cov)


# ---------------------------------------------------------------------------
# perspective (camera / world space) intersection
# ---------------------------------------------------------------------------

def intersect_perspective(g: Gaussian3D, ray: Ray) -> float:
    """Distance along ``ray`` maximizing the Gaussian's 1D restriction."""
    prec = _precision(covariance_from(g.rotation, g.scales))
    v = ray.direction
    return float(v @ prec @ (g.center - ray.origin) / (v @ prec @ v))


def _quad(d: np.ndarray, prec: np.ndarray) -> np.ndarray:
    return np.sum((d @ prec) * d, axis=-1)


def ray_exponent(g: Gaussian3D, ray: Ray, ts, prec: np.ndarray | None = None) -> np.ndarray:
    """Exponent ``(o + t v - x_c)^T Sigma^-1 (o + t v - x_c)`` for each t."""
    if prec is None:
        prec = _precision(covariance_from(g.rotation, g.scales))
    d = ray.at(np.asarray(ts, dtype=np.float64)) - g.center
    return _quad(d, prec)


def perspective_window(g: Gaussian3D, ray: Ray, kappa: float = WINDOW_KAPPA) -> tuple[float, float]:
    t_c = float(np.linalg.norm(g.center - ray.origin))
    half = 6.0 * float(g.scales.max()) * kappa
    return max(0.0, t_c - half), t_c + half


def _dense_argmin(f, lo: float, hi: float, n: int) -> tuple[float, np.ndarray, np.ndarray]:
    ts = np.linspace(lo, hi, n)
    vals = f(ts)
    k = int(np.argmin(vals))
    if 0 < k < n - 1:
        res = minimize_scalar(
            lambda t: float(f(np.array([t]))[0]),
            bracket=(ts[k - 1], ts[k], ts[k + 1]),
            method="brent",
            options={"xtol": 1e-12},
        )
        t_best = float(res.x) if res.fun <= vals[k] else float(ts[k])
    else:
        t_best = float(ts[k])
    return t_best, ts, vals


def sample_maximizer(g: Gaussian3D, ray: Ray, n: int = N_SAMPLES):
    """Grid argmax of G^1(t) refined by Brent's method.

    Returns ``(t_best, samples, exponents)``; G^1 = exp(-exponent).
    """
    lo, hi = perspective_window(g, ray)
    prec = _precision(covariance_from(g.rotation, g.scales))
    return _dense_argmin(lambda ts: ray_exponent(g, ray, ts, prec), lo, hi, n)


# ---------------------------------------------------------------------------
# ray-space intersection
# ---------------------------------------------------------------------------

def intersect_ray_space(proj: SplatProjection, pixel) -> float:
    """Closed-form ``t* = q_hat . (u_c - u_o)`` with ``u_o = (u, v, 0)``."""
    u_o = np.array([pixel[0], pixel[1], 0.0])
    return float(proj.q_hat @ (proj.u_center - u_o))


def ray_space_exponent(proj: SplatProjection, pixel, ts, prec: np.ndarray | None = None) -> np.ndarray:
    if prec is None:
        prec = _precision(proj.ray_cov)
    ts = np.asarray(ts, dtype=np.float64)
    d = np.stack(np.broadcast_arrays(pixel[0] - proj.uv_center[0], pixel[1] - proj.uv_center[1], ts - proj.t_c), -1)
    return _quad(d, prec)


def ray_space_maximizer(proj: SplatProjection, pixel, n: int = N_SAMPLES):
    half = 6.0 * WINDOW_KAPPA * np.sqrt(proj.ray_cov[2, 2])
    lo, hi = max(0.0, proj.t_c - half), proj.t_c + half
    prec = _precision(proj.ray_cov)
    return _dense_argmin(lambda ts: ray_space_exponent(proj, pixel, ts, prec), lo, hi, n)


def ray_space_solve(proj: SplatProjection, pixels) -> np.ndarray:
    """t* for each pixel from a linear solve against the full ray-space covariance."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    a = np.linalg.solve(proj.ray_cov, np.array([0.0, 0.0, 1.0]))
    offs = np.column_stack([proj.uv_center - pixels, np.full(len(pixels), proj.t_c)])
    return offs @ a / a[2]


def planarity_residual(proj: SplatProjection, pixels, t_star=None) -> float:
    """Max ``|(q, 1) . (u - u_c)|`` over intersection points ``u = (u, v, t*)``.

    ``t_star`` defaults to the independent linear-solve intersection.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if t_star is None:
        t_star = ray_space_solve(proj, pixels)
    t_star = np.asarray(t_star, dtype=np.float64).reshape(len(pixels))
    diff = pixels - proj.uv_center
    res = diff @ proj.q + (t_star - proj.t_c)
    return float(np.abs(res).max())


# ---------------------------------------------------------------------------
# affine approximation gap
# ---------------------------------------------------------------------------

def perspective_depths(g: Gaussian3D, camera: Camera, pixels) -> np.ndarray:
    """Exact per-pixel depth ``cos(theta) * t*`` of the perspective intersection."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    dirs = camera.ray_directions(pixels[:, 0], pixels[:, 1])
    w = camera.rotation
    prec = _precision(w @ covariance_from(g.rotation, g.scales) @ w.T)
    xc = camera.to_camera(g.center)
    t = (dirs @ prec @ xc) / np.einsum("ni,ij,nj->n", dirs, prec, dirs)
    return dirs[:, 2] * t


def affine_vs_perspective_gap(g: Gaussian3D, camera: Camera, pixels) -> np.ndarray:
    """Per-pixel ``|d_raster - d_persp| / d_persp``."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    proj = project_splat(camera, g)
    d_raster = proj.z_c + (proj.uv_center - pixels) @ proj.p
    d_persp = perspective_depths(g, camera, pixels)
    return np.abs(d_raster - d_persp) / d_persp


def footprint_pixels(proj: SplatProjection, offsets) -> np.ndarray:
    """Map unit-disk offsets to image points inside the undilated 3-sigma ellipse."""
    chol = np.linalg.cholesky(proj.cov2d)
    return proj.uv_center + 3.0 * np.asarray(offsets) @ chol.T


# ---------------------------------------------------------------------------
# brute-force renderer
# ---------------------------------------------------------------------------

def render_bruteforce(scene, camera: Camera, opts: RenderOptions | None = None) -> FrameBuffers:
    """Per-pixel front-to-back blending over every splat; no tiling.

    Depth comes from the ray-space intersection rather than the
    depth-plane vector, so it checks the rasterizer's depth path too.
    """
    opts = opts or RenderOptions()
    s = as_splat_set(scene)
    h, w = camera.height, camera.width
    batch = project_scene(s, camera)
    colors = splat_colors(s, camera)
    projs = [batch.splat(i) for i in range(len(s)) if batch.valid[i]]
    projs = sorted(projs, key=lambda pr: (pr.z_c, pr.splat_index))

    out = FrameBuffers(
        color=np.zeros((h, w, 3)),
        median_depth=np.zeros((h, w)),
        expected_depth=np.zeros((h, w)),
        normal=np.zeros((h, w, 3)),
        accum_opacity=np.zeros((h, w)),
        transmittance=np.ones((h, w)),
    )
    for row in range(h):
        for col in range(w):
            pix = (float(col), float(row))
            trans, wsum, dsum = 1.0, 0.0, 0.0
            color, nsum = np.zeros(3), np.zeros(3)
            median, found = 0.0, False
            for pr in projs:
                d = pr.uv_center - pix
                power = d[0] * (pr.conic[0, 0] * d[0] + pr.conic[0, 1] * d[1]) + d[1] * (
                    pr.conic[1, 0] * d[0] + pr.conic[1, 1] * d[1]
                )
                if power > FOOTPRINT_SIGMA2:
                    continue
                alpha = min(s.opacities[pr.splat_index] * np.exp(-power), ALPHA_MAX)
                if alpha < opts.alpha_cutoff:
                    continue
                if opts.transmittance_stop > 0 and trans * (1 - alpha) < opts.transmittance_stop:
                    break
                weight = alpha * trans
                depth = pr.z_c / pr.t_c * intersect_ray_space(pr, pix)
                color += weight * colors[pr.splat_index]
                nsum += weight * pr.normal
                dsum += weight * depth
                wsum += weight
                if not found and wsum >= opts.median_threshold:
                    median, found = depth, True
                trans *= 1 - alpha
            out.color[row, col] = color
            out.accum_opacity[row, col] = wsum
            out.transmittance[row, col] = trans
            out.median_depth[row, col] = median
            if wsum >= WEIGHT_EPS:
                out.expected_depth[row, col] = dsum / wsum
                out.normal[row, col] = nsum / np.linalg.norm(nsum)
    return out

