"""Invariant checks run by ``splatdepth validate`` against a user scene."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, SplatSet, as_splat_set, project_scene
from .grad import grad_check
from .losses import LossWeights
from .oracle import affine_vs_perspective_gap, footprint_pixels, intersect_ray_space, planarity_residual

PLANARITY_TOL = 1e-9  # relative to t_c
DEPTH_PATH_TOL = 1e-12
AFFINE_GAP_TOL = 1e-2
GRAD_TOL = 1e-3
AFFINE_MAX_FOOTPRINT_PX = 10.0
AFFINE_MAX_OFF_AXIS_DEG = 30.0
GRAD_MAX_SPLATS = 8
GRAD_SIZE = 32

FAULTS = ("planarity",)


@dataclass
class Metric:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} (threshold {self.threshold:.0e}){extra}"


@dataclass
class ValidationReport:
    metrics: list[Metric] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.metrics)

    def failing(self) -> list[str]:
        return [m.name for m in self.metrics if not m.passed]


def _unit_disk(rng: np.random.Generator, n: int) -> np.ndarray:
    r = np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * np.pi, size=n)
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def _triples(scene: SplatSet, cameras: list[Camera], trials: int, rng: np.random.Generator):
    """Yield (camera, projection, pixels) groups for ``trials`` random (splat, camera, pixel) samples."""
    batches = [project_scene(scene, cam) for cam in cameras]
    pool = [(c, i) for c, b in enumerate(batches) for i in np.flatnonzero(b.valid)]
    if not pool:
        return
    picks = rng.integers(0, len(pool), size=trials)
    for k in np.unique(picks):
        c, i = pool[k]
        proj = batches[c].splat(i)
        yield cameras[c], proj, footprint_pixels(proj, _unit_disk(rng, int((picks == k).sum())))


def check_planarity(scene, cameras, trials, rng, fault: str | None = None) -> Metric:
    worst = 0.0
    for cam, proj, pix in _triples(as_splat_set(scene), cameras, trials, rng):
        if fault == "planarity":
            proj.q = proj.q * (1.0 + 1e-3)
        worst = max(worst, planarity_residual(proj, pix) / proj.t_c)
    return Metric("planarity", worst, PLANARITY_TOL, worst <= PLANARITY_TOL)


def check_depth_path(scene, cameras, trials, rng) -> Metric:
    """Rasterized depth against ``(z_c / t_c) * t*`` from the ray-space intersection."""
    worst = 0.0
    for cam, proj, pix in _triples(as_splat_set(scene), cameras, trials, rng):
        raster = proj.z_c + (proj.uv_center - pix) @ proj.p
        ray = np.array([proj.z_c / proj.t_c * intersect_ray_space(proj, px) for px in pix])
        worst = max(worst, float(np.max(np.abs(raster - ray) / np.abs(ray))))
    return Metric("rasterized_vs_ray_space", worst, DEPTH_PATH_TOL, worst <= DEPTH_PATH_TOL)


def check_affine_gap(scene, cameras, trials, rng) -> Metric:
    """Median relative gap to exact perspective depth over small, near-axis splats."""
    s = as_splat_set(scene)
    gaps = []
    for cam, proj, pix in _triples(s, cameras, trials, rng):
        radius = 3.0 * np.sqrt(np.linalg.eigvalsh(proj.cov2d).max())
        off_axis = np.degrees(np.arccos(proj.center_cam[2] / np.linalg.norm(proj.center_cam)))
        if radius > AFFINE_MAX_FOOTPRINT_PX or off_axis > AFFINE_MAX_OFF_AXIS_DEG:
            continue
        gaps.append(affine_vs_perspective_gap(s.gaussian(proj.splat_index), cam, pix))
    if not gaps:
        return Metric("affine_gap_median", 0.0, AFFINE_GAP_TOL, True, "no qualifying splats")
    g = np.concatenate(gaps)
    q = np.quantile(g, [0.5, 0.9, 0.99])
    med = float(q[0])
    return Metric("affine_gap_median", med, AFFINE_GAP_TOL, med <= AFFINE_GAP_TOL,
                  f"n={len(g)} p90={q[1]:.2e} p99={q[2]:.2e}")


def check_gradients(scene, cameras, rng) -> Metric:
    """Finite-difference check on up to 8 splats in a 32x32 version of the first view."""
    s = as_splat_set(scene)
    cam = cameras[0].scaled(GRAD_SIZE / max(cameras[0].width, cameras[0].height))
    batch = project_scene(s, cam)
    visible = np.flatnonzero(batch.valid & (np.abs(batch.uv - [cam.cx, cam.cy]).max(1) < max(cam.width, cam.height)))
    if len(visible) == 0:
        return Metric("gradient_check", 0.0, GRAD_TOL, True, "no visible splats")
    idx = rng.choice(visible, size=min(GRAD_MAX_SPLATS, len(visible)), replace=False)
    sub = s.subset(np.sort(idx))
    target = rng.uniform(0, 1, size=(cam.height, cam.width, 3))
    rep = grad_check(sub, cam, target, LossWeights())
    err = rep.max_error()
    per = " ".join(f"{c}={rep.max_error(c):.1e}" for c in rep.rel_error)
    return Metric("gradient_check", err, GRAD_TOL, err <= GRAD_TOL, f"{per} excluded={len(rep.excluded)}")


def validate_scene(scene, cameras: list[Camera], trials: int = 1000, seed: int = 0,
                   fault: str | None = None, gradients: bool = True) -> ValidationReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    rng = np.random.default_rng(seed)
    rep = ValidationReport()
    rep.metrics.append(check_planarity(scene, cameras, trials, rng, fault))
    rep.metrics.append(check_depth_path(scene, cameras, trials, rng))
    rep.metrics.append(check_affine_gap(scene, cameras, trials, rng))
    if gradients:
        rep.metrics.append(check_gradients(scene, cameras, rng))
    return rep
