"""Two-phase desk-scale optimization of a splat scene against target views."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import Camera, SplatSet, as_splat_set, scene_extent
from .errors import FitDivergedError
from .grad import LossSeeds, backward, torch_threads
from .losses import (
    LossWeights,
    depth_distortion_map,
    normal_consistency_map,
    normal_from_depth,
    photometric_value_and_grad,
)
from .rasterizer import RenderOptions, render

MAX_FIT_SPLATS = 256
TRACE_COLUMNS = ("iteration", "L_c", "L_d", "L_n", "total")


@dataclass
class TargetView:
    camera: Camera
    image: np.ndarray  # (H, W, 3) linear RGB
    depth: np.ndarray | None = None


@dataclass
class FitSchedule:
    iters_phase1: int = 2000
    iters_phase2: int = 2000
    lr_position: float = 1.6e-4  # multiplied by the scene extent
    lr_feature: float = 0.0025
    lr_opacity: float = 0.05
    lr_scaling: float = 0.005
    lr_rotation: float = 0.001
    adam_eps: float = 1e-12

    def __post_init__(self):
        if self.iters_phase1 < 0 or self.iters_phase2 < 0:
            raise ValueError("iteration counts must be non-negative")


@dataclass
class FitResult:
    scene: SplatSet
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(TRACE_COLUMNS)
            for row in self.trace:
                out.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _logit(p):
    return np.log(p) - np.log1p(-p)


class _Params:
    def __init__(self, scene: SplatSet):
        self.centers = torch.tensor(scene.centers.copy())
        self.rotations = torch.tensor(scene.rotations.copy())
        self.log_scales = torch.tensor(np.log(scene.scales))
        self.logit_opacities = torch.tensor(_logit(scene.opacities))
        self.dc = torch.tensor(scene.sh[:, 0].copy())
        self.rest = scene.sh[:, 1:].copy()

    def tensors(self):
        return [self.centers, self.rotations, self.log_scales, self.logit_opacities, self.dc]

    def scene(self) -> SplatSet:
        sh = np.concatenate([self.dc.numpy()[:, None], self.rest], 1)
        return SplatSet(
            self.centers.numpy().copy(),
            self.rotations.numpy().copy(),
            np.exp(self.log_scales.numpy()),
            1.0 / (1.0 + np.exp(-self.logit_opacities.numpy())),
            sh,
        )


def fit(initial, views: list[TargetView], weights: LossWeights | None = None,
        schedule: FitSchedule | None = None, opts: RenderOptions | None = None) -> FitResult:
    """Photometric phase, then the same loop with the geometry terms enabled.

    One view per iteration, cycled in order. Raw parameters are optimized:
    log scales, logit opacities, quaternions renormalized after every step.
    Torch runs single-threaded so results do not depend on the machine.
    """
    with torch_threads(1):
        return _fit(initial, views, weights, schedule, opts)


def _fit(initial, views, weights, schedule, opts) -> FitResult:
    weights = weights or LossWeights()
    schedule = schedule or FitSchedule()
    scene = as_splat_set(initial).copy()
    if not views:
        raise ValueError("fit needs at least one target view")
    if len(scene) > MAX_FIT_SPLATS:
        raise ValueError(f"fit is limited to {MAX_FIT_SPLATS} splats, got {len(scene)}")
    scene.validate()
    opts = RenderOptions(**{**vars(opts or RenderOptions()), "retain_records": True})

    params = _Params(scene)
    extent = scene_extent(scene)
    eps = schedule.adam_eps
    optim = torch.optim.Adam(
        [
            {"params": [params.centers], "lr": schedule.lr_position * extent},
            {"params": [params.rotations], "lr": schedule.lr_rotation},
            {"params": [params.log_scales], "lr": schedule.lr_scaling},
            {"params": [params.logit_opacities], "lr": schedule.lr_opacity},
            {"params": [params.dc], "lr": schedule.lr_feature},
        ],
        eps=eps,
    )
    photometric_only = LossWeights(0.0, 0.0, weights.lambda_ssim)
    result = FitResult(scene)
    n_total = schedule.iters_phase1 + schedule.iters_phase2

    for it in range(n_total):
        phase_w = photometric_only if it < schedule.iters_phase1 else weights
        view = views[it % len(views)]
        cur = params.scene()
        buf = render(cur, view.camera, opts)
        n_target = normal_from_depth(buf.expected_depth, view.camera)
        npix = buf.shape[0] * buf.shape[1]
        l_c, g_color = photometric_value_and_grad(buf.color, view.image, weights.lambda_ssim)
        l_d = float(depth_distortion_map(buf.records, buf.shape).sum()) / npix
        l_n = float(normal_consistency_map(buf.records, n_target).sum()) / npix
        total = l_c + phase_w.w_d * l_d + phase_w.w_n * l_n
        if not np.isfinite(total):
            raise FitDivergedError(it, f"non-finite loss {total} on view {it % len(views)}")
        result.trace.append((it, l_c, l_d, l_n, total))

        seeds = LossSeeds(color=g_color, depth_distortion=phase_w.w_d / npix,
                          normal_consistency=phase_w.w_n / npix, normal_target=n_target,
                          median_threshold=opts.median_threshold)
        g = backward(cur, view.camera, buf, seeds)
        if not g.is_finite():
            raise FitDivergedError(it, "non-finite gradient")
        params.centers.grad = torch.from_numpy(g.centers)
        params.rotations.grad = torch.from_numpy(g.rotations)
        params.log_scales.grad = torch.from_numpy(g.scales * cur.scales)
        params.logit_opacities.grad = torch.from_numpy(g.opacities * cur.opacities * (1.0 - cur.opacities))
        params.dc.grad = torch.from_numpy(g.colors_dc)
        optim.step()
        with torch.no_grad():
            params.rotations /= torch.linalg.vector_norm(params.rotations, dim=-1, keepdim=True)
        if not all(torch.isfinite(t).all() for t in params.tensors()):
            raise FitDivergedError(it, "non-finite parameters after optimizer step")

    result.scene = params.scene()
    return result


def depth_error(scene, camera: Camera, gt_depth: np.ndarray, opts: RenderOptions | None = None,
                min_opacity: float = 0.5) -> float:
    """Mean |median depth - ground truth| over pixels the scene covers and the truth defines."""
    buf = render(scene, camera, opts)
    mask = (gt_depth > 0) & (buf.median_depth > 0) & (buf.accum_opacity >= min_opacity)
    if not mask.any():
        return float("nan")
    return float(np.abs(buf.median_depth - gt_depth)[mask].mean())


def held_out_l1(scene, camera: Camera, image: np.ndarray, opts: RenderOptions | None = None) -> float:
    return float(np.abs(render(scene, camera, opts).color - image).mean())


def init_scene(kind: str, n: int, bounds, rng: np.random.Generator) -> SplatSet:
    """Starting scene inside an axis-aligned box ``bounds = (lo, hi)``.

    ``random``: uniform centers, random orientations, isotropic scales.
    ``plane``: a jittered grid on the box's mid-z plane with flat discs.
    Colors start at mid gray, opacities at 0.5.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    size = hi - lo
    side = float(np.sqrt(size[0] * size[1] / max(n, 1)))
    sh = np.zeros((n, 1, 3))
    if kind == "random":
        from .synthetic import random_quaternions

        centers = lo + rng.uniform(size=(n, 3)) * size
        rot = random_quaternions(rng, n)
        scales = np.full((n, 3), 0.5 * side)
    elif kind == "plane":
        g = int(np.ceil(np.sqrt(n)))
        ij = np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"), -1).reshape(-1, 2)[:n]
        xy = lo[:2] + (ij + 0.5) / g * size[:2] + rng.normal(scale=0.1 * side, size=(n, 2))
        centers = np.column_stack([xy, np.full(n, 0.5 * (lo[2] + hi[2]))])
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        scales = np.tile([0.5 * side, 0.5 * side, 0.05 * side], (n, 1))
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    return SplatSet(centers, rot, scales, np.full(n, 0.5), sh)
