"""Photometric, depth-distortion and normal-consistency losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import Camera
from .errors import StateError
from .rasterizer import BlendRecords, FrameBuffers, PixelBlendRecord

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class LossWeights:
    w_d: float = 100.0
    w_n: float = 5.0
    lambda_ssim: float = 0.2

    def __post_init__(self):
        if min(self.w_d, self.w_n, self.lambda_ssim) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossTerms:
    photometric: float
    depth_distortion: float
    normal_consistency: float
    total: float


def _unpack(records):
    if isinstance(records, (list, tuple)) and (not records or isinstance(records[0], PixelBlendRecord)):
        w = np.array([r.weight for r in records], dtype=np.float64)
        d = np.array([r.depth for r in records], dtype=np.float64)
        n = np.array([r.normal for r in records], dtype=np.float64).reshape(-1, 3)
        return w, d, n
    raise TypeError("expected a list of PixelBlendRecord")


def depth_distortion(records=None, *, weights=None, depths=None) -> float:
    """``sum_ij w_i w_j (d_i - d_j)^2`` for one pixel, in one pass.

    Uses ``2 (A D2 - D^2)`` on depths shifted by the first record's depth,
    which leaves the value unchanged and keeps equal depths exactly at 0.
    """
    if records is not None:
        weights, depths, _ = _unpack(records)
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        return 0.0
    d = np.asarray(depths, dtype=np.float64) - depths[0]
    a, s1, s2 = w.sum(), (w * d).sum(), (w * d * d).sum()
    return max(2.0 * (a * s2 - s1 * s1), 0.0)


def normal_consistency(records=None, target=None, *, weights=None, normals=None) -> float:
    """``sum_i w_i (1 - n_i . target)`` for one pixel."""
    if records is not None:
        weights, _, normals = _unpack(records)
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        return 0.0
    return float(w @ (1.0 - np.asarray(normals, dtype=np.float64).reshape(-1, 3) @ np.asarray(target, dtype=np.float64)))


def _segments(records: BlendRecords):
    starts = np.flatnonzero(np.r_[True, records.pixel[1:] != records.pixel[:-1]]) if len(records) else np.zeros(0, int)
    group = np.cumsum(np.r_[False, records.pixel[1:] != records.pixel[:-1]]) if len(records) else np.zeros(0, int)
    return starts, group


def depth_distortion_map(records: BlendRecords, shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel depth distortion from a record stream."""
    out = np.zeros(shape[0] * shape[1])
    if len(records) == 0:
        return out.reshape(shape)
    starts, group = _segments(records)
    d = records.depth - records.depth[starts][group]
    w = records.weight
    n = shape[0] * shape[1]
    a = np.bincount(records.pixel, w, n)
    s1 = np.bincount(records.pixel, w * d, n)
    s2 = np.bincount(records.pixel, w * d * d, n)
    return np.maximum(2.0 * (a * s2 - s1 * s1), 0.0).reshape(shape)


def normal_consistency_map(records: BlendRecords, target: np.ndarray) -> np.ndarray:
    """Per-pixel normal consistency against a (H, W, 3) target; zero-target pixels skipped."""
    shape = target.shape[:2]
    flat = target.reshape(-1, 3)
    if len(records) == 0:
        return np.zeros(shape)
    tn = flat[records.pixel]
    has = np.any(tn != 0, axis=1)
    terms = records.weight * (1.0 - np.einsum("ij,ij->i", records.normal, tn))
    return np.bincount(records.pixel[has], terms[has], flat.shape[0]).reshape(shape)


def backproject(depth: np.ndarray, camera: Camera) -> np.ndarray:
    v, u = np.mgrid[0 : depth.shape[0], 0 : depth.shape[1]]
    return np.stack([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth], -1)


def normal_from_depth(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Camera-space normals from forward differences of a depth map (0 = hole)."""
    depth = np.asarray(depth, dtype=np.float64)
    pts = backproject(depth, camera)
    out = np.zeros(depth.shape + (3,))
    if depth.shape[0] < 2 or depth.shape[1] < 2:
        return out
    p = pts[:-1, :-1]
    n = np.cross(pts[:-1, 1:] - p, pts[1:, :-1] - p)
    valid = (depth[:-1, :-1] > 0) & (depth[:-1, 1:] > 0) & (depth[1:, :-1] > 0)
    norm = np.linalg.norm(n, axis=-1)
    valid &= norm > 0
    n = n / np.where(valid, norm, 1.0)[..., None]
    n = np.where((np.einsum("...i,...i", n, p) > 0)[..., None], -n, n)
    out[:-1, :-1] = np.where(valid[..., None], n, 0.0)
    return out


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------

def _gauss_kernel(dtype) -> torch.Tensor:
    x = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    k = torch.exp(-(x * x) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of (H, W, C) images in [0, 1] over the fully-windowed interior."""
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = _gauss_kernel(a.dtype)
    c = a.shape[2]
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    # all five moment maps go through one grouped separable blur
    stack = torch.cat([x, y, x * x, y * y, x * y])[None]
    kx = k.view(1, 1, 1, -1).repeat(5 * c, 1, 1, 1)
    ky = k.view(1, 1, -1, 1).repeat(5 * c, 1, 1, 1)
    blurred = F.conv2d(F.conv2d(stack, kx, groups=5 * c), ky, groups=5 * c)[0]
    mx, my, exx, eyy, exy = blurred.split(c)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return s.mean()


def photometric_torch(rendered: torch.Tensor, target: torch.Tensor, lambda_ssim: float = 0.2) -> torch.Tensor:
    loss = (1.0 - lambda_ssim) * (rendered - target).abs().mean()
    if lambda_ssim > 0:
        loss = loss + lambda_ssim * (1.0 - ssim_torch(rendered, target))
    return loss


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_torch(torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)))


def photometric_loss(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2) -> float:
    """``(1 - l) * L1 + l * (1 - SSIM)`` with an 11x11 Gaussian SSIM window."""
    if np.shape(rendered) != np.shape(target):
        raise ValueError(f"shape mismatch {np.shape(rendered)} vs {np.shape(target)}")
    r = torch.as_tensor(np.asarray(rendered, dtype=np.float64))
    t = torch.as_tensor(np.asarray(target, dtype=np.float64))
    return float(photometric_torch(r, t, lambda_ssim))


def photometric_value_and_grad(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2):
    """Photometric loss and its gradient with respect to the rendered image."""
    if np.shape(rendered) != np.shape(target):
        raise ValueError(f"shape mismatch {np.shape(rendered)} vs {np.shape(target)}")
    r = torch.tensor(np.asarray(rendered, dtype=np.float64), requires_grad=True)
    t = torch.as_tensor(np.asarray(target, dtype=np.float64))
    loss = photometric_torch(r, t, lambda_ssim)
    loss.backward()
    return float(loss.detach()), r.grad.numpy()


def photometric_grad(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2) -> np.ndarray:
    return photometric_value_and_grad(rendered, target, lambda_ssim)[1]


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

def total_loss(buffers: FrameBuffers, target: np.ndarray, camera: Camera, weights: LossWeights | None = None,
               normal_target: np.ndarray | None = None) -> LossTerms:
    """``L_c + w_d L_d + w_n L_n``; L_d, L_n summed over pixels and divided by pixel count.

    The normal target defaults to finite differences of the expected-depth buffer.
    """
    weights = weights or LossWeights()
    if buffers.records is None and (weights.w_d > 0 or weights.w_n > 0):
        raise StateError("geometry losses need a render with retain_records=True")
    lc = photometric_loss(buffers.color, target, weights.lambda_ssim)
    npix = buffers.color.shape[0] * buffers.color.shape[1]
    ld = ln = 0.0
    if buffers.records is not None:
        if normal_target is None:
            normal_target = normal_from_depth(buffers.expected_depth, camera)
        ld = float(depth_distortion_map(buffers.records, buffers.shape).sum()) / npix
        ln = float(normal_consistency_map(buffers.records, normal_target).sum()) / npix
    return LossTerms(lc, ld, ln, lc + weights.w_d * ld + weights.w_n * ln)
