"""Analytic parameter gradients of the rendered buffers and losses.

The backward pass replays the forward blend from the retained records:
the (pixel, splat) pairs and their blend order are taken as fixed, and
every differentiable quantity (projection, alpha, transmittance, color,
per-pixel depth and normal) is recomputed in torch so that autograd
carries the chain rule. Incoming buffer gradients are supplied as
``LossSeeds``; the loss terms that act directly on records (depth
distortion, normal consistency) are expressed inside the replay.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .core import Camera, SplatSet, as_splat_set, project_tensors, sh_basis, sh_degree
from .errors import StateError
from .losses import LossTerms, LossWeights, normal_from_depth, photometric_grad, total_loss
from .rasterizer import (
    ALPHA_MAX,
    WEIGHT_EPS,
    BlendRecords,
    FrameBuffers,
    RenderOptions,
    render,
)

PARAM_CLASSES = ("centers", "scales", "rotations", "opacities", "colors_dc")


@dataclass
class ParamGradients:
    centers: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4), tangent to the unit sphere at each quaternion
    opacities: np.ndarray  # (N,)
    colors_dc: np.ndarray  # (N, 3), w.r.t. the degree-0 SH coefficient

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossSeeds:
    """Upstream gradients for one view.

    Buffer seeds are dL/dbuffer arrays (or None). The two scalar
    coefficients multiply the summed per-pixel depth-distortion and
    normal-consistency maps.
    """

    color: np.ndarray | None = None
    expected_depth: np.ndarray | None = None
    median_depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    accum_opacity: np.ndarray | None = None
    depth_distortion: float = 0.0
    normal_consistency: float = 0.0
    normal_target: np.ndarray | None = None
    median_threshold: float = 0.5

    def is_zero(self) -> bool:
        maps = (self.color, self.expected_depth, self.median_depth, self.normal, self.accum_opacity)
        return all(m is None or not np.any(m) for m in maps) and not (
            self.depth_distortion or (self.normal_consistency and self.normal_target is not None)
        )


def loss_seeds(buffers: FrameBuffers, target: np.ndarray, camera: Camera, weights: LossWeights | None = None,
               normal_target: np.ndarray | None = None) -> LossSeeds:
    """Seeds for ``L_c + w_d L_d + w_n L_n`` as evaluated by ``total_loss``."""
    weights = weights or LossWeights()
    npix = buffers.shape[0] * buffers.shape[1]
    if normal_target is None and weights.w_n > 0:
        normal_target = normal_from_depth(buffers.expected_depth, camera)
    return LossSeeds(
        color=photometric_grad(buffers.color, target, weights.lambda_ssim),
        depth_distortion=weights.w_d / npix,
        normal_consistency=weights.w_n / npix,
        normal_target=normal_target,
    )


@contextmanager
def torch_threads(n: int):
    prev = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@dataclass
class _Leaves:
    centers: torch.Tensor
    rotations: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    dc: torch.Tensor
    rest: torch.Tensor = field(repr=False)

    @classmethod
    def from_set(cls, s: SplatSet) -> "_Leaves":
        def leaf(a):
            return torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True)

        return cls(leaf(s.centers), leaf(s.rotations), leaf(s.scales), leaf(s.opacities), leaf(s.sh[:, 0]),
                   torch.from_numpy(np.ascontiguousarray(s.sh[:, 1:])))


def replay(leaves, camera: Camera, records: BlendRecords, shape: tuple[int, int], median_threshold: float = 0.5):
    """Recompute per-record and per-pixel quantities from torch parameters.

    Returns a dict of torch tensors: per-record ``alpha``, ``weight``,
    ``depth``, ``normal`` and flat per-pixel ``color``, ``accum``,
    ``expected``, ``normal_map``, ``median``.
    """
    h, w = shape
    npix = h * w
    proj = project_tensors(leaves.centers, leaves.rotations, leaves.scales, camera)

    sh = torch.cat([leaves.dc[:, None], leaves.rest], 1)
    cam_c = torch.as_tensor(camera.center, dtype=sh.dtype)
    dirs = leaves.centers - cam_c
    dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
    basis = sh_basis(dirs, sh_degree(sh.shape[1]))
    colors = torch.clamp_min(torch.einsum("nk,nkc->nc", basis, sh) + 0.5, 0.0)

    pix = torch.from_numpy(records.pixel.astype(np.int64))
    spl = torch.from_numpy(records.splat.astype(np.int64))
    # dense (pixel group, slot) layout for the per-pixel transmittance product
    r = len(records)
    new = np.r_[True, records.pixel[1:] != records.pixel[:-1]] if r else np.zeros(0, bool)
    group = np.cumsum(new) - 1
    starts = np.flatnonzero(new)
    slot = np.arange(r) - starts[group] if r else np.zeros(0, np.int64)
    kmax = int(slot.max()) + 1 if r else 1
    ngroup = len(starts)
    dense = torch.from_numpy((group * kmax + slot).astype(np.int64))

    col = (pix % w).to(sh.dtype)
    row = (pix // w).to(sh.dtype)
    du = proj.uv[spl, 0] - col
    dv = proj.uv[spl, 1] - row
    con = proj.conic[spl]
    power = con[:, 0, 0] * du * du + 2 * con[:, 0, 1] * du * dv + con[:, 1, 1] * dv * dv
    alpha = torch.clamp_max(leaves.opacities[spl] * torch.exp(-power), ALPHA_MAX)

    a_dense = torch.zeros(ngroup * kmax, dtype=sh.dtype).index_put((dense,), alpha).view(ngroup, kmax)
    t_after = torch.cumprod(1.0 - a_dense, dim=1)
    t_before = torch.cat([torch.ones_like(t_after[:, :1]), t_after[:, :-1]], 1).reshape(-1)[dense]
    weight = alpha * t_before
    depth = proj.z[spl] + proj.p[spl, 0] * du + proj.p[spl, 1] * dv
    normal = proj.normal[spl]

    zeros = torch.zeros(npix, dtype=sh.dtype)
    accum = zeros.index_add(0, pix, weight)
    color = torch.zeros(npix, 3, dtype=sh.dtype).index_add(0, pix, weight[:, None] * colors[spl])
    has = accum >= WEIGHT_EPS
    expected = torch.where(has, zeros.index_add(0, pix, weight * depth) / torch.where(has, accum, 1.0), 0.0)
    nsum = torch.zeros(npix, 3, dtype=sh.dtype).index_add(0, pix, weight[:, None] * normal)
    nlen = torch.linalg.vector_norm(nsum, dim=-1, keepdim=True)
    normal_map = torch.where(has[:, None], nsum / torch.where(has[:, None], nlen, 1.0), 0.0)

    # median: first record whose running weight crosses the threshold (selection is fixed)
    median = zeros.clone()
    if r:
        w_dense = np.zeros(ngroup * kmax)
        w_dense[group * kmax + slot] = weight.detach().numpy()
        run = np.cumsum(w_dense.reshape(ngroup, kmax), axis=1).reshape(-1)[group * kmax + slot]
        crossed = np.flatnonzero(run >= median_threshold)
        first = crossed[np.r_[True, group[crossed][1:] != group[crossed][:-1]]] if len(crossed) else crossed
        sel = torch.from_numpy(first.astype(np.int64))
        median = median.index_put((pix[sel],), depth[sel])

    return {
        "proj": proj,
        "colors": colors,
        "alpha": alpha,
        "weight": weight,
        "depth": depth,
        "normal": normal,
        "pixel": pix,
        "color": color,
        "accum": accum,
        "expected": expected,
        "normal_map": normal_map,
        "median": median,
    }


def _surrogate(out: dict, seeds: LossSeeds, records: BlendRecords, shape: tuple[int, int]) -> torch.Tensor:
    def seed(a, k):
        return torch.as_tensor(np.asarray(a, dtype=np.float64).reshape(-1, k) if k > 1 else
                               np.asarray(a, dtype=np.float64).reshape(-1))

    total = out["accum"].sum() * 0.0
    if seeds.color is not None:
        total = total + (out["color"] * seed(seeds.color, 3)).sum()
    if seeds.expected_depth is not None:
        total = total + (out["expected"] * seed(seeds.expected_depth, 1)).sum()
    if seeds.median_depth is not None:
        total = total + (out["median"] * seed(seeds.median_depth, 1)).sum()
    if seeds.normal is not None:
        total = total + (out["normal_map"] * seed(seeds.normal, 3)).sum()
    if seeds.accum_opacity is not None:
        total = total + (out["accum"] * seed(seeds.accum_opacity, 1)).sum()

    pix = out["pixel"]
    npix = shape[0] * shape[1]
    if seeds.depth_distortion and len(records):
        # weights are treated as constants here; depths carry the gradient
        w = out["weight"].detach()
        new = np.r_[True, records.pixel[1:] != records.pixel[:-1]]
        first = torch.from_numpy(np.flatnonzero(new))[torch.from_numpy(np.cumsum(new) - 1)]
        d = out["depth"] - out["depth"].detach()[first]
        zeros = torch.zeros(npix, dtype=d.dtype)
        a = zeros.index_add(0, pix, w)
        s1 = zeros.index_add(0, pix, w * d)
        s2 = zeros.index_add(0, pix, w * d * d)
        total = total + seeds.depth_distortion * (2.0 * (a * s2 - s1 * s1)).sum()
    if seeds.normal_consistency and seeds.normal_target is not None and len(records):
        tn = torch.as_tensor(np.asarray(seeds.normal_target, dtype=np.float64).reshape(-1, 3))[pix]
        mask = (tn != 0).any(-1)
        terms = out["weight"] * (1.0 - (out["normal"] * tn).sum(-1))
        total = total + seeds.normal_consistency * torch.where(mask, terms, 0.0).sum()
    return total


def backward(scene, camera: Camera, buffers: FrameBuffers, seeds: LossSeeds) -> ParamGradients:
    """Gradients of ``<seeds, buffers>`` plus the seeded record losses w.r.t. splat parameters."""
    if buffers.records is None:
        raise StateError("backward needs a forward render with retain_records=True")
    s = as_splat_set(scene)
    if len(s) == 0 or seeds.is_zero() or len(buffers.records) == 0:
        return ParamGradients.zeros(len(s))
    with torch_threads(1):
        leaves = _Leaves.from_set(s)
        out = replay(leaves, camera, buffers.records, buffers.shape, seeds.median_threshold)
        loss = _surrogate(out, seeds, buffers.records, buffers.shape)
        if not loss.requires_grad:
            return ParamGradients.zeros(len(s))
        loss.backward()

    def g(t, shape):
        return t.grad.numpy().copy() if t.grad is not None else np.zeros(shape)

    n = len(s)
    return ParamGradients(
        centers=g(leaves.centers, (n, 3)),
        scales=g(leaves.scales, (n, 3)),
        rotations=g(leaves.rotations, (n, 4)),
        opacities=g(leaves.opacities, (n,)),
        colors_dc=g(leaves.dc, (n, 3)),
    )


def total_loss_and_grad(scene, camera: Camera, target: np.ndarray, weights: LossWeights | None = None,
                        opts: RenderOptions | None = None, normal_target: np.ndarray | None = None):
    """Render, evaluate ``total_loss`` and backpropagate; returns (terms, grads, buffers)."""
    weights = weights or LossWeights()
    opts = RenderOptions(**{**vars(opts or RenderOptions()), "retain_records": True})
    buffers = render(scene, camera, opts)
    if normal_target is None:
        normal_target = normal_from_depth(buffers.expected_depth, camera)
    terms: LossTerms = total_loss(buffers, target, camera, weights, normal_target)
    grads = backward(scene, camera, buffers, loss_seeds(buffers, target, camera, weights, normal_target))
    return terms, grads, buffers


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    rel_error: dict[str, np.ndarray]
    excluded: list[tuple[str, int, int]]  # (class, splat, component)

    def max_error(self, cls: str | None = None) -> float:
        names = [cls] if cls else list(self.rel_error)
        vals = [np.nanmax(self.rel_error[c]) for c in names if np.any(np.isfinite(self.rel_error[c]))]
        return float(max(vals)) if vals else 0.0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error() <= tol


def _kink_signature(scene: SplatSet, camera: Camera, buffers: FrameBuffers):
    """Everything whose change between FD samples makes the loss non-smooth."""
    from .core import project_scene

    recs = buffers.records
    proj = project_scene(scene, camera)
    basis = sh_basis(_unit(scene.centers - camera.center), sh_degree(scene.sh.shape[1]))
    raw = np.einsum("nk,nkc->nc", basis, scene.sh) + 0.5
    return (recs.pixel, recs.splat, recs.alpha >= ALPHA_MAX, raw < 0, proj.flipped, proj.valid)


def _unit(v):
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def _same(a, b) -> bool:
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _perturb(s: SplatSet, cls: str, i: int, k: int, h: float) -> SplatSet:
    out = s.copy()
    if cls == "centers":
        out.centers[i, k] += h
    elif cls == "scales":
        out.scales[i, k] += h
    elif cls == "rotations":
        q = out.rotations[i].copy()
        q[k] += h
        out.rotations[i] = q / np.linalg.norm(q)
    elif cls == "opacities":
        out.opacities[i] += h
    elif cls == "colors_dc":
        out.sh[i, 0, k] += h
    else:
        raise KeyError(cls)
    return out


def grad_check(scene, camera: Camera, target: np.ndarray, weights: LossWeights | None = None,
               step: float = 1e-4, backward_fn=None, opts: RenderOptions | None = None,
               classes=PARAM_CLASSES) -> GradCheckReport:
    """Compare analytic gradients of the total loss with central differences.

    The depth-distortion weights and the normal target are frozen at the
    base point, matching the analytic pass. A parameter is excluded when
    its perturbation at +-h or +-2h changes the record set, an alpha or
    color clamp, a normal flip or the sign of an L1 residual. Relative errors are per parameter
    class: ``|a - f| / max(|f|, 0.01 * max_class |f|, 1e-10)``.
    """
    from .losses import depth_distortion_map, normal_consistency_map, photometric_loss

    weights = weights or LossWeights()
    backward_fn = backward_fn or backward
    s = as_splat_set(scene).copy()
    opts = RenderOptions(**{**vars(opts or RenderOptions()), "retain_records": True})
    base = render(s, camera, opts)
    n_target = normal_from_depth(base.expected_depth, camera)
    npix = base.shape[0] * base.shape[1]
    sig0 = _kink_signature(s, camera, base) + (np.sign(base.color - target),)
    analytic = backward_fn(s, camera, base, loss_seeds(base, target, camera, weights, n_target))

    def frozen_loss(buf: FrameBuffers) -> float:
        lc = photometric_loss(buf.color, target, weights.lambda_ssim)
        frozen = BlendRecords(buf.records.pixel, buf.records.splat, buf.records.alpha, base.records.weight,
                              buf.records.depth, buf.records.normal)
        ld = depth_distortion_map(frozen, buf.shape).sum() / npix
        ln = normal_consistency_map(buf.records, n_target).sum() / npix
        return lc + weights.w_d * ld + weights.w_n * ln

    numeric, rel, excluded = {}, {}, []
    for cls in classes:
        a = getattr(analytic, cls)
        f = np.full(a.shape, np.nan)
        for i in range(len(s)):
            for k in range(a.shape[1] if a.ndim > 1 else 1):
                vals, ok = {}, True
                for m in (-2, -1, 1, 2):
                    sp = _perturb(s, cls, i, k, m * step)
                    buf = render(sp, camera, opts)
                    if not _same(sig0, _kink_signature(sp, camera, buf) + (np.sign(buf.color - target),)):
                        ok = False
                        break
                    vals[m] = frozen_loss(buf)
                if not ok:
                    excluded.append((cls, i, k))
                    continue
                idx = (i, k) if a.ndim > 1 else (i,)
                f[idx] = (vals[1] - vals[-1]) / (2 * step)
        numeric[cls] = f
        scale = np.nanmax(np.abs(f)) if np.any(np.isfinite(f)) else 0.0
        denom = np.maximum(np.maximum(np.abs(f), 0.01 * scale), 1e-10)
        rel[cls] = np.abs(a - f) / denom
    return GradCheckReport(analytic.as_dict(), numeric, rel, excluded)
