"""Tile-based forward rasterization of color, depth, normal and opacity buffers.

Splats are blended front to back in one global order (ascending center
depth). Each pixel receives the per-pixel rasterized depth
``z_c + p . (u_c - u, v_c - v)`` and the splat's camera-space normal, so
expected depth, median depth and the normal map all come out of the same
blending pass as color.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Camera, ProjectionBatch, SplatProjection, as_splat_set, project_scene, sh_basis, sh_degree

ALPHA_MAX = 0.99
WEIGHT_EPS = 1e-8
FOOTPRINT_SIGMA2 = 9.0


@dataclass
class RenderOptions:
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    median_threshold: float = 0.5
    retain_records: bool = False
    threads: int | None = None

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        # 0 disables the cutoff / early exit (oracle-equivalence runs)
        if not 0.0 <= self.alpha_cutoff < 1.0:
            raise ValueError("alpha_cutoff must be in [0, 1)")
        if not 0.0 <= self.transmittance_stop < 1.0:
            raise ValueError("transmittance_stop must be in [0, 1)")
        if not 0.0 < self.median_threshold < 1.0:
            raise ValueError("median_threshold must be in (0, 1)")

    def worker_count(self) -> int:
        return max(1, self.threads if self.threads else (os.cpu_count() or 1))


@dataclass
class PixelBlendRecord:
    splat_index: int
    weight: float
    depth: float
    normal: np.ndarray


@dataclass
class BlendRecords:
    """Flat per-(pixel, splat) contribution stream, grouped by pixel in blend order."""

    pixel: np.ndarray  # (R,) flat pixel index row * W + col
    splat: np.ndarray  # (R,)
    alpha: np.ndarray  # (R,)
    weight: np.ndarray  # (R,)
    depth: np.ndarray  # (R,)
    normal: np.ndarray  # (R, 3)

    def __len__(self):
        return len(self.pixel)

    def at(self, pixel_index: int) -> list[PixelBlendRecord]:
        lo, hi = np.searchsorted(self.pixel, [pixel_index, pixel_index + 1])
        return [
            PixelBlendRecord(int(self.splat[k]), float(self.weight[k]), float(self.depth[k]), self.normal[k])
            for k in range(lo, hi)
        ]


@dataclass
class FrameBuffers:
    color: np.ndarray  # (H, W, 3)
    median_depth: np.ndarray  # (H, W), 0 = no surface
    expected_depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3), zero = no surface
    accum_opacity: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W) residual after the last blended splat
    records: BlendRecords | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.median_depth.shape


# ---------------------------------------------------------------------------
# per-splat pixel functions
# ---------------------------------------------------------------------------

def alpha_at(proj: SplatProjection, opacity: float, pixel) -> float:
    d = proj.uv_center - np.asarray(pixel, dtype=np.float64)
    return float(min(opacity * np.exp(-d @ proj.conic @ d), ALPHA_MAX))


def depth_at(proj: SplatProjection, pixel) -> float:
    d = proj.uv_center - np.asarray(pixel, dtype=np.float64)
    return float(proj.z_c + proj.p @ d)


def sort_splats(projections) -> np.ndarray:
    """Stable ascending order by center depth; ties keep index order.

    Accepts a ProjectionBatch, a sequence of SplatProjection or raw depths.
    """
    if isinstance(projections, ProjectionBatch):
        z, idx = np.asarray(projections.z), np.arange(len(projections))
    elif len(projections) and isinstance(projections[0], SplatProjection):
        z = np.array([pr.z_c for pr in projections])
        idx = np.array([pr.splat_index for pr in projections])
    else:
        z = np.asarray(projections, dtype=np.float64)
        idx = np.arange(len(z))
    order = np.lexsort((idx, z))
    return idx[order]


def splat_colors(scene, camera: Camera) -> np.ndarray:
    """View-dependent RGB per splat (N, 3)."""
    s = as_splat_set(scene)
    if len(s) == 0:
        return np.zeros((0, 3))
    dirs = s.centers - camera.center
    dirs = dirs / np.maximum(np.linalg.norm(dirs, axis=-1, keepdims=True), 1e-12)
    basis = sh_basis(dirs, sh_degree(s.sh.shape[1]))
    return np.maximum(np.einsum("nk,nkc->nc", basis, s.sh) + 0.5, 0.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass
class _TileResult:
    rows: slice
    cols: slice
    color: np.ndarray
    median: np.ndarray
    expected: np.ndarray
    normal: np.ndarray
    accum: np.ndarray
    trans: np.ndarray
    records: tuple | None


def _blend_tile(ty, tx, ids, proj, colors, opac, cam, opts) -> _TileResult:
    ts = opts.tile_size
    r0, c0 = ty * ts, tx * ts
    r1, c1 = min(r0 + ts, cam.height), min(c0 + ts, cam.width)
    vv, uu = np.mgrid[r0:r1, c0:c1]
    pu, pv = uu.ravel().astype(np.float64), vv.ravel().astype(np.float64)
    n_pix = len(pu)
    shape = (r1 - r0, c1 - c0)

    if len(ids) == 0:
        z = np.zeros(shape)
        return _TileResult(slice(r0, r1), slice(c0, c1), np.zeros(shape + (3,)), z, z.copy(),
                           np.zeros(shape + (3,)), z.copy(), np.ones(shape),
                           _empty_records() if opts.retain_records else None)

    du = proj.uv[ids, 0, None] - pu[None]
    dv = proj.uv[ids, 1, None] - pv[None]
    con = proj.conic[ids]
    power = con[:, 0, 0, None] * du * du + 2 * con[:, 0, 1, None] * du * dv + con[:, 1, 1, None] * dv * dv
    alpha = np.minimum(opac[ids, None] * np.exp(-power), ALPHA_MAX)
    keep = (power <= FOOTPRINT_SIGMA2) & (alpha >= opts.alpha_cutoff)

    if opts.transmittance_stop > 0:
        t_after = np.cumprod(1.0 - np.where(keep, alpha, 0.0), axis=0)
        stop = keep & (t_after < opts.transmittance_stop)
        first = np.where(stop.any(0), stop.argmax(0), len(ids))
        keep &= np.arange(len(ids))[:, None] < first[None]

    a = np.where(keep, alpha, 0.0)
    t_after = np.cumprod(1.0 - a, axis=0)
    t_before = np.vstack([np.ones((1, n_pix)), t_after[:-1]])
    w = a * t_before
    depth = proj.z[ids, None] + proj.p[ids, 0, None] * du + proj.p[ids, 1, None] * dv

    wsum_run = np.cumsum(w, axis=0)
    wsum = wsum_run[-1]
    color = w.T @ colors[ids]
    expected = (w * depth).sum(0) / np.maximum(wsum, WEIGHT_EPS)
    expected[wsum < WEIGHT_EPS] = 0.0
    nsum = w.T @ proj.normal[ids]
    nlen = np.linalg.norm(nsum, axis=-1)
    normal = np.where((wsum >= WEIGHT_EPS)[:, None], nsum / np.maximum(nlen, 1e-300)[:, None], 0.0)
    crossed = wsum_run >= opts.median_threshold
    has = crossed.any(0)
    median = np.where(has, depth[crossed.argmax(0), np.arange(n_pix)], 0.0)

    recs = None
    if opts.retain_records:
        pix_local, slot = np.nonzero(keep.T)
        flat = (vv.ravel() * cam.width + uu.ravel())[pix_local]
        recs = (flat, ids[slot], a[slot, pix_local], w[slot, pix_local], depth[slot, pix_local],
                proj.normal[ids[slot]])

    return _TileResult(
        slice(r0, r1), slice(c0, c1),
        color.reshape(shape + (3,)), median.reshape(shape), expected.reshape(shape),
        normal.reshape(shape + (3,)), wsum.reshape(shape), t_after[-1].reshape(shape), recs,
    )


def _empty_records():
    e = np.zeros(0)
    return (np.zeros(0, np.int64), np.zeros(0, np.int64), e, e, e, np.zeros((0, 3)))


def bin_tiles(proj: ProjectionBatch, order: np.ndarray, camera: Camera, tile_size: int):
    """Map each tile (ty, tx) to the sorted splat ids whose footprint box touches it."""
    ntx = -(-camera.width // tile_size)
    nty = -(-camera.height // tile_size)
    ids = order[proj.valid[order]]
    lo = proj.uv[ids] - proj.extent[ids] - 1e-6
    hi = proj.uv[ids] + proj.extent[ids] + 1e-6
    # pixel centers sit on integers: tile tx spans [tx*ts, tx*ts + ts - 1]
    tx0 = np.floor(np.ceil(lo[:, 0]) / tile_size)
    tx1 = np.floor(np.floor(hi[:, 0]) / tile_size)
    ty0 = np.floor(np.ceil(lo[:, 1]) / tile_size)
    ty1 = np.floor(np.floor(hi[:, 1]) / tile_size)
    bins = {}
    for ty in range(nty):
        rows = (ty0 <= ty) & (ty1 >= ty)
        for tx in range(ntx):
            bins[(ty, tx)] = ids[rows & (tx0 <= tx) & (tx1 >= tx)]
    return bins


def render(scene, camera: Camera, opts: RenderOptions | None = None, proj: ProjectionBatch | None = None) -> FrameBuffers:
    """Rasterize ``scene`` into ``camera``; see module docstring."""
    opts = opts or RenderOptions()
    if camera.width < 1 or camera.height < 1:
        raise ValueError("image dimensions must be positive")
    s = as_splat_set(scene)
    h, w = camera.height, camera.width
    if proj is None:
        proj = project_scene(s, camera)
    colors = splat_colors(s, camera)
    order = sort_splats(proj) if len(s) else np.zeros(0, np.int64)
    bins = bin_tiles(proj, order, camera, opts.tile_size) if len(s) else {
        (ty, tx): np.zeros(0, np.int64)
        for ty in range(-(-h // opts.tile_size)) for tx in range(-(-w // opts.tile_size))
    }

    def job(key):
        return _blend_tile(key[0], key[1], bins[key], proj, colors, s.opacities, camera, opts)

    keys = sorted(bins)
    workers = opts.worker_count()
    if workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, keys))
    else:
        results = [job(k) for k in keys]

    out = FrameBuffers(
        color=np.zeros((h, w, 3)),
        median_depth=np.zeros((h, w)),
        expected_depth=np.zeros((h, w)),
        normal=np.zeros((h, w, 3)),
        accum_opacity=np.zeros((h, w)),
        transmittance=np.ones((h, w)),
    )
    for r in results:
        out.color[r.rows, r.cols] = r.color
        out.median_depth[r.rows, r.cols] = r.median
        out.expected_depth[r.rows, r.cols] = r.expected
        out.normal[r.rows, r.cols] = r.normal
        out.accum_opacity[r.rows, r.cols] = r.accum
        out.transmittance[r.rows, r.cols] = r.trans

    if opts.retain_records:
        parts = [r.records for r in results]
        cols = [np.concatenate([p[i] for p in parts]) for i in range(6)]
        by_pixel = np.argsort(cols[0], kind="stable")
        out.records = BlendRecords(*(c[by_pixel] for c in cols))
        out.records.normal = out.records.normal.reshape(-1, 3)
    return out
