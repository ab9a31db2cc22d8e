"""Tile-based forward renderer with three schedulers.

``full``
    one block per (tile, view) with ``tile_size**2`` lanes, every pixel rendered.
``naive_masked``
    same launch grid as ``full`` but only the requested pixels do work; the
    rest of the lanes idle.
``thread_efficient``
    one block per (tile, view) sized to the number of requested pixels in
    that tile, padded to the warp width.

All modes share one per-pixel blend routine, so a pixel rendered by two
plans comes out bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from ._pool import run_blocks
from .projection import DEFAULT_PROJECTION, ProjectedBatch, ProjectedCloud, ProjectionConfig, project_views
from .scene import Camera, GaussianCloud

MODES = ("full", "naive_masked", "thread_efficient")
TILE_SIZES = (8, 16, 32)
DEFAULT_ENTRY_CAP = 10_000_000


class BinningExplosion(RuntimeError):
    pass


@dataclass
class TileBin:
    tile_id: tuple[int, int]
    view_id: int
    entries: list[tuple[int, float]]  # (splat index, depth), nearest first


@dataclass
class BinArrays:
    """Flat sorted entry list; bin ``view * n_tiles + tile`` spans ``[bin_start, bin_end)``."""

    entry_gauss: np.ndarray
    entry_view: np.ndarray
    entry_tile: np.ndarray
    entry_depth: np.ndarray
    bin_start: np.ndarray
    bin_end: np.ndarray
    tiles_x: int
    tiles_y: int

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y


def _bin_arrays(mean2d: np.ndarray, radius: np.ndarray, visible: np.ndarray, depth: np.ndarray,
                width: int, height: int, tile_size: int, cap: int = DEFAULT_ENTRY_CAP) -> BinArrays:
    """Bin (B, G) projected splats in one pass over every (view, splat) pair."""
    if tile_size not in TILE_SIZES:
        raise ValueError(f"tile_size must be one of {TILE_SIZES}")
    tx_n = -(-width // tile_size)
    ty_n = -(-height // tile_size)
    n_tiles = tx_n * ty_n
    n_views = visible.shape[0]
    view, g = np.nonzero(visible)
    mx, my, r = mean2d[view, g, 0], mean2d[view, g, 1], radius[view, g]
    x0 = np.clip(np.floor((mx - r) / tile_size), 0, tx_n).astype(np.int64)
    x1 = np.clip(np.floor((mx + r) / tile_size) + 1, 0, tx_n).astype(np.int64)
    y0 = np.clip(np.floor((my - r) / tile_size), 0, ty_n).astype(np.int64)
    y1 = np.clip(np.floor((my + r) / tile_size) + 1, 0, ty_n).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total > cap:
        raise BinningExplosion(f"binning explosion: {total} tile entries exceed the cap of {cap}")
    rep = np.repeat(np.arange(len(g)), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[rep] + offs % nx[rep]
    ty = y0[rep] + offs // nx[rep]
    # keep only tiles the radius disk actually touches
    qx = np.clip(mx[rep], tx * tile_size, (tx + 1) * tile_size)
    qy = np.clip(my[rep], ty * tile_size, (ty + 1) * tile_size)
    hit = (qx - mx[rep]) ** 2 + (qy - my[rep]) ** 2 <= r[rep] ** 2
    rep = rep[hit]
    e_view, e_gauss = view[rep], g[rep]
    e_tile = ty[hit] * tx_n + tx[hit]
    e_depth = depth[e_view, e_gauss]
    # order by (view, tile, depth, splat): entries already run in (view, splat)
    # order, so two stable sorts do what a four-key lexsort would
    keys = e_view * n_tiles + e_tile
    order = np.argsort(e_depth, kind="stable")
    order = order[np.argsort(keys[order], kind="stable")]
    e_view, e_tile, e_gauss, e_depth = e_view[order], e_tile[order], e_gauss[order], e_depth[order]
    end = np.cumsum(np.bincount(keys, minlength=n_views * n_tiles))
    start = end - np.bincount(keys, minlength=n_views * n_tiles)
    return BinArrays(e_gauss.astype(np.int64), e_view.astype(np.int64), e_tile.astype(np.int64), e_depth,
                     start, end, tx_n, ty_n)


def bin_and_sort(projected: Sequence[ProjectedCloud], cams: Sequence[Camera], tile_size: int = 16,
                 cap: int = DEFAULT_ENTRY_CAP) -> list[TileBin]:
    """Duplicate each visible splat into every (tile, view) its radius disk touches, depth sorted."""
    width, height = _common_size(cams)
    bins = _bin_arrays(np.stack([p.mean2d for p in projected]), np.stack([p.radius for p in projected]),
                       np.stack([p.visible for p in projected]), np.stack([p.depth for p in projected]),
                       width, height, tile_size, cap)
    out = []
    for key in np.nonzero(bins.bin_end > bins.bin_start)[0]:
        b, t = divmod(int(key), bins.n_tiles)
        s, e = bins.bin_start[key], bins.bin_end[key]
        out.append(TileBin((t % bins.tiles_x, t // bins.tiles_x), b,
                           [(int(g), float(d)) for g, d in zip(bins.entry_gauss[s:e], bins.entry_depth[s:e])]))
    return out


def _common_size(cams: Sequence[Camera]) -> tuple[int, int]:
    sizes = {(c.width, c.height) for c in cams}
    if len(sizes) != 1:
        raise ValueError("all views in a batch must share one resolution")
    return sizes.pop()


# ---------------------------------------------------------------------------
# plans


@dataclass
class RenderPlan:
    """Mini-batch of (view, pixel subset) requests and its block schedule.

    ``index_array`` is the thread -> pixel map: block ``k`` renders
    ``index_array[block_start[k]:block_end[k]]`` (flat ``y * width + x``
    indices into view slot ``block_view[k]``).  Outputs follow the same order.
    """

    views: list[int]
    mode: str
    tile_size: int
    width: int
    height: int
    pixel_sets: list[np.ndarray]
    index_array: np.ndarray
    block_view: np.ndarray
    block_tile: np.ndarray
    block_start: np.ndarray
    block_end: np.ndarray
    block_threads: np.ndarray
    warp: int = 32

    @property
    def n_requests(self) -> int:
        return len(self.index_array)

    @property
    def block_size(self) -> int:
        if self.mode == "thread_efficient":
            return int(self.block_threads.max()) if len(self.block_threads) else self.warp
        return self.tile_size * self.tile_size

    @property
    def request_view(self) -> np.ndarray:
        """View slot of every request, in output order."""
        return np.repeat(self.block_view, self.block_end - self.block_start)


def make_plan(views: Sequence[int], width: int, height: int, mode: str = "full", tile_size: int = 16,
              pixel_sets: Sequence[np.ndarray] | None = None, warp: int = 32) -> RenderPlan:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if tile_size not in TILE_SIZES:
        raise ValueError(f"tile_size must be one of {TILE_SIZES}")
    views = [int(v) for v in views]
    n_pix = width * height
    if mode == "full" or pixel_sets is None:
        pixel_sets = [np.arange(n_pix, dtype=np.int64) for _ in views]
    if len(pixel_sets) != len(views):
        raise ValueError("need one pixel set per view")
    sets = []
    for ps in pixel_sets:
        ps = np.unique(np.asarray(ps, dtype=np.int64))
        if len(ps) and (ps[0] < 0 or ps[-1] >= n_pix):
            raise ValueError("pixel index out of range")
        sets.append(ps)
    tx_n = -(-width // tile_size)
    ty_n = -(-height // tile_size)
    n_tiles = tx_n * ty_n
    slot = np.concatenate([np.full(len(ps), b, dtype=np.int64) for b, ps in enumerate(sets)]) if sets else np.zeros(0, np.int64)
    pix = np.concatenate(sets) if sets else np.zeros(0, np.int64)
    tile = (pix // width // tile_size) * tx_n + (pix % width) // tile_size
    order = np.lexsort((pix, slot, tile))
    pix, slot, tile = pix[order], slot[order], tile[order]
    key = tile * len(views) + slot
    if mode == "thread_efficient":
        block_keys = np.unique(key)
    else:
        block_keys = np.arange(n_tiles * len(views), dtype=np.int64)
    start = np.searchsorted(key, block_keys, side="left")
    end = np.searchsorted(key, block_keys, side="right")
    counts = end - start
    if mode == "thread_efficient":
        threads = -(-counts // warp) * warp
    else:
        threads = np.full(len(block_keys), tile_size * tile_size, dtype=np.int64)
    return RenderPlan(views, mode, tile_size, width, height, sets, pix,
                      (block_keys % len(views)).astype(np.int64) if len(views) else block_keys,
                      (block_keys // max(len(views), 1)).astype(np.int64),
                      start.astype(np.int64), end.astype(np.int64), threads.astype(np.int64), warp)


def replan(plan: RenderPlan, mode: str) -> RenderPlan:
    return make_plan(plan.views, plan.width, plan.height, mode, plan.tile_size, plan.pixel_sets, plan.warp)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class ForwardState:
    """What the backward pass needs from a forward render."""

    projected: ProjectedBatch
    bins: BinArrays
    mean2d: np.ndarray  # (B, G, 2)
    conic: np.ndarray  # (B, G, 3)
    depth: np.ndarray  # (B, G)
    opacity: np.ndarray  # (G,)
    colors: np.ndarray  # (G, 3)
    early_stop: bool


@dataclass
class RenderOutput:
    plan: RenderPlan
    color: np.ndarray  # (n, 3)
    depth: np.ndarray  # (n,)
    T_final: np.ndarray  # (n,)
    threads_launched: np.ndarray  # per block
    threads_active: np.ndarray  # per block
    gaussians_fetched: np.ndarray  # per block
    wall_ms: float
    state: ForwardState | None = field(default=None, repr=False)

    def image(self, slot: int, fill: float = 0.0) -> np.ndarray:
        """(H, W, 3) image of one view slot; unrendered pixels get ``fill``."""
        p = self.plan
        img = np.full((p.height * p.width, 3), fill)
        sel = p.request_view == slot
        img[p.index_array[sel]] = self.color[sel]
        return img.reshape(p.height, p.width, 3)

    def depth_image(self, slot: int, fill: float = np.nan) -> np.ndarray:
        p = self.plan
        img = np.full(p.height * p.width, fill)
        sel = p.request_view == slot
        img[p.index_array[sel]] = self.depth[sel]
        return img.reshape(p.height, p.width)

    def merged(self) -> "MergedLayout":
        return merged_layout(self.plan, self.color, self.depth, self.T_final)


@dataclass
class MergedLayout:
    """All requests of a plan laid out on one image grid (the partial-rendering mosaic)."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    T_final: np.ndarray  # (H, W)
    view_map: np.ndarray  # (H, W) view slot, -1 where nothing was rendered
    request_at: np.ndarray  # (H, W) request index, -1 where nothing was rendered

    @property
    def valid(self) -> np.ndarray:
        return self.view_map >= 0


def merged_layout(plan: RenderPlan, color, depth, T_final) -> MergedLayout:
    h, w = plan.height, plan.width
    flat = plan.index_array
    if len(np.unique(flat)) != len(flat):
        raise ValueError("pixel sets overlap across views; no merged layout")
    req = np.full(h * w, -1, dtype=np.int64)
    req[flat] = np.arange(len(flat))
    view_map = np.full(h * w, -1, dtype=np.int64)
    view_map[flat] = plan.request_view
    out_c = np.zeros((h * w, 3))
    out_c[flat] = color
    out_d = np.zeros(h * w)
    out_d[flat] = depth
    out_t = np.ones(h * w)
    out_t[flat] = T_final
    return MergedLayout(out_c.reshape(h, w, 3), out_d.reshape(h, w), out_t.reshape(h, w),
                        view_map.reshape(h, w), req.reshape(h, w))


def prepare(plan: RenderPlan, cloud: GaussianCloud, cams: Sequence[Camera],
            proj_cfg: ProjectionConfig = DEFAULT_PROJECTION, early_stop: bool = True,
            entry_cap: int = DEFAULT_ENTRY_CAP) -> ForwardState:
    for v in plan.views:
        if not 0 <= v < len(cams):
            raise IndexError(f"plan references view {v} but only {len(cams)} cameras exist")
    batch_cams = [cams[v] for v in plan.views]
    if _common_size(batch_cams) != (plan.width, plan.height):
        raise ValueError("plan resolution does not match the cameras")
    proj = project_views(cloud, batch_cams, proj_cfg)
    bins = _bin_arrays(proj.mean2d, proj.radius, proj.visible, proj.depth, plan.width, plan.height,
                       plan.tile_size, entry_cap)
    return ForwardState(proj, bins, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
                        np.ascontiguousarray(proj.depth), cloud.opacities, np.ascontiguousarray(cloud.colors),
                        early_stop)


def render(plan: RenderPlan, gaussians: GaussianCloud, cams: Sequence[Camera], *, workers: int | None = 1,
           proj_cfg: ProjectionConfig = DEFAULT_PROJECTION, early_stop: bool = True,
           entry_cap: int = DEFAULT_ENTRY_CAP) -> RenderOutput:
    """Render every request of ``plan``; ``cams`` is indexed by the plan's view ids."""
    if not isinstance(gaussians, GaussianCloud):
        gaussians = GaussianCloud.from_list(gaussians)
    t0 = time.perf_counter()
    st = prepare(plan, gaussians, cams, proj_cfg, early_stop, entry_cap)
    n = plan.n_requests
    color = np.zeros((n, 3))
    depth = np.zeros(n)
    T = np.ones(n)
    fetched = np.zeros(len(plan.block_view), dtype=np.int64)
    zfar = np.array([cams[v].zfar for v in plan.views], dtype=np.float64)
    bins = st.bins

    def work(k0, k1):
        _kernels.blend_blocks(k0, k1, plan.block_view, plan.block_tile, plan.block_start, plan.block_end,
                              plan.index_array, plan.width, bins.n_tiles, bins.bin_start, bins.bin_end,
                              bins.entry_gauss, st.mean2d, st.conic, st.opacity, st.colors, st.depth, zfar,
                              early_stop, color, depth, T, fetched)

    run_blocks(work, len(plan.block_view), workers)
    wall = (time.perf_counter() - t0) * 1e3
    active = plan.block_end - plan.block_start
    if plan.mode == "full":
        # lanes past the image border are launched but idle
        tx = plan.block_tile % bins.tiles_x
        ty = plan.block_tile // bins.tiles_x
        w_in = np.minimum(plan.tile_size, plan.width - tx * plan.tile_size)
        h_in = np.minimum(plan.tile_size, plan.height - ty * plan.tile_size)
        active = w_in * h_in
    return RenderOutput(plan, color, depth, T, plan.block_threads.copy(), active.astype(np.int64),
                        fetched, wall, st)


def blend_pixel(p, mean2d, conic, opacity, color, depth, *, early_stop: bool = True, zfar: float = np.inf):
    """Blend one pixel against an already depth-sorted list of projected splats.

    ``p`` is the pixel index pair ``(u, v)``; ``conic`` rows are packed
    inverse covariances ``(a, b, c)``.  Returns ``(rgb, depth, T_final)``.
    """
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(1, -1, 2)
    n = mean2d.shape[1]
    conic = np.asarray(conic, dtype=np.float64).reshape(1, n, 3)
    depth = np.asarray(depth, dtype=np.float64).reshape(1, n)
    u, v = int(p[0]), int(p[1])
    width = u + 1
    one = np.zeros(1, dtype=np.int64)
    out_c = np.zeros((1, 3))
    out_d = np.zeros(1)
    out_t = np.ones(1)
    _kernels.blend_blocks(0, 1, one, one, one, np.ones(1, dtype=np.int64),
                          np.array([v * width + u], dtype=np.int64), width, 1,
                          np.zeros(1, dtype=np.int64), np.array([n], dtype=np.int64),
                          np.arange(n, dtype=np.int64), mean2d, conic,
                          np.asarray(opacity, dtype=np.float64).reshape(n),
                          np.asarray(color, dtype=np.float64).reshape(n, 3), depth,
                          np.array([zfar]), early_stop, out_c, out_d, out_t, np.zeros(1, dtype=np.int64))
    return out_c[0], float(out_d[0]), float(out_t[0])


# ---------------------------------------------------------------------------
# occupancy


@dataclass
class OccupancyReport:
    mode: str
    views: int
    tile_size: int
    threads_launched: int
    threads_active: int
    wall_ms: float

    @property
    def occupancy(self) -> float:
        return self.threads_active / self.threads_launched if self.threads_launched else 1.0

    def csv_row(self) -> str:
        return (f"{self.mode},{self.views},{self.tile_size},{self.threads_launched},"
                f"{self.threads_active},{self.occupancy:.6f},{self.wall_ms:.3f}")


CSV_HEADER = "mode,views,tile_size,threads_launched,threads_active,occupancy,wall_ms"


def occupancy_report(output: RenderOutput) -> OccupancyReport:
    return OccupancyReport(output.plan.mode, len(output.plan.views), output.plan.tile_size,
                           int(output.threads_launched.sum()), int(output.threads_active.sum()), output.wall_ms)
