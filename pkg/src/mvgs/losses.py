"""Photometric losses with per-pixel gradients.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
rendered input.  The SSIM family shares one weighted-window engine: plain
D-SSIM uses a truncated 2D Gaussian, the distance-aware variant weights
window pixels by the 3D distance between their unprojected surface points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .rasterizer import MergedLayout
from .scene import Camera

BACKGROUND_T = _kernels.BACKGROUND_T


@dataclass(frozen=True)
class SsimWindow:
    half_width: int = 5
    sigma2d: float = 1.5
    sigma3d: float | None = None  # None: matched to sigma2d at the mean scene depth
    c1: float = 0.01**2
    c2: float = 0.03**2
    min_valid: int = 4

    def __post_init__(self):
        if self.half_width < 1 or self.sigma2d <= 0:
            raise ValueError("window needs half_width >= 1 and sigma2d > 0")
        if self.sigma3d is not None and self.sigma3d <= 0:
            raise ValueError("sigma3d must be positive")

    @property
    def size(self) -> int:
        return 2 * self.half_width + 1


DEFAULT_WINDOW = SsimWindow()


def _pair(rendered, target):
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1(rendered, target) -> tuple[float, np.ndarray]:
    a, b = _pair(rendered, target)
    if a.size == 0:
        return 0.0, np.zeros_like(a)
    d = a - b
    return float(np.abs(d).mean()), np.sign(d) / a.size


def l2(rendered, target) -> tuple[float, np.ndarray]:
    a, b = _pair(rendered, target)
    if a.size == 0:
        return 0.0, np.zeros_like(a)
    d = a - b
    return float((d * d).mean()), 2.0 * d / a.size


# ---------------------------------------------------------------------------
# weighted SSIM engine


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    return np.ascontiguousarray(img)


def weighted_dssim(img1, img2, weights: np.ndarray, centers: np.ndarray, c1: float, c2: float,
                   n_counted: int | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean of 1 - SSIM over evaluated centers and channels.

    ``weights[y, x]`` is the (k, k) window of center ``(y, x)``.  ``n_counted``
    overrides the number of centers in the denominator (dropped windows still
    count, contributing zero).  Returns ``(value, d value / d img1, ssim map)``.
    """
    a, b = _as_hwc(img1), _as_hwc(img2)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    h, w, nch = a.shape
    half = (weights.shape[-1] - 1) // 2
    centers = np.ascontiguousarray(centers, dtype=np.bool_)
    smap = np.ones((h, w, nch))
    grad = np.zeros_like(a)
    _kernels.weighted_ssim(a, b, np.ascontiguousarray(weights), centers, half, c1, c2, smap, grad)
    n = int(centers.sum()) if n_counted is None else int(n_counted)
    if n == 0:
        return 0.0, grad, smap
    value = float((1.0 - smap[centers]).sum() / (n * nch))
    return value, -grad / (n * nch), smap


def gaussian_window_weights(valid: np.ndarray, win: SsimWindow = DEFAULT_WINDOW,
                            view_map: np.ndarray | None = None, same_view_only: bool = False) -> np.ndarray:
    """2D Gaussian windows renormalised over ``valid`` pixels (and one view, if asked)."""
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    h, w = valid.shape
    vm = np.zeros((h, w), dtype=np.int64) if view_map is None else np.ascontiguousarray(view_map, dtype=np.int64)
    weights = np.zeros((h, w, win.size, win.size))
    _kernels.window_weights(valid, vm, same_view_only, win.half_width, win.sigma2d, weights)
    return weights


def ssim_map(img1, img2, win: SsimWindow = DEFAULT_WINDOW) -> np.ndarray:
    a = _as_hwc(img1)
    valid = np.ones(a.shape[:2], dtype=bool)
    return weighted_dssim(a, img2, gaussian_window_weights(valid, win), valid, win.c1, win.c2)[2]


def ssim(img1, img2, win: SsimWindow = DEFAULT_WINDOW) -> float:
    return float(ssim_map(img1, img2, win).mean())


def dssim(rendered, target, win: SsimWindow = DEFAULT_WINDOW) -> tuple[float, np.ndarray]:
    """Single-view D-SSIM over a full image, windows renormalised at the border."""
    a, b = _as_hwc(rendered), _as_hwc(target)
    if a.shape[0] < win.size or a.shape[1] < win.size:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} smaller than the {win.size}x{win.size} window")
    valid = np.ones(a.shape[:2], dtype=bool)
    value, grad, _ = weighted_dssim(a, b, gaussian_window_weights(valid, win), valid, win.c1, win.c2)
    return value, grad.reshape(np.shape(rendered))


def masked_dssim(layout: MergedLayout, target, win: SsimWindow = DEFAULT_WINDOW,
                 same_view_only: bool = True) -> tuple[float, np.ndarray]:
    """2D D-SSIM on a partial-rendering mosaic; windows see only rendered pixels of their own view."""
    weights = gaussian_window_weights(layout.valid, win, layout.view_map, same_view_only)
    value, grad, _ = weighted_dssim(layout.color, target, weights, layout.valid, win.c1, win.c2)
    return value, grad


# ---------------------------------------------------------------------------
# 3D distance-aware windows


@dataclass
class PixelFrameMap:
    """World surface point per mosaic pixel, with validity masks.

    ``valid`` marks rendered pixels; ``surface`` additionally requires that
    something opaque was hit (final transmittance at most 0.999).
    """

    points: np.ndarray  # (H, W, 3)
    valid: np.ndarray
    surface: np.ndarray

    def window(self, y: int, x: int, half: int) -> tuple[np.ndarray, np.ndarray]:
        """Offsets (k, k, 3) from the center's point and the entry mask."""
        h, w = self.valid.shape
        k = 2 * half + 1
        off = np.zeros((k, k, 3))
        ok = np.zeros((k, k), dtype=bool)
        for dy in range(k):
            for dx in range(k):
                yy, xx = y + dy - half, x + dx - half
                if 0 <= yy < h and 0 <= xx < w and self.valid[yy, xx] and self.surface[yy, xx]:
                    off[dy, dx] = self.points[yy, xx] - self.points[y, x]
                    ok[dy, dx] = True
        return off, ok


def pixel_frame_map(depth: np.ndarray, T_final: np.ndarray, view_map: np.ndarray,
                    cams: Sequence[Camera]) -> PixelFrameMap:
    """Unproject every rendered pixel through the camera of the view it came from.

    ``depth`` is the alpha-weighted depth; dividing by the accumulated alpha
    turns it back into a surface depth.  ``cams[s]`` is the camera of view slot ``s``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    T_final = np.asarray(T_final, dtype=np.float64)
    view_map = np.asarray(view_map)
    h, w = depth.shape
    valid = view_map >= 0
    surface = valid & (T_final <= BACKGROUND_T)
    points = np.zeros((h, w, 3))
    vv, uu = np.mgrid[0:h, 0:w]
    for s, cam in enumerate(cams):
        sel = surface & (view_map == s)
        if sel.any():
            z = depth[sel] / (1.0 - T_final[sel])
            points[sel] = cam.unproject(uu[sel], vv[sel], z)
    return PixelFrameMap(points, valid, surface)


def auto_sigma3d(fmap: PixelFrameMap, cams: Sequence[Camera], view_map: np.ndarray,
                 win: SsimWindow = DEFAULT_WINDOW) -> float:
    """World-space sigma that matches ``sigma2d`` pixels at the mean surface depth."""
    zs, fs = [], []
    for s, cam in enumerate(cams):
        sel = fmap.surface & (view_map == s)
        if sel.any():
            zc = cam.world_to_camera(fmap.points[sel])[:, 2]
            zs.append(zc)
            fs.append(np.full(len(zc), cam.fx))
    if not zs:
        return 1.0
    z = np.concatenate(zs)
    f = np.concatenate(fs)
    return float(win.sigma2d * np.mean(z / f))


def weights_3d(fmap: PixelFrameMap, sigma3d: float, win: SsimWindow = DEFAULT_WINDOW):
    """Window weights from 3D distances; returns ``(weights, centers, dropped)``."""
    h, w = fmap.valid.shape
    weights = np.zeros((h, w, win.size, win.size))
    centers = np.zeros((h, w), dtype=np.bool_)
    dropped = _kernels.window_weights_3d(np.ascontiguousarray(fmap.points), np.ascontiguousarray(fmap.valid),
                                         np.ascontiguousarray(fmap.surface), win.half_width, float(sigma3d),
                                         win.sigma2d, win.min_valid, weights, centers)
    return weights, centers, int(dropped)


@dataclass
class Dssim3dInfo:
    sigma3d: float
    dropped: int
    weights: np.ndarray
    centers: np.ndarray


def dssim3d(rendered, target, depth, T_final, view_map, cams: Sequence[Camera],
            win: SsimWindow = DEFAULT_WINDOW, weights: tuple[np.ndarray, np.ndarray] | None = None
            ) -> tuple[float, np.ndarray, Dssim3dInfo]:
    """Distance-aware D-SSIM on a (possibly multi-view) mosaic.

    ``view_map`` gives each pixel's view slot (-1 where nothing was rendered)
    and ``cams[s]`` the camera of slot ``s``.  Depth only shapes the windows;
    no gradient flows into it.  Pass ``weights=(weights, centers)`` to reuse
    precomputed windows.
    """
    if depth is None:
        raise ValueError("distance-aware D-SSIM needs a depth channel")
    a = _as_hwc(rendered)
    view_map = np.asarray(view_map)
    valid = view_map >= 0
    if weights is None:
        fmap = pixel_frame_map(depth, T_final, view_map, cams)
        sigma = win.sigma3d if win.sigma3d is not None else auto_sigma3d(fmap, cams, view_map, win)
        wts, centers, dropped = weights_3d(fmap, sigma, win)
    else:
        wts, centers = weights
        sigma = win.sigma3d if win.sigma3d is not None else math.nan
        dropped = int(valid.sum() - centers.sum())
    value, grad, _ = weighted_dssim(a, target, wts, centers, win.c1, win.c2, n_counted=int(valid.sum()))
    return value, grad.reshape(np.shape(rendered)), Dssim3dInfo(sigma, dropped, wts, centers)


def dssim3d_layout(layout: MergedLayout, target, cams: Sequence[Camera], win: SsimWindow = DEFAULT_WINDOW):
    """:func:`dssim3d` on a render's mosaic; ``cams`` indexed by view slot."""
    return dssim3d(layout.color, target, layout.depth, layout.T_final, layout.view_map, cams, win)
