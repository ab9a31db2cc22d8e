"""Render, score and differentiate one mini-batch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import losses
from .gradients import GradAccumulator, ParamGrads, backward
from .losses import SsimWindow
from .rasterizer import MergedLayout, RenderOutput, RenderPlan, merged_layout, render
from .scene import Camera, GaussianCloud

LOSS_MODES = ("l1", "l2", "dssim", "dssim3d", "l1_dssim", "l1_dssim3d", "mix")

# weights of the all-terms loss used to exercise every gradient path at once
MIX_WEIGHTS = {"l1": 0.3, "l2": 0.3, "dssim": 0.2, "dssim3d": 0.2, "depth": 0.05}


@dataclass
class ObjectiveResult:
    loss: float
    parts: dict[str, float]
    grads: ParamGrads | None
    acc: GradAccumulator | None
    output: RenderOutput
    frozen: dict = field(default_factory=dict, repr=False)


def gather_targets(plan: RenderPlan, images: Sequence[np.ndarray]) -> np.ndarray:
    """Target colour of every request; ``images`` indexed by global view id."""
    out = np.empty((plan.n_requests, 3))
    slot = plan.request_view
    for b, v in enumerate(plan.views):
        sel = slot == b
        out[sel] = np.asarray(images[v], dtype=np.float64).reshape(-1, 3)[plan.index_array[sel]]
    return out


def _layouts(plan: RenderPlan, output: RenderOutput) -> list[tuple[np.ndarray, MergedLayout]]:
    """One mosaic if the pixel sets are disjoint, else one per view slot."""
    if len(np.unique(plan.index_array)) == len(plan.index_array):
        return [(np.arange(plan.n_requests), merged_layout(plan, output.color, output.depth, output.T_final))]
    out = []
    slot = plan.request_view
    for b in range(len(plan.views)):
        sel = np.nonzero(slot == b)[0]
        sub = _slot_plan(plan, b)
        out.append((sel, merged_layout(sub, output.color[sel], output.depth[sel], output.T_final[sel])))
    return out


def _slot_plan(plan: RenderPlan, b: int) -> RenderPlan:
    keep = plan.block_view == b
    # request order inside the slot is preserved, so a 0..n relabel keeps index_array aligned
    sel = plan.request_view == b
    counts = (plan.block_end - plan.block_start)[keep]
    end = np.cumsum(counts)
    return RenderPlan(plan.views, plan.mode, plan.tile_size, plan.width, plan.height, plan.pixel_sets,
                      plan.index_array[sel], plan.block_view[keep], plan.block_tile[keep], end - counts, end,
                      plan.block_threads[keep], plan.warp)


def _ssim_term(kind, plan, output, targets, cams, win, frozen, key):
    """Value and per-request gradient of a (possibly multi-view) D-SSIM term."""
    grad = np.zeros((plan.n_requests, 3))
    total = 0.0
    parts = _layouts(plan, output)
    slot_cams = [cams[v] for v in plan.views]
    for i, (sel, lay) in enumerate(parts):
        tgt = np.zeros_like(lay.color)
        req = sel[lay.request_at[lay.valid]]
        tgt[lay.valid] = targets[req]
        if kind == "dssim":
            v, g = losses.masked_dssim(lay, tgt, win)
        else:
            cache_key = (key, i)
            if cache_key not in frozen:
                fmap = losses.pixel_frame_map(lay.depth, lay.T_final, lay.view_map, slot_cams)
                sigma = win.sigma3d if win.sigma3d is not None else losses.auto_sigma3d(fmap, slot_cams, lay.view_map, win)
                wts, centers, _ = losses.weights_3d(fmap, sigma, win)
                frozen[cache_key] = (wts, centers)
            v, g, _ = losses.dssim3d(lay.color, tgt, lay.depth, lay.T_final, lay.view_map, slot_cams, win,
                                     weights=frozen[cache_key])
        total += v / len(parts)
        grad[req] += g[lay.valid] / len(parts)
    return total, grad


def loss_terms(mode: str, lam: float) -> dict[str, float]:
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    if mode == "mix":
        return dict(MIX_WEIGHTS)
    if mode == "l1_dssim":
        return {"l1": 1.0 - lam, "dssim": lam}
    if mode == "l1_dssim3d":
        return {"l1": 1.0 - lam, "dssim3d": lam}
    return {mode: 1.0}


def evaluate(plan: RenderPlan, cloud: GaussianCloud, cams: Sequence[Camera], images: Sequence[np.ndarray], *,
             loss_mode: str = "l1", lam: float = 0.2, win: SsimWindow = losses.DEFAULT_WINDOW,
             depths: Sequence[np.ndarray] | None = None, workers: int | None = 1, with_grad: bool = True,
             frozen: dict | None = None, early_stop: bool = True) -> ObjectiveResult:
    """Loss of ``cloud`` on the requests of ``plan`` and, optionally, its gradients.

    ``frozen`` caches the distance-aware SSIM windows; pass the dict from a
    previous result to hold them fixed while probing nearby parameters.
    """
    terms = loss_terms(loss_mode, lam)
    output = render(plan, cloud, cams, workers=workers, early_stop=early_stop)
    targets = gather_targets(plan, images)
    frozen = {} if frozen is None else frozen
    parts: dict[str, float] = {}
    d_color = np.zeros((plan.n_requests, 3))
    d_depth = np.zeros(plan.n_requests)
    for name, wt in terms.items():
        if name == "l1":
            v, g = losses.l1(output.color, targets)
        elif name == "l2":
            v, g = losses.l2(output.color, targets)
        elif name in ("dssim", "dssim3d"):
            v, g = _ssim_term(name, plan, output, targets, cams, win, frozen, name)
        elif name == "depth":
            if depths is None:
                continue
            tgt_d = np.empty(plan.n_requests)
            for b, vid in enumerate(plan.views):
                sel = plan.request_view == b
                tgt_d[sel] = np.asarray(depths[vid]).reshape(-1)[plan.index_array[sel]]
            v, gd = losses.l2(output.depth, tgt_d)
            parts[name] = v
            d_depth += wt * gd
            continue
        parts[name] = v
        d_color += wt * g
    total = float(sum(terms[k] * v for k, v in parts.items()))
    grads = acc = None
    if with_grad:
        grads, acc = backward(output, cloud, cams, d_color, d_depth, workers=workers)
    return ObjectiveResult(total, parts, grads, acc, output, frozen)
