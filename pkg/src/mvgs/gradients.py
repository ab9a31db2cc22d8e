"""Backward pass from per-pixel loss gradients to splat parameters.

Positional gradients are also collected in NDC units for densification:
per view the vector sum over that view's pixels, and per splat the sum of
per-pixel norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from ._pool import run_blocks
from .projection import project_views_backward
from .rasterizer import RenderOutput
from .scene import Camera, GaussianCloud


class MissingForwardState(RuntimeError):
    pass


@dataclass
class ParamGrads:
    d_mean: np.ndarray
    d_log_scale: np.ndarray
    d_quat: np.ndarray
    d_opacity_logit: np.ndarray
    d_color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ParamGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def as_dict(self) -> dict[str, np.ndarray]:
        # keyed like GaussianCloud.params()
        return {"means": self.d_mean, "log_scales": self.d_log_scale, "quats": self.d_quat,
                "opacity_logits": self.d_opacity_logit, "colors": self.d_color}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.as_dict().values()])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.as_dict().values())

    def nonfinite_rows(self) -> np.ndarray:
        bad = np.zeros(len(self.d_opacity_logit), dtype=bool)
        for a in self.as_dict().values():
            bad |= ~np.isfinite(a.reshape(len(bad), -1)).all(axis=1)
        return np.nonzero(bad)[0]

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(*(a + b for a, b in zip(self.as_dict().values(), other.as_dict().values())))

    def scaled(self, s: float) -> "ParamGrads":
        return ParamGrads(*(a * s for a in self.as_dict().values()))


@dataclass
class GradAccumulator:
    """Densification statistics, folded once per optimisation step.

    For each step the per-view NDC gradient sums of that step are kept in
    ``vec_sum_per_view`` (one row per batch view) and folded into three
    running scalars per splat: the norm of the total (``e_old_sum``), the sum
    of per-view norms (``e2_sum``) and the sum of per-pixel norms
    (``norm_sum``).  ``denom`` counts steps in which the splat was visible.
    """

    e_old_sum: np.ndarray
    e2_sum: np.ndarray
    norm_sum: np.ndarray
    denom: np.ndarray
    max_screen_radius: np.ndarray
    views: list[int] = field(default_factory=list)
    vec_sum_per_view: np.ndarray | None = None  # (B, G, 2), latest step only

    @classmethod
    def zeros(cls, n: int) -> "GradAccumulator":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))

    def __len__(self) -> int:
        return len(self.denom)

    def fold(self, views: Sequence[int], vec: np.ndarray, norms: np.ndarray, visible: np.ndarray,
             radius: np.ndarray | None = None) -> None:
        """Add one step: ``vec`` (B, G, 2) per-view sums, ``norms`` (G,) per-pixel norm sums."""
        vec = np.asarray(vec, dtype=np.float64)
        self.views = list(views)
        self.vec_sum_per_view = vec
        self.e_old_sum += np.linalg.norm(vec.sum(axis=0), axis=-1)
        self.e2_sum += np.linalg.norm(vec, axis=-1).sum(axis=0)
        self.norm_sum += norms
        self.denom += np.asarray(visible, dtype=bool)
        if radius is not None:
            np.maximum(self.max_screen_radius, radius, out=self.max_screen_radius)

    def merge(self, other: "GradAccumulator") -> None:
        self.e_old_sum += other.e_old_sum
        self.e2_sum += other.e2_sum
        self.norm_sum += other.norm_sum
        self.denom += other.denom
        np.maximum(self.max_screen_radius, other.max_screen_radius, out=self.max_screen_radius)
        if other.vec_sum_per_view is not None:
            self.views = list(other.views)
            self.vec_sum_per_view = other.vec_sum_per_view

    def reset(self, n: int | None = None) -> None:
        n = len(self) if n is None else n
        fresh = GradAccumulator.zeros(n)
        self.__dict__.update(fresh.__dict__)

    def take(self, idx) -> "GradAccumulator":
        idx = np.asarray(idx)
        return GradAccumulator(self.e_old_sum[idx], self.e2_sum[idx], self.norm_sum[idx], self.denom[idx],
                               self.max_screen_radius[idx])

    def check(self, tol: float = 1e-12) -> None:
        """Triangle inequalities that must hold for any reachable state."""
        scale = 1.0 + self.norm_sum
        if np.any(self.e_old_sum > self.e2_sum + tol * scale) or np.any(self.e2_sum > self.norm_sum + tol * scale):
            raise AssertionError("accumulator violates e_old <= e2 <= e1")


class DensifyMetrics(NamedTuple):
    e_old: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    empty: np.ndarray  # True where nothing was accumulated


def densify_metrics(acc: GradAccumulator) -> DensifyMetrics:
    empty = acc.denom <= 0
    d = np.where(empty, 1.0, acc.denom)
    z = lambda a: np.where(empty, 0.0, a / d)  # noqa: E731
    return DensifyMetrics(z(acc.e_old_sum), z(acc.norm_sum), z(acc.e2_sum), empty)


def backward(output: RenderOutput, gaussians: GaussianCloud, cams: Sequence[Camera], dL_dcolor: np.ndarray,
             dL_ddepth: np.ndarray | None = None, *, workers: int | None = 1) -> tuple[ParamGrads, GradAccumulator]:
    """Gradients of a scalar loss given its per-request colour/depth gradients.

    ``output`` must come from :func:`render` on the same cloud and cameras.
    Returns the parameter gradients and a one-step accumulator.
    """
    st = output.state
    if st is None:
        raise MissingForwardState("backward needs the forward state of the same render")
    plan = output.plan
    n_req = plan.n_requests
    d_color = np.ascontiguousarray(dL_dcolor, dtype=np.float64).reshape(n_req, 3)
    d_depth = (np.zeros(n_req) if dL_ddepth is None
               else np.ascontiguousarray(dL_ddepth, dtype=np.float64).reshape(n_req))
    bins = st.bins
    n_e = len(bins.entry_gauss)
    e_mean2d = np.zeros((n_e, 2))
    e_conic = np.zeros((n_e, 3))
    e_opac = np.zeros(n_e)
    e_color = np.zeros((n_e, 3))
    e_depth = np.zeros(n_e)
    e_ndc = np.zeros((n_e, 2))
    e_norm = np.zeros(n_e)

    def work(k0, k1):
        _kernels.blend_backward_blocks(k0, k1, plan.block_view, plan.block_tile, plan.block_start, plan.block_end,
                                       plan.index_array, plan.width, plan.height, bins.n_tiles, bins.bin_start,
                                       bins.bin_end, bins.entry_gauss, st.mean2d, st.conic, st.opacity, st.colors,
                                       st.depth, st.early_stop, d_color, d_depth, e_mean2d, e_conic, e_opac,
                                       e_color, e_depth, e_ndc, e_norm)

    run_blocks(work, len(plan.block_view), workers)

    n_views = len(plan.views)
    n = len(gaussians)
    v_mean2d = np.zeros((n_views, n, 2))
    v_conic = np.zeros((n_views, n, 3))
    v_depth = np.zeros((n_views, n))
    v_ndc = np.zeros((n_views, n, 2))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    g_norm = np.zeros(n)
    _kernels.reduce_entries(bins.entry_view, bins.entry_gauss, e_mean2d, e_conic, e_opac, e_color, e_depth,
                            e_ndc, e_norm, v_mean2d, v_conic, v_depth, v_ndc, g_opac, g_color, g_norm)

    grads = ParamGrads.zeros(n)
    grads.d_mean, grads.d_log_scale, grads.d_quat = project_views_backward(gaussians, st.projected, v_mean2d,
                                                                           v_conic, v_depth)
    o = st.opacity
    grads.d_opacity_logit = g_opac * o * (1.0 - o)
    grads.d_color = g_color

    visible = st.projected.visible.any(axis=0)
    radius = st.projected.radius.max(axis=0)
    acc = GradAccumulator.zeros(n)
    acc.fold(plan.views, v_ndc, g_norm, visible, radius)
    return grads, acc
