"""Adaptive density control: clone, split, prune and opacity reset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .gradients import GradAccumulator, densify_metrics
from .projection import quat_to_rotmat
from .scene import GaussianCloud, logit

log = logging.getLogger(__name__)

METRIC_MODES = ("e_old", "multi_view")


@dataclass
class AdcConfig:
    grad_threshold: float = 2e-4
    # thresholds for the per-pixel (split) and per-view (clone) metrics; None = calibrate
    grad_threshold_split: float | None = None
    grad_threshold_clone: float | None = None
    size_threshold_world: float = 0.05
    split_factor: float = 1.6
    split_count: int = 2
    prune_opacity: float = 0.005
    prune_scale_max: float = 1.0
    interval: int = 100
    start_iter: int = 500
    stop_iter: int = 15000
    metric_mode: str = "e_old"
    batch_views: int = 1
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        if not 0 < self.prune_opacity < 1:
            raise ValueError("prune_opacity must be in (0, 1)")
        if self.split_count < 2:
            raise ValueError("split_count must be >= 2")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.metric_mode not in METRIC_MODES:
            raise ValueError(f"metric_mode must be one of {METRIC_MODES}")

    def due(self, it: int) -> bool:
        return self.enabled and self.start_iter <= it <= self.stop_iter and it % self.interval == 0


@dataclass
class AdcReport:
    iteration: int
    split: int
    cloned: int
    pruned: int
    total: int

    def csv_row(self) -> str:
        return f"{self.iteration},{self.split},{self.cloned},{self.pruned},{self.total}"


ADC_CSV_HEADER = "iter,split,clone,prune,total"


def calibrate_thresholds(acc: GradAccumulator, cfg: AdcConfig) -> tuple[float, float]:
    """Scale the base threshold so the new metrics fire about as often as the old one.

    The per-pixel-norm metric is never smaller than the per-view one, which in
    turn bounds the single-view metric, so each gets the base threshold times
    its median ratio to ``e_old`` over the splats that were seen.
    """
    m = densify_metrics(acc)
    seen = ~m.empty & (m.e_old > 0)
    if not seen.any():
        return cfg.grad_threshold, cfg.grad_threshold
    r1 = float(np.median(m.e1[seen] / m.e_old[seen]))
    r2 = float(np.median(m.e2[seen] / m.e_old[seen]))
    return cfg.grad_threshold * r1, cfg.grad_threshold * r2


def select(acc: GradAccumulator, cloud: GaussianCloud, cfg: AdcConfig) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (split, clone) masks; the size gate keeps them disjoint."""
    m = densify_metrics(acc)
    large = cloud.scales.max(axis=1) > cfg.size_threshold_world
    if cfg.metric_mode == "e_old":
        cand = m.e_old > cfg.grad_threshold
        return cand & large, cand & ~large
    ts = cfg.grad_threshold_split if cfg.grad_threshold_split is not None else cfg.grad_threshold
    tc = cfg.grad_threshold_clone if cfg.grad_threshold_clone is not None else cfg.grad_threshold
    return (m.e1 > ts) & large, (m.e2 > tc) & ~large


def _split_children(cloud: GaussianCloud, idx: np.ndarray, cfg: AdcConfig, rng: np.random.Generator) -> GaussianCloud:
    parent = cloud.take(np.repeat(idx, cfg.split_count))
    if len(idx) == 0:
        return parent
    rot = quat_to_rotmat(parent.quats)
    local = rng.normal(size=(len(parent), 3)) * parent.scales
    parent.means = parent.means + np.einsum("nij,nj->ni", rot, local)
    parent.log_scales = parent.log_scales - math.log(cfg.split_factor)
    return parent


def _priority(acc: GradAccumulator, cfg: AdcConfig) -> np.ndarray:
    """How far each splat's metric sits above its threshold, as a ratio."""
    m = densify_metrics(acc)
    if cfg.metric_mode == "e_old":
        return m.e_old / cfg.grad_threshold
    ts = cfg.grad_threshold_split if cfg.grad_threshold_split is not None else cfg.grad_threshold
    tc = cfg.grad_threshold_clone if cfg.grad_threshold_clone is not None else cfg.grad_threshold
    return np.maximum(m.e1 / ts, m.e2 / tc)


def _fit_cap(split, clone, priority, n, cap, split_count):
    # admit candidates by decreasing priority while the cap allows; ties by index
    cand = np.nonzero(split | clone)[0]
    order = cand[np.lexsort((cand, -priority[cand]))]
    cost = np.where(split[order], split_count - 1, 1)
    admit = order[np.cumsum(cost) <= max(cap - n, 0)]
    keep = np.zeros_like(split)
    keep[admit] = True
    return split & keep, clone & keep


def adc_step(cloud: GaussianCloud, acc: GradAccumulator, cfg: AdcConfig, rng: np.random.Generator,
             iteration: int = 0, max_gaussians: int | None = None) -> tuple[GaussianCloud, AdcReport, np.ndarray]:
    """One densification event.

    Returns the new cloud, the report and, for every surviving splat, its
    index in the old cloud (-1 for clones and split children, which start
    fresh).  ``acc`` is reset to the new size.
    """
    n = len(cloud)
    split, clone = select(acc, cloud, cfg)
    if max_gaussians is not None and n + (cfg.split_count - 1) * split.sum() + clone.sum() > max_gaussians:
        split, clone = _fit_cap(split, clone, _priority(acc, cfg), n, max_gaussians, cfg.split_count)
        log.info("densification trimmed at the %d splat cap", max_gaussians)
    split_idx = np.nonzero(split)[0]
    clone_idx = np.nonzero(clone)[0]
    keep_idx = np.nonzero(~split)[0]
    children = _split_children(cloud, split_idx, cfg, rng)
    new = GaussianCloud.concat([cloud.take(keep_idx), cloud.take(clone_idx), children])
    n_new = len(clone_idx) + len(children)
    origin = np.concatenate([keep_idx, np.full(n_new, -1)]).astype(np.int64)

    prune = (new.opacities < cfg.prune_opacity * cfg.batch_views) | (new.scales.max(axis=1) > cfg.prune_scale_max)
    survivors = np.nonzero(~prune)[0]
    new = new.take(survivors)
    origin = origin[survivors]
    report = AdcReport(iteration, len(split_idx), len(clone_idx), int(prune.sum()), len(new))
    assert report.total == n + cfg.split_count * report.split - report.split + report.cloned - report.pruned
    acc.reset(len(new))
    return new, report, origin


def opacity_reset(cloud: GaussianCloud, ceiling: float) -> None:
    """Clamp every opacity to at most ``ceiling`` (in place, through the logit)."""
    if not 0 < ceiling <= 1:
        raise ValueError("ceiling must be in (0, 1]")
    if ceiling >= 1:
        return
    cloud.opacity_logits = np.minimum(cloud.opacity_logits, logit(ceiling))
