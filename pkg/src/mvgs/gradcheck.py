"""Analytic gradients against central finite differences on small random scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .batchvar import split_pixels
from .objective import LOSS_MODES, evaluate
from .rasterizer import make_plan, render
from .scene import GaussianCloud, logit, look_at

GRADCHECK_LOSSES = ("l1", "l2", "dssim", "dssim3d", "mix")


@dataclass
class GradcheckResult:
    seed: int
    loss: str
    n_checked: int
    worst_rel: float
    worst_param: str
    worst_analytic: float
    worst_numeric: float
    rel_tol: float
    abs_tol: float

    @property
    def passed(self) -> bool:
        return self.worst_rel <= self.rel_tol

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status} seed={self.seed} loss={self.loss} checked={self.n_checked} worst={self.worst_param} "
                f"analytic={self.worst_analytic:.10g} numeric={self.worst_numeric:.10g} rel={self.worst_rel:.3g}")


def random_problem(seed: int, n_gaussians: int = 8, size: int = 12, n_views: int = 2):
    """Splats near the origin seen by ``n_views`` cameras, plus random targets."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.5, 0.5, size=(n_gaussians, 3))
    log_scales = np.log(rng.uniform(0.12, 0.35, size=(n_gaussians, 3)))
    q = rng.normal(size=(n_gaussians, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    opac = logit(rng.uniform(0.3, 0.9, size=n_gaussians))
    # keep colours away from the clamp so the loss is smooth in them
    colors = rng.uniform(0.1, 0.9, size=(n_gaussians, 3))
    cloud = GaussianCloud(means, log_scales, q, opac, colors)
    f = 0.5 * size / math.tan(math.radians(30.0))
    cams = []
    for k in range(n_views):
        theta = 2 * math.pi * k / n_views + rng.uniform(-0.3, 0.3)
        pos = 3.0 * np.array([math.cos(theta), rng.uniform(-0.3, 0.3), math.sin(theta)])
        cams.append(look_at(pos, fx=f, fy=f, width=size, height=size))
    images = [rng.uniform(0, 1, size=(size, size, 3)) for _ in range(n_views)]
    # depth targets near the rendered depth, so background pixels agree on the far-plane value
    depths = []
    for k in range(n_views):
        o = render(make_plan([k], size, size, "full", 8), cloud, cams)
        d = o.depth_image(0)
        depths.append(np.where(d >= cams[k].zfar, d, d + rng.normal(scale=0.3, size=d.shape)))
    sets = split_pixels(size, size, n_views, rng, tile_size=8)
    plan = make_plan(list(range(n_views)), size, size, "thread_efficient", 8, sets)
    return cloud, cams, images, depths, plan


def run_gradcheck(seed: int, loss: str = "mix", n_gaussians: int = 8, size: int = 12, n_views: int = 2,
                  h: float = 1e-6, rel_tol: float = 1e-4, abs_tol: float = 1e-7) -> GradcheckResult:
    """Compare every parameter's analytic gradient with a central difference of step ``h``.

    The distance-aware SSIM windows are computed once at the base point and
    held fixed, matching the constant-depth treatment in the backward pass.
    """
    if loss not in GRADCHECK_LOSSES or loss not in LOSS_MODES:
        raise ValueError(f"loss must be one of {GRADCHECK_LOSSES}")
    cloud, cams, images, depths, plan = random_problem(seed, n_gaussians, size, n_views)
    kw = dict(loss_mode=loss, depths=depths)
    base = evaluate(plan, cloud, cams, images, **kw)
    frozen = base.frozen
    analytic = base.grads.as_dict()

    def central(arr, idx, step):
        old = arr[idx]
        arr[idx] = old + step
        lp = evaluate(plan, cloud, cams, images, frozen=frozen, with_grad=False, **kw).loss
        arr[idx] = old - step
        lm = evaluate(plan, cloud, cams, images, frozen=frozen, with_grad=False, **kw).loss
        arr[idx] = old
        return (lp - lm) / (2 * step)

    def rel_err(a, num):
        mag = max(abs(a), abs(num))
        if mag <= abs_tol:
            return 0.0
        return abs(a - num) / mag

    worst = (0.0, "-", 0.0, 0.0)
    n = 0
    for name, arr in cloud.params().items():
        for idx in np.ndindex(arr.shape):
            a = float(analytic[name][idx])
            num = central(arr, idx, h)
            rel = rel_err(a, num)
            # a hard cutoff (alpha threshold, tile culling) inside [-h, h] makes the
            # difference quotient measure a jump: try smaller steps.  A tiny gradient
            # on an O(1) loss drowns in round-off: try larger ones.
            for step in (h / 10, h / 100, h * 10, h * 100):
                if rel <= rel_tol:
                    break
                num_s = central(arr, idx, step)
                if rel_err(a, num_s) < rel:
                    num, rel = num_s, rel_err(a, num_s)
            n += 1
            if rel > worst[0]:
                worst = (rel, f"{name}[{','.join(map(str, idx))}]", a, num)
    return GradcheckResult(seed, loss, n, worst[0], worst[1], worst[2], worst[3], rel_tol, abs_tol)
