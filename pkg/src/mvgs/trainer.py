"""Optimisation loop: batches, Adam, densification, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .batchvar import MiniBatchSpec, draw_rng, sample_batch
from .densify import ADC_CSV_HEADER, AdcConfig, AdcReport, adc_step, calibrate_thresholds, opacity_reset
from .gradients import GradAccumulator, ParamGrads
from .losses import DEFAULT_WINDOW, SsimWindow, ssim
from .objective import LOSS_MODES, evaluate
from .rasterizer import make_plan, render
from .scene import (Camera, GaussianCloud, Image, SceneDataset, format_scene, logit, make_synthetic,
                    parse_scene)

log = logging.getLogger(__name__)

METRICS_CSV_HEADER = "iter,loss,psnr,ssim,n_gauss,iter_ms"
PSNR_CAP = 99.0


@dataclass
class LrConfig:
    mean: float = 1.6e-4
    mean_final: float = 1.6e-6
    log_scale: float = 5e-3
    quat: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3

    def __post_init__(self):
        if min(dataclasses.astuple(self)) <= 0:
            raise ValueError("learning rates must be positive")

    def at(self, it: int, total: int) -> dict[str, float]:
        frac = min(max(it / max(total, 1), 0.0), 1.0)
        mean = math.exp((1 - frac) * math.log(self.mean) + frac * math.log(self.mean_final))
        return {"means": mean, "log_scales": self.log_scale, "quats": self.quat,
                "opacity_logits": self.opacity, "colors": self.color}


@dataclass
class InitConfig:
    """Starting cloud: ground-truth centers jittered by ``noise`` (a stand-in for SfM points)."""

    noise: float = 0.05
    scale: float = 0.05
    opacity: float = 0.1
    color: float = 0.5


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: LrConfig = field(default_factory=LrConfig)
    lam: float = 0.2
    loss_mode: str = "l1_dssim3d"
    batch: MiniBatchSpec = field(default_factory=MiniBatchSpec)
    adc: AdcConfig = field(default_factory=AdcConfig)
    ssim: SsimWindow = field(default_factory=lambda: DEFAULT_WINDOW)
    init: InitConfig = field(default_factory=InitConfig)
    eval_every: int = 100
    holdout_every: int = 8
    seed: int = 0
    max_gaussians: int = 5000
    workers: int = 1

    def __post_init__(self):
        if not 0 <= self.lam < 1:
            raise ValueError("lam must be in [0, 1)")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.iterations < 0 or self.eval_every < 1:
            raise ValueError("iterations must be >= 0 and eval_every >= 1")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-15

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "AdamState":
        p = cloud.params()
        return cls({k: np.zeros_like(a) for k, a in p.items()}, {k: np.zeros_like(a) for k, a in p.items()})

    def remap(self, origin: np.ndarray) -> None:
        """Follow a densification: rows with ``origin < 0`` are new and start from zero."""
        fresh = origin < 0
        src = np.where(fresh, 0, origin)
        for d in (self.m, self.v):
            for k, a in d.items():
                b = a[src] if len(a) else np.zeros((len(origin),) + a.shape[1:])
                b[fresh] = 0.0
                d[k] = b


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lrs: dict[str, float]) -> None:
    """One bias-corrected Adam update of ``params`` in place."""
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lrs[k] * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# metrics


def psnr(rendered, target) -> float:
    mse = float(np.mean((np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_eval(rendered, target, win: SsimWindow = DEFAULT_WINDOW) -> float:
    return ssim(rendered, target, win)


# ---------------------------------------------------------------------------
# data


def render_views(cloud: GaussianCloud, cams: Sequence[Camera], views: Sequence[int] | None = None,
                 workers: int | None = 1):
    """Full renders of ``views``: list of (image (H, W, 3), depth (H, W), T (H, W))."""
    views = range(len(cams)) if views is None else views
    out = []
    for v in views:
        cam = cams[v]
        plan = make_plan([v], cam.width, cam.height, "full")
        o = render(plan, cloud, cams, workers=workers)
        out.append((o.image(0), o.depth_image(0), _grid(o, o.T_final)))
    return out


def _grid(o, values):
    p = o.plan
    g = np.ones(p.width * p.height)
    g[p.index_array] = values
    return g.reshape(p.height, p.width)


def make_dataset(seed: int, n_gaussians: int = 200, n_cameras: int = 16, *, width: int = 64, height: int = 64,
                 layout: str = "orbit", workers: int | None = 1) -> SceneDataset:
    """Synthetic scene plus ground-truth renders from every camera."""
    cloud, cams = make_synthetic(seed, n_gaussians, n_cameras, layout, width=width, height=height)
    images = [Image(width, height, img, depth) for img, depth, _ in render_views(cloud, cams, workers=workers)]
    return SceneDataset(cams, images, name=f"synthetic-{seed}", gaussians=cloud)


def split_views(n: int, holdout_every: int) -> tuple[list[int], list[int]]:
    test = [i for i in range(n) if holdout_every > 0 and i % holdout_every == 0]
    train = [i for i in range(n) if i not in test]
    return train, test


def initial_cloud(dataset: SceneDataset, init: InitConfig, rng: np.random.Generator) -> GaussianCloud:
    if dataset.gaussians is not None:
        centers = np.asarray(dataset.gaussians.means) + rng.normal(scale=init.noise, size=dataset.gaussians.means.shape)
    else:
        d = rng.normal(size=(200, 3))
        centers = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(size=(200, 1)) ** (1 / 3)
    n = len(centers)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud(centers, np.full((n, 3), math.log(init.scale)), quats,
                         np.full(n, float(logit(init.opacity))), np.full((n, 3), init.color))


# ---------------------------------------------------------------------------
# loop


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, indices: np.ndarray, dump_path: Path | None):
        self.iteration = iteration
        self.indices = indices
        self.dump_path = dump_path
        where = f"; dump written to {dump_path}" if dump_path else ""
        super().__init__(f"non-finite loss or gradient at iteration {iteration}, "
                         f"splats {indices[:20].tolist()}{where}")


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    psnr: float
    ssim: float
    n_gauss: int
    iter_ms: float

    def csv_row(self) -> str:
        return (f"{self.iteration},{self.loss:.10g},{self.psnr:.10g},{self.ssim:.10g},"
                f"{self.n_gauss},{self.iter_ms:.3f}")


class Trainer:
    """Stateful training run; ``step`` advances one iteration."""

    def __init__(self, cfg: TrainConfig, dataset: SceneDataset, out_dir: Path | None = None):
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.cams = dataset.cameras
        self.images = [im.pixels for im in dataset.images]
        self.depths = [im.depth for im in dataset.images]
        self.train_views, self.test_views = split_views(len(self.cams), cfg.holdout_every)
        if not self.train_views:
            raise ValueError("no training views left after the holdout split")
        self.adc_cfg = dataclasses.replace(cfg.adc, batch_views=cfg.batch.views_per_batch)
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.cloud = initial_cloud(dataset, cfg.init, self.rng)
        self.adam = AdamState.zeros_like(self.cloud)
        self.acc = GradAccumulator.zeros(len(self.cloud))
        self.iteration = 0
        self.history: list[MetricsRow] = []
        self.adc_history: list[AdcReport] = []
        self.last_loss = math.nan

    # -- evaluation
    def evaluate_holdout(self) -> tuple[float, float]:
        if not self.test_views:
            return math.nan, math.nan
        ps, ss = [], []
        for v, (img, _, _) in zip(self.test_views, render_views(self.cloud, self.cams, self.test_views,
                                                                 self.cfg.workers)):
            ps.append(psnr(img, self.images[v]))
            ss.append(ssim_eval(img, self.images[v], self.cfg.ssim))
        return float(np.mean(ps)), float(np.mean(ss))

    def dataset_loss(self, views: Sequence[int] | None = None) -> float:
        """Mean full-image loss over ``views`` (default: training views)."""
        views = self.train_views if views is None else views
        vals = []
        for v in views:
            cam = self.cams[v]
            plan = make_plan([v], cam.width, cam.height, "full", self.cfg.batch.tile_size)
            vals.append(evaluate(plan, self.cloud, self.cams, self.images, loss_mode=self.cfg.loss_mode,
                                 lam=self.cfg.lam, win=self.cfg.ssim, workers=self.cfg.workers,
                                 with_grad=False).loss)
        return float(np.mean(vals))

    # -- one iteration
    def step(self) -> float:
        cfg = self.cfg
        it = self.iteration + 1
        t0 = time.perf_counter()
        plan = sample_batch(cfg.batch, self.cams, draw_rng(cfg.seed, it), self.train_views)
        res = evaluate(plan, self.cloud, self.cams, self.images, loss_mode=cfg.loss_mode, lam=cfg.lam,
                       win=cfg.ssim, workers=cfg.workers)
        if not math.isfinite(res.loss) or not res.grads.is_finite():
            self._diverged(it, res.grads)
        self.acc.merge(res.acc)
        adam_step(self.cloud.params(), res.grads.as_dict(), self.adam, cfg.lr.at(it, cfg.iterations))
        self.cloud.normalize_quats()
        self.iteration = it
        self._maybe_densify(it)
        self.last_loss = res.loss
        ms = (time.perf_counter() - t0) * 1e3
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            p, s = self.evaluate_holdout()
            self.history.append(MetricsRow(it, res.loss, p, s, len(self.cloud), ms))
            log.info("iter %d loss %.5f psnr %.3f ssim %.4f n %d", it, res.loss, p, s, len(self.cloud))
        return res.loss

    def _maybe_densify(self, it: int) -> None:
        a = self.adc_cfg
        if a.due(it):
            if a.metric_mode == "multi_view" and (a.grad_threshold_split is None or a.grad_threshold_clone is None):
                ts, tc = calibrate_thresholds(self.acc, a)
                self.adc_cfg = a = dataclasses.replace(
                    a, grad_threshold_split=a.grad_threshold_split if a.grad_threshold_split is not None else ts,
                    grad_threshold_clone=a.grad_threshold_clone if a.grad_threshold_clone is not None else tc)
                log.info("calibrated thresholds: split %.3g clone %.3g", a.grad_threshold_split,
                         a.grad_threshold_clone)
            new, report, origin = adc_step(self.cloud, self.acc, a, self.rng, it, self.cfg.max_gaussians)
            self.cloud = new
            self.adam.remap(origin)
            self.adc_history.append(report)
        if a.enabled and a.opacity_reset_interval > 0 and it % a.opacity_reset_interval == 0 and it <= a.stop_iter:
            opacity_reset(self.cloud, a.opacity_reset_value)

    def _diverged(self, it: int, grads: ParamGrads) -> None:
        bad = grads.nonfinite_rows()
        bad_params = np.nonzero(~np.isfinite(self.cloud.opacity_logits) | ~np.isfinite(self.cloud.means).all(axis=1))[0]
        bad = np.union1d(bad, bad_params)
        path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / f"nan_dump_{it}.txt"
            lines = [f"iteration {it}", f"indices {' '.join(map(str, bad))}"]
            for i in bad:
                g = self.cloud[int(i)]
                lines.append(f"{i} mean {g.mean.tolist()} log_scale {g.log_scale.tolist()} "
                             f"quat {g.rotation.tolist()} opacity_logit {g.opacity_logit} color {g.color.tolist()}")
            path.write_text("\n".join(lines) + "\n")
        raise TrainingDiverged(it, bad, path)

    def run(self, iterations: int | None = None) -> list[MetricsRow]:
        target = self.cfg.iterations if iterations is None else self.iteration + iterations
        while self.iteration < target:
            self.step()
        return self.history

    # -- csv
    def metrics_csv(self) -> str:
        return METRICS_CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in self.history)

    def adc_csv(self) -> str:
        return ADC_CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in self.adc_history)

    # -- checkpoints
    def checkpoint_text(self) -> str:
        parts = [format_scene(self.cloud, self.cams)]
        names = GaussianCloud.PARAM_NAMES
        parts.append(f"moments {len(self.cloud)} {self.adam.t}\n")
        for i in range(len(self.cloud)):
            row = [x for k in names for x in np.ravel(self.adam.m[k][i])]
            row += [x for k in names for x in np.ravel(self.adam.v[k][i])]
            parts.append(" ".join(format(float(x), ".17g") for x in row) + "\n")
        parts.append(f"accumulator {len(self.acc)}\n")
        for i in range(len(self.acc)):
            row = (self.acc.e_old_sum[i], self.acc.e2_sum[i], self.acc.norm_sum[i], self.acc.denom[i],
                   self.acc.max_screen_radius[i])
            parts.append(" ".join(format(float(x), ".17g") for x in row) + "\n")
        st = self.rng.bit_generator.state
        parts.append(f"rng {st['state']['state']} {st['state']['inc']} {st['has_uint32']} {st['uinteger']}\n")
        ts = self.adc_cfg.grad_threshold_split
        tc = self.adc_cfg.grad_threshold_clone
        parts.append(f"thresholds {format(ts if ts is not None else math.nan, '.17g')} "
                     f"{format(tc if tc is not None else math.nan, '.17g')}\n")
        parts.append(f"iteration {self.iteration}\n")
        parts.append(f"config {cfgmod.config_hash(self.cfg)}\n")
        return "".join(parts)

    def save_checkpoint(self, path) -> None:
        Path(path).write_text(self.checkpoint_text(), encoding="utf-8")

    @classmethod
    def resume(cls, path, cfg: TrainConfig, dataset: SceneDataset, out_dir: Path | None = None) -> "Trainer":
        text = Path(path).read_text(encoding="utf-8")
        head, sep, tail = text.partition("\nmoments ")
        if not sep:
            raise ValueError(f"{path}: no moments section")
        cloud, _, _ = parse_scene(head + "\n", renormalize=False)
        lines = ("moments " + tail).splitlines()
        n, t = (int(x) for x in lines[0].split()[1:3])
        tr = cls(cfg, dataset, out_dir)
        tr.cloud = cloud
        tr.adam = AdamState.zeros_like(cloud)
        tr.adam.t = t
        widths = [a.shape[1] if a.ndim == 2 else 1 for a in cloud.params().values()]
        for i in range(n):
            vals = np.array([float(x) for x in lines[1 + i].split()])
            half = len(vals) // 2
            for moments, chunk in ((tr.adam.m, vals[:half]), (tr.adam.v, vals[half:])):
                pos = 0
                for k, w in zip(GaussianCloud.PARAM_NAMES, widths):
                    moments[k][i] = chunk[pos:pos + w] if w > 1 else chunk[pos]
                    pos += w
        pos = 1 + n
        na = int(lines[pos].split()[1])
        tr.acc = GradAccumulator.zeros(na)
        for i in range(na):
            e_old, e2, ns, den, rad = (float(x) for x in lines[pos + 1 + i].split())
            tr.acc.e_old_sum[i], tr.acc.e2_sum[i], tr.acc.norm_sum[i] = e_old, e2, ns
            tr.acc.denom[i], tr.acc.max_screen_radius[i] = den, rad
        pos += 1 + na
        fields = {ln.split()[0]: ln.split()[1:] for ln in lines[pos:]}
        s, inc, has, uint = fields["rng"]
        tr.rng.bit_generator.state = {"bit_generator": "PCG64", "state": {"state": int(s), "inc": int(inc)},
                                      "has_uint32": int(has), "uinteger": int(uint)}
        ts, tc = (float(x) for x in fields["thresholds"])
        tr.adc_cfg = dataclasses.replace(tr.adc_cfg, grad_threshold_split=None if math.isnan(ts) else ts,
                                         grad_threshold_clone=None if math.isnan(tc) else tc)
        tr.iteration = int(fields["iteration"][0])
        if fields["config"][0] != cfgmod.config_hash(cfg):
            log.warning("checkpoint was written under a different configuration")
        return tr


def train(cfg: TrainConfig, dataset: SceneDataset, out_dir: Path | None = None) -> tuple[GaussianCloud, list[MetricsRow]]:
    """Run ``cfg.iterations`` steps; returns the final cloud and the metrics history."""
    tr = Trainer(cfg, dataset, out_dir)
    tr.run()
    return tr.cloud, tr.history
