"""Mini-batch sampling and gradient-variance experiments.

Two strategies build a batch worth one image of pixels: a whole single
view, or ``B`` views whose pixels are split disjointly inside every tile.
The rest of the module measures how much the resulting stochastic
gradients scatter, and checks the sampling lemma (drawing from more
distinct groups lowers the variance of the sample mean) exactly on small
finite-support cases.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rasterizer import RenderPlan, make_plan
from .scene import Camera, GaussianCloud

STRATEGIES = ("single_view", "multi_view")


@dataclass(frozen=True)
class MiniBatchSpec:
    strategy: str = "multi_view"
    views_per_batch: int = 4
    pixels_per_batch: int | None = None  # None: one full image
    seed: int = 0
    tile_size: int = 16
    mode: str = "thread_efficient"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.strategy == "single_view" and self.views_per_batch != 1:
            object.__setattr__(self, "views_per_batch", 1)
        if self.views_per_batch < 1:
            raise ValueError("views_per_batch must be >= 1")


def draw_rng(seed: int, draw: int) -> np.random.Generator:
    """Independent stream for draw number ``draw`` under ``seed``."""
    return np.random.default_rng([seed, draw])


def _tile_pixels(width: int, height: int, tile_size: int) -> list[np.ndarray]:
    idx = np.arange(width * height).reshape(height, width)
    return [idx[y:y + tile_size, x:x + tile_size].ravel()
            for y in range(0, height, tile_size) for x in range(0, width, tile_size)]


def _allocate(total: int, sizes: np.ndarray) -> np.ndarray:
    """Split ``total`` over bins proportionally to ``sizes`` (largest remainder)."""
    raw = total * sizes / sizes.sum()
    base = np.floor(raw).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


def split_pixels(width: int, height: int, n_views: int, rng: np.random.Generator, tile_size: int = 16,
                 budget: int | None = None) -> list[np.ndarray]:
    """Per-view pixel sets, disjoint within each tile, ``budget`` pixels in total."""
    tiles = _tile_pixels(width, height, tile_size)
    budget = width * height if budget is None else int(budget)
    if not 0 < budget <= width * height:
        raise ValueError("pixel budget must be in (0, width*height]")
    counts = _allocate(budget, np.array([len(t) for t in tiles], dtype=np.float64))
    sets: list[list[np.ndarray]] = [[] for _ in range(n_views)]
    for tile, c in zip(tiles, counts):
        chosen = rng.permutation(tile)[:c]
        for b, part in enumerate(np.array_split(chosen, n_views)):
            sets[b].append(part)
    return [np.sort(np.concatenate(s)) for s in sets]


def sample_batch(spec: MiniBatchSpec, dataset, rng: np.random.Generator,
                 views: Sequence[int] | None = None) -> RenderPlan:
    """Plan for one mini-batch drawn from ``views`` (default: all cameras of ``dataset``)."""
    cams = dataset.cameras if hasattr(dataset, "cameras") else dataset
    pool = np.arange(len(cams)) if views is None else np.asarray(views)
    width, height = cams[int(pool[0])].width, cams[int(pool[0])].height
    if spec.strategy == "single_view":
        v = int(pool[rng.integers(len(pool))])
        if spec.pixels_per_batch is None or spec.pixels_per_batch >= width * height:
            return make_plan([v], width, height, "full", spec.tile_size)
        sets = split_pixels(width, height, 1, rng, spec.tile_size, spec.pixels_per_batch)
        return make_plan([v], width, height, spec.mode, spec.tile_size, sets)
    if spec.views_per_batch > len(pool):
        raise ValueError(f"batch of {spec.views_per_batch} views from only {len(pool)} views")
    chosen = [int(x) for x in rng.choice(pool, size=spec.views_per_batch, replace=False)]
    sets = split_pixels(width, height, len(chosen), rng, spec.tile_size, spec.pixels_per_batch)
    return make_plan(chosen, width, height, spec.mode, spec.tile_size, sets)


# ---------------------------------------------------------------------------
# gradient variance


@dataclass
class VarianceReport:
    n_samples: int
    mean_sq_norm: float
    sq_norm_of_mean: float
    variance: float
    strategy: str = ""
    views_per_batch: int = 0
    seed: int = 0

    def csv_row(self) -> str:
        return f"{self.strategy},{self.views_per_batch},{self.seed},{self.n_samples},{self.variance:.12g}"


VARIANCE_CSV_HEADER = "strategy,B,seed,n_samples,variance"


def variance_from_gradients(grads: Sequence[np.ndarray] | np.ndarray, **meta) -> VarianceReport:
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2 or len(g) < 2:
        raise ValueError("need at least two gradient vectors")
    msn = float(np.mean(np.sum(g * g, axis=1)))
    mean = g.mean(axis=0)
    snm = float(mean @ mean)
    var = msn - snm
    if var < -1e-9 * max(msn, 1.0):
        raise ArithmeticError(f"negative variance {var}")
    return VarianceReport(len(g), msn, snm, max(var, 0.0), **meta)


def variance_two_pass(grads) -> float:
    g = np.asarray(grads, dtype=np.float64)
    d = g - g.mean(axis=0)
    return float(np.mean(np.sum(d * d, axis=1)))


def estimate_grad_variance(cloud: GaussianCloud, cams: Sequence[Camera], images: Sequence[np.ndarray],
                           spec: MiniBatchSpec, n_samples: int, *, views: Sequence[int] | None = None,
                           param: str = "means", loss_mode: str = "l1", lam: float = 0.2,
                           workers: int | None = 1) -> VarianceReport:
    """Monte-Carlo variance of mini-batch gradients with ``cloud`` held fixed."""
    from .objective import evaluate

    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    vecs = []
    for k in range(n_samples):
        plan = sample_batch(spec, cams, draw_rng(spec.seed, k), views)
        res = evaluate(plan, cloud, cams, images, loss_mode=loss_mode, lam=lam, workers=workers)
        vecs.append(res.grads.as_dict()[param].ravel().copy())
    return variance_from_gradients(vecs, strategy=spec.strategy, views_per_batch=spec.views_per_batch,
                                   seed=spec.seed)


# ---------------------------------------------------------------------------
# sampling lemma


@dataclass
class LemmaOneSetup:
    """``N`` finite-support distributions; row ``i`` of ``values``/``probs`` is one of them."""

    values: np.ndarray  # (N, s)
    probs: np.ndarray  # (N, s)
    samples_per_set: int = 1  # K

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if self.values.shape != self.probs.shape:
            raise ValueError("values and probs must have the same shape")
        if not np.allclose(self.probs.sum(axis=1), 1.0):
            raise ValueError("each row of probs must sum to 1")

    @property
    def n_dists(self) -> int:
        return len(self.values)

    @property
    def means(self) -> np.ndarray:
        return (self.values * self.probs).sum(axis=1)

    @property
    def variances(self) -> np.ndarray:
        return (self.values**2 * self.probs).sum(axis=1) - self.means**2

    @property
    def sigma_mu2(self) -> float:
        return float(np.var(self.means))

    def valid_ms(self) -> list[int]:
        nk = self.n_dists * self.samples_per_set
        return [m for m in range(1, self.n_dists + 1) if nk % m == 0]

    def check_m(self, m: int) -> int:
        nk = self.n_dists * self.samples_per_set
        if not 1 <= m <= self.n_dists or nk % m:
            raise ValueError(f"m={m} must divide N*K={nk} and be at most N={self.n_dists}")
        return nk // m


def lemma1_closed_form(setup: LemmaOneSetup, m: int) -> float:
    n, k = setup.n_dists, setup.samples_per_set
    setup.check_m(m)
    first = k / n**2 * setup.variances.sum()
    if n == 1:
        return float(first)
    return float(first + k * k * setup.sigma_mu2 / (n - 1) * (n / m - 1))


def lemma1_enumerate(setup: LemmaOneSetup, m: int, max_states: int = 10**6) -> float:
    """Exact variance of the scaled sample mean by listing every subset and outcome."""
    per = setup.check_m(m)
    n, s = setup.values.shape
    subsets = list(itertools.combinations(range(n), m))
    n_states = len(subsets) * s ** (per * m)
    if n_states > max_states:
        raise ValueError(f"{n_states} states exceed the enumeration limit")
    ps, zs = [], []
    p_subset = 1.0 / len(subsets)
    for subset in subsets:
        dists = [d for d in subset for _ in range(per)]
        for outcome in itertools.product(range(s), repeat=len(dists)):
            p = p_subset
            z = 0.0
            for d, o in zip(dists, outcome):
                p *= setup.probs[d, o]
                z += setup.values[d, o]
            ps.append(p)
            zs.append(z / n)
    # two passes: E[z^2] - E[z]^2 cancels badly when the variance is near zero
    ps, zs = np.array(ps), np.array(zs)
    mean = ps @ zs
    return float(ps @ (zs - mean) ** 2)


def lemma1_sample(setup: LemmaOneSetup, m: int, n_trials: int, rng: np.random.Generator) -> np.ndarray:
    """``n_trials`` draws of the scaled sample mean."""
    per = setup.check_m(m)
    n, s = setup.values.shape
    # a random m-subset per trial: first m entries of a random permutation
    subsets = np.sort(np.argsort(rng.random((n_trials, n)), axis=1)[:, :m], axis=1)
    dists = np.repeat(subsets, per, axis=1)
    cdf = np.cumsum(setup.probs, axis=1)
    u = rng.random(dists.shape)
    outcome = (u[..., None] > cdf[dists]).sum(axis=-1)
    outcome = np.minimum(outcome, s - 1)
    return setup.values[dists, outcome].sum(axis=1) / n


@dataclass
class LemmaOneRow:
    m: int
    var_mc: float
    ci_half: float
    var_exact: float | None
    resolution: float = 0.0  # smallest variance a double can resolve at this sample scale

    def agrees(self, k: float = 3.0) -> bool:
        """Monte-Carlo estimate within ``k`` interval half-widths of the exact value."""
        if self.var_exact is None:
            raise ValueError(f"no exact value for m={self.m}")
        return abs(self.var_mc - self.var_exact) <= k * self.ci_half + self.resolution

    def csv_row(self) -> str:
        exact = "" if self.var_exact is None else f"{self.var_exact:.12g}"
        return f"{self.m},{self.var_mc:.12g},{exact},{self.ci_half:.12g}"


LEMMA1_CSV_HEADER = "m,var_mc,var_exact,ci_half"
Z99 = 2.5758293035489004


def lemma1_experiment(setup: LemmaOneSetup, n_trials: int, rng: np.random.Generator,
                      ms: Sequence[int] | None = None, n_batches: int = 50) -> list[LemmaOneRow]:
    """Monte-Carlo variance per ``m`` with a 99% batch-means interval, plus the exact value when enumerable."""
    ms = setup.valid_ms() if ms is None else list(ms)
    rows = []
    for m in ms:
        setup.check_m(m)
        z = lemma1_sample(setup, m, n_trials, rng)
        batch_vars = np.array([np.var(b) for b in np.array_split(z, n_batches)])
        ci = Z99 * batch_vars.std(ddof=1) / math.sqrt(n_batches)
        try:
            exact = lemma1_enumerate(setup, m)
        except ValueError:
            exact = None
        res = 16 * np.finfo(np.float64).eps * float(np.mean(z * z))
        rows.append(LemmaOneRow(m, float(np.var(z)), float(ci), exact, res))
    return rows
