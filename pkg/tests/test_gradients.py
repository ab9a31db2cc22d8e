import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvgs.batchvar import split_pixels
from mvgs.gradcheck import run_gradcheck
from mvgs.gradients import GradAccumulator, MissingForwardState, backward, densify_metrics
from mvgs.projection import grad_world_to_ndc
from mvgs.rasterizer import make_plan, render
from mvgs.scene import Camera, GaussianCloud, logit


def one_view(vecs):
    """Accumulator after one step where each pixel gradient hit a single splat."""
    acc = GradAccumulator.zeros(1)
    vecs = np.asarray(vecs, float)
    acc.fold([0], vecs.sum(axis=0)[None, None, :], np.array([np.linalg.norm(vecs, axis=1).sum()]),
             np.array([True]))
    return acc


def per_view(vecs_by_view):
    acc = GradAccumulator.zeros(1)
    sums = np.array([[np.sum(v, axis=0)] for v in vecs_by_view], dtype=float)
    norms = sum(np.linalg.norm(np.asarray(v, float), axis=1).sum() for v in vecs_by_view)
    acc.fold(range(len(vecs_by_view)), sums, np.array([norms]), np.array([True]))
    return acc


def test_single_pixel_metrics():
    m = densify_metrics(one_view([[3, 4]]))
    assert m.e_old[0] == m.e1[0] == m.e2[0] == 5.0


def test_cancellation_within_one_view():
    m = densify_metrics(one_view([[1, 0], [-1, 0]]))
    assert (m.e_old[0], m.e2[0], m.e1[0]) == (0.0, 0.0, 2.0)


def test_cancellation_across_views():
    m = densify_metrics(per_view([[[1, 0]], [[-1, 0]]]))
    assert (m.e_old[0], m.e2[0], m.e1[0]) == (0.0, 2.0, 2.0)


def test_empty_accumulator_flags():
    m = densify_metrics(GradAccumulator.zeros(3))
    assert m.empty.all() and not m.e1.any()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 6))
def test_metric_ordering_property(seed, n_views, n_steps):
    rng = np.random.default_rng(seed)
    g = 7
    acc = GradAccumulator.zeros(g)
    for _ in range(n_steps):
        pix = rng.normal(size=(n_views, g, rng.integers(1, 5), 2)) * rng.exponential(size=(1, g, 1, 1))
        acc.fold(range(n_views), pix.sum(axis=2), np.linalg.norm(pix, axis=-1).sum(axis=(0, 2)),
                 rng.uniform(size=g) < 0.9)
    acc.check(1e-12)
    m = densify_metrics(acc)
    assert np.all(m.e_old <= m.e2 + 1e-12) and np.all(m.e2 <= m.e1 + 1e-12)
    if n_views == 1:
        assert np.array_equal(m.e_old, m.e2)


def test_check_catches_broken_state():
    acc = GradAccumulator.zeros(1)
    acc.e_old_sum[:] = 2.0
    acc.e2_sum[:] = 1.0
    with pytest.raises(AssertionError):
        acc.check()


def opposite_cameras():
    c1 = Camera(np.eye(3), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    c2 = Camera(np.diag([-1.0, 1, -1]), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    return c1, c2


def test_opposite_pair_metrics():
    acc = GradAccumulator.zeros(1)
    vecs, norms = [], 0.0
    for cam in opposite_cameras():
        g = grad_world_to_ndc([1.0, 0, 0], cam.world_to_camera(np.zeros(3)), cam)
        vecs.append([g])
        norms += np.linalg.norm(g)
    vecs = np.array(vecs)
    assert np.all(np.abs(vecs.sum(axis=0)) <= 1e-10) and norms > 0
    acc.fold([0, 1], vecs, np.array([norms]), np.array([True]))
    m = densify_metrics(acc)
    assert m.e_old[0] == 0.0 < m.e1[0]


# -- backward on real renders

def test_zero_upstream_gives_zero(small_scene):
    cloud, cams = small_scene
    out = render(make_plan([0, 1], 24, 24), cloud, cams)
    grads, acc = backward(out, cloud, cams, np.zeros((out.plan.n_requests, 3)), np.zeros(out.plan.n_requests))
    assert not grads.flat().any() and not acc.norm_sum.any()


def test_one_term_color_adjoint():
    cam = Camera(np.eye(3), np.zeros(3), 4.0, 4.0, 0.5, 0.5, 1, 1)
    cloud = GaussianCloud([[0.05, -0.03, 2.0]], [[-2.5] * 3], [[1, 0, 0, 0]], [logit(0.6)], [[0.3, 0.7, 0.2]])
    out = render(make_plan([0], 1, 1, "full", 8), cloud, [cam])
    target = np.array([0.5, 0.1, 0.2 + 1e-3])
    sign = np.sign(out.color[0] - target)
    grads, _ = backward(out, cloud, [cam], sign[None, :])
    st = out.state
    dx = 0.5 - st.mean2d[0, 0]
    q = st.conic[0, 0]
    G = math.exp(-0.5 * (q[0] * dx[0] ** 2 + q[2] * dx[1] ** 2) - q[1] * dx[0] * dx[1])
    assert np.allclose(grads.d_color[0], sign * 1.0 * 0.6 * G, rtol=1e-14)


def test_missing_state(small_scene):
    cloud, cams = small_scene
    out = render(make_plan([0], 24, 24), cloud, cams)
    out.state = None
    with pytest.raises(MissingForwardState):
        backward(out, cloud, cams, np.zeros((out.plan.n_requests, 3)))


def test_invisible_splats_get_zero(small_scene):
    cloud, cams = small_scene
    c = cloud.copy()
    c.means[0] = [40.0, 0, 0]  # far outside every frustum
    out = render(make_plan([0, 1], 24, 24), c, cams)
    grads, acc = backward(out, c, cams, np.ones((out.plan.n_requests, 3)), np.ones(out.plan.n_requests))
    assert grads.is_finite()
    for a in grads.as_dict().values():
        assert not np.any(a[0])
    assert acc.denom[0] == 0


@pytest.mark.parametrize("workers", [2, 8])
def test_backward_worker_invariance(small_scene, workers):
    cloud, cams = small_scene
    sets = split_pixels(24, 24, 4, np.random.default_rng(3), 8)
    plan = make_plan(range(4), 24, 24, "thread_efficient", 8, sets)
    out = render(plan, cloud, cams)
    up = np.random.default_rng(0).normal(size=(plan.n_requests, 3))
    a, acc_a = backward(out, cloud, cams, up, workers=1)
    b, acc_b = backward(out, cloud, cams, up, workers=workers)
    assert np.array_equal(a.flat(), b.flat())
    assert np.array_equal(acc_a.norm_sum, acc_b.norm_sum)


def test_real_accumulator_obeys_triangle(small_scene):
    cloud, cams = small_scene
    sets = split_pixels(24, 24, 4, np.random.default_rng(4), 8)
    out = render(make_plan(range(4), 24, 24, "thread_efficient", 8, sets), cloud, cams)
    _, acc = backward(out, cloud, cams, np.random.default_rng(1).normal(size=(out.plan.n_requests, 3)))
    acc.check()
    assert np.all(acc.norm_sum[acc.denom > 0] >= 0)


@pytest.mark.parametrize("loss", ["l1", "l2", "dssim", "dssim3d", "mix"])
def test_gradcheck_small(loss):
    r = run_gradcheck(100 + len(loss), loss, n_gaussians=6, size=8)
    assert r.passed, r.line()
