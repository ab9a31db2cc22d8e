import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvgs.projection import (covariance3d, grad_ndc_to_world, grad_world_to_ndc, ndc_to_pixel, project,
                             project_cloud, project_views, quat_to_rotmat)
from mvgs.scene import Camera, Gaussian3D, GaussianCloud, look_at


def gauss(mean, log_scale=(-2, -2, -2), rot=(1, 0, 0, 0)):
    return Gaussian3D(np.array(mean, float), np.array(log_scale, float), np.array(rot, float), 0.0, np.zeros(3))


def ident_cam(w=32, h=32, f=40.0):
    return Camera(np.eye(3), np.zeros(3), f, f, w / 2, h / 2, w, h)


def test_isotropic_covariance():
    s = 0.3
    g = gauss((0, 0, 0), [math.log(s)] * 3)
    assert np.allclose(covariance3d(g), s * s * np.eye(3), atol=1e-15)


def test_axis_swap_rotation():
    a, b, c = 0.1, 0.2, 0.4
    q = (math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4))
    cov = covariance3d(gauss((0, 0, 0), np.log([a, b, c]), q))
    assert np.allclose(cov, np.diag([b * b, a * a, c * c]), atol=1e-15)


def test_covariance_matches_extended_precision(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        ls = rng.normal(size=3) - 1
        g = gauss(rng.normal(size=3), ls, q)
        qq = np.array(q, dtype=np.longdouble)
        w, x, y, z = qq / np.sqrt(np.sum(qq * qq))
        r = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                      [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                      [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]], dtype=np.longdouble)
        s = np.diag(np.exp(np.array(ls, dtype=np.longdouble)))
        ref = r @ s @ s.T @ r.T
        cov = covariance3d(g)
        assert np.allclose(cov, ref.astype(float), rtol=1e-13, atol=1e-15)
        assert np.allclose(cov, cov.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(cov) >= -1e-15)


def test_rotation_matrices_orthonormal(rng):
    r = quat_to_rotmat(rng.normal(size=(30, 4)))
    assert np.allclose(r @ np.swapaxes(r, 1, 2), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(r), 1.0)


def test_point_on_axis():
    cam = ident_cam()
    p = project(gauss((0, 0, 2)), cam)
    assert p.visible
    assert np.allclose(p.mean_ndc, 0) and np.allclose(p.mean2d, [cam.cx, cam.cy])


def test_opposite_cameras_see_origin_at_center():
    c1 = Camera(np.eye(3), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    c2 = Camera(np.diag([-1.0, 1, -1]), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    for cam in (c1, c2):
        p = project(gauss((0, 0, 0)), cam)
        assert np.allclose(p.mean_ndc, 0) and math.isclose(p.depth, 1.0)


def test_depth_matches_dense_matmul(rng):
    for _ in range(10):
        cam = look_at(rng.normal(size=3) * 4, fx=30, fy=30, width=20, height=20)
        g = gauss(rng.normal(size=3) * 0.3)
        ext = np.vstack([cam.rotation, cam.translation])  # (mu, 1) [R | t]^T as a 4x3 product
        ref = np.append(g.mean, 1.0) @ ext
        assert math.isclose(project(g, cam).depth, ref[2], rel_tol=1e-14)


def test_culling_rules():
    cam = ident_cam()
    assert not project(gauss((0, 0, 0.05)), cam).visible  # in front of znear
    assert not project(gauss((0, 0, -2)), cam).visible
    # ndc x = 2 f x / (w z); push it just past the guard band
    x_edge = 1.3 * cam.width * 2.0 / (2 * cam.fx)
    assert project(gauss((x_edge * 0.99, 0, 2)), cam).visible
    assert not project(gauss((x_edge * 1.01, 0, 2)), cam).visible


def test_degenerate_covariance_flagged():
    cam = ident_cam()
    cloud = GaussianCloud.from_list([gauss((0, 0, 2), (-2, -2, -2))])
    cloud.log_scales[:] = -800.0  # scale underflows to zero; dilation keeps cov2d invertible
    p = project_cloud(cloud, cam)
    assert p.visible[0]
    from mvgs.projection import ProjectionConfig
    p = project_cloud(cloud, cam, ProjectionConfig(dilation=0.0))
    assert not p.visible[0] and p.degenerate == 1


def test_visible_means_positive_definite(small_scene):
    cloud, cams = small_scene
    for cam in cams:
        p = project_cloud(cloud, cam)
        v = p.visible
        assert np.all(p.depth[v] > cam.znear) and np.all(p.radius[v] > 0)
        assert np.all(np.linalg.eigvalsh(p.cov2d[v]) > 0)


def test_radius_is_three_sigma():
    cam = ident_cam()
    p = project(gauss((0.1, -0.05, 2.5), np.log([0.1, 0.05, 0.2]), (0.9, 0.1, 0.3, 0.2)), cam)
    assert math.isclose(p.radius, 3 * math.sqrt(np.linalg.eigvalsh(p.cov2d).max()), rel_tol=1e-12)


def test_ndc_to_pixel_affine():
    cam = Camera(np.eye(3), np.zeros(3), 10, 10, 9.0, 5.0, 16, 12)
    px = ndc_to_pixel(np.array([0.25, -0.5]), cam)
    assert np.allclose(px, [(1.25 / 2) * 16 + 1.0, (0.5 / 2) * 12 - 1.0])


def test_pixel_and_ndc_consistent(small_scene):
    cloud, cams = small_scene
    for cam in cams:
        p = project_cloud(cloud, cam)
        assert np.allclose(ndc_to_pixel(p.mean_ndc, cam), p.mean2d, atol=1e-12)


def test_batched_matches_single_view(small_scene):
    cloud, cams = small_scene
    batch = project_views(cloud, cams)
    for b, cam in enumerate(cams):
        one = project_cloud(cloud, cam)
        assert np.array_equal(batch.visible[b], one.visible)
        assert np.allclose(batch.mean2d[b], one.mean2d, rtol=0, atol=1e-12)
        assert np.allclose(batch.conic[b][one.visible], one.conic[one.visible], rtol=1e-12)


def test_zero_ndc_gradient_maps_to_zero():
    cam = ident_cam()
    assert np.array_equal(grad_ndc_to_world([0, 0], [0.1, 0.2, 2], [0.05, 0.1], cam), np.zeros(3))


def test_gradient_pullback_rejects_behind_camera():
    with pytest.raises(ValueError):
        grad_ndc_to_world([1, 0], [0, 0, -1], [0, 0], ident_cam())


def test_opposite_pair_cancels():
    c1 = Camera(np.eye(3), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    c2 = Camera(np.diag([-1.0, 1, -1]), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    gw = np.array([1.0, 0, 0])
    g1 = grad_world_to_ndc(gw, c1.world_to_camera(np.zeros(3)), c1)
    g2 = grad_world_to_ndc(gw, c2.world_to_camera(np.zeros(3)), c2)
    assert np.linalg.norm(g1) > 0 and np.linalg.norm(g2) > 0
    assert np.allclose(g1 + g2, 0, atol=1e-12)


def _ndc_of(mean, cam):
    pc = cam.world_to_camera(mean)
    p0, p1, _, _ = cam.projection_coeffs
    return np.array([p0 * pc[0] / pc[2], p1 * pc[1] / pc[2]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_pullback_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cam = look_at(rng.normal(size=3) * 2 + np.array([0, 0, -4.0]), fx=30, fy=28, width=24, height=20)
    mean = rng.normal(size=3) * 0.3
    pc = cam.world_to_camera(mean)
    ndc = _ndc_of(mean, cam)
    gn = rng.normal(size=2)
    an = grad_ndc_to_world(gn, pc, ndc, cam)
    h = 1e-5
    num = np.array([(gn @ _ndc_of(mean + h * e, cam) - gn @ _ndc_of(mean - h * e, cam)) / (2 * h)
                    for e in np.eye(3)])
    assert np.allclose(an, num, rtol=1e-5, atol=1e-9 * np.abs(num).max())


def test_opposite_cameras_sit_on_either_side():
    c1 = Camera(np.eye(3), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    c2 = Camera(np.diag([-1.0, 1, -1]), [0, 0, 1], 20, 20, 8, 8, 16, 16)
    assert np.allclose(c1.center, [0, 0, -1]) and np.allclose(c2.center, [0, 0, 1])
    assert np.allclose(c1.forward, -c2.forward)
