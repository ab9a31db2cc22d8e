"""World -> camera -> NDC -> pixel transforms and EWA covariance projection.

Batched projection runs as compiled per (view, splat) kernels and has a hand-written adjoint
(:func:`project_backward`) used by the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .scene import Camera, Gaussian3D, GaussianCloud


@dataclass(frozen=True)
class ProjectionConfig:
    dilation: float = 0.3  # pixel^2 added to the 2D covariance diagonal
    guard_band: float = 1.3  # NDC cull limit
    radius_sigmas: float = 3.0


DEFAULT_PROJECTION = ProjectionConfig()


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); inputs are normalised first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_vjp(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. raw quaternions given dL/dR, including the normalisation."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = d_r
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def covariance3d(g: Gaussian3D) -> np.ndarray:
    """R S S^T R^T for a single splat."""
    r = quat_to_rotmat(g.rotation)
    m = r * np.exp(g.log_scale)[None, :]
    return m @ m.T


def covariances(cloud: GaussianCloud) -> np.ndarray:
    r = quat_to_rotmat(cloud.quats)
    m = r * np.exp(cloud.log_scales)[:, None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class Projected2D:
    mean2d: np.ndarray  # (2,) pixels
    mean_ndc: np.ndarray  # (2,)
    depth: float
    cov2d: np.ndarray  # (2, 2)
    cov2d_inv: np.ndarray  # (2, 2)
    radius: float
    visible: bool


@dataclass
class ProjectedCloud:
    """Per-view projection of a whole cloud (arrays of length G)."""

    p_cam: np.ndarray  # (G, 3)
    mean2d: np.ndarray  # (G, 2)
    mean_ndc: np.ndarray  # (G, 2)
    depth: np.ndarray  # (G,)
    cov2d: np.ndarray  # (G, 2, 2)
    conic: np.ndarray  # (G, 3) packed inverse covariance (a, b, c)
    radius: np.ndarray  # (G,)
    visible: np.ndarray  # (G,) bool
    degenerate: int = 0
    # kept for the adjoint
    rot: np.ndarray | None = None  # (G, 3, 3) splat rotation
    scale: np.ndarray | None = None  # (G, 3)
    jac: np.ndarray | None = None  # (G, 2, 3) pixel Jacobian in camera space
    cov_cam: np.ndarray | None = None  # (G, 3, 3)

    def __len__(self) -> int:
        return len(self.depth)

    def __getitem__(self, i: int) -> Projected2D:
        c = self.conic[i]
        return Projected2D(self.mean2d[i].copy(), self.mean_ndc[i].copy(), float(self.depth[i]),
                           self.cov2d[i].copy(), np.array([[c[0], c[1]], [c[1], c[2]]]),
                           float(self.radius[i]), bool(self.visible[i]))


@dataclass
class ProjectedBatch:
    """Projection of one cloud into ``B`` views; arrays carry a leading view axis."""

    p_cam: np.ndarray  # (B, G, 3)
    mean2d: np.ndarray  # (B, G, 2)
    mean_ndc: np.ndarray  # (B, G, 2)
    depth: np.ndarray  # (B, G)
    cov2d: np.ndarray  # (B, G, 2, 2)
    conic: np.ndarray  # (B, G, 3)
    radius: np.ndarray  # (B, G)
    visible: np.ndarray  # (B, G)
    degenerate: np.ndarray  # (B,)
    rot: np.ndarray  # (G, 3, 3)
    scale: np.ndarray  # (G, 3)
    jac: np.ndarray  # (B, G, 2, 3)
    cov_cam: np.ndarray  # (B, G, 3, 3)
    cam_rot: np.ndarray  # (B, 3, 3)
    focal: np.ndarray  # (B, 2)

    def __len__(self) -> int:
        return len(self.depth)

    def view(self, b: int) -> ProjectedCloud:
        return ProjectedCloud(self.p_cam[b], self.mean2d[b], self.mean_ndc[b], self.depth[b], self.cov2d[b],
                              self.conic[b], self.radius[b], self.visible[b], int(self.degenerate[b]),
                              self.rot, self.scale, self.jac[b], self.cov_cam[b])


def project_views(cloud: GaussianCloud, cams, cfg: ProjectionConfig = DEFAULT_PROJECTION) -> ProjectedBatch:
    """Project every splat into every camera in one vectorised pass."""
    n = len(cloud)
    nb = len(cams)
    cam_rot = np.stack([c.rotation for c in cams]) if nb else np.zeros((0, 3, 3))
    trans = np.array([c.translation for c in cams]).reshape(nb, 1, 3)
    col = lambda vals: np.array(vals, dtype=np.float64).reshape(nb, 1)  # noqa: E731
    fx, fy = col([c.fx for c in cams]), col([c.fy for c in cams])
    cx, cy = col([c.cx for c in cams]), col([c.cy for c in cams])
    znear = col([c.znear for c in cams])
    p0, p1 = col([c.projection_coeffs[0] for c in cams]), col([c.projection_coeffs[1] for c in cams])

    intr = np.concatenate([fx, fy, cx, cy, znear, p0, p1], axis=1)

    rot = quat_to_rotmat(cloud.quats)
    scale = np.exp(cloud.log_scales)
    m = rot * scale[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    p_cam, mean2d, ndc = np.empty((nb, n, 3)), np.empty((nb, n, 2)), np.empty((nb, n, 2))
    cov2d, conic, radius = np.empty((nb, n, 2, 2)), np.empty((nb, n, 3)), np.empty((nb, n))
    visible = np.empty((nb, n), dtype=bool)
    jac, cov_cam = np.empty((nb, n, 2, 3)), np.empty((nb, n, 3, 3))
    degenerate = np.zeros(nb, dtype=np.int64)
    _kernels.project_forward(np.ascontiguousarray(cloud.means, dtype=np.float64), sigma, np.ascontiguousarray(cam_rot),
                      np.ascontiguousarray(trans[:, 0]), intr, cfg.dilation, cfg.guard_band, cfg.radius_sigmas,
                      p_cam, mean2d, ndc, cov2d, conic, radius, visible, jac, cov_cam, degenerate)
    return ProjectedBatch(p_cam, mean2d, ndc, p_cam[..., 2].copy(), cov2d, conic, radius, visible,
                          degenerate, rot, scale, jac, cov_cam, cam_rot, np.concatenate([fx, fy], axis=1))


def project_cloud(cloud: GaussianCloud, cam: Camera, cfg: ProjectionConfig = DEFAULT_PROJECTION) -> ProjectedCloud:
    return project_views(cloud, [cam], cfg).view(0)


def project(g: Gaussian3D, cam: Camera, cfg: ProjectionConfig = DEFAULT_PROJECTION) -> Projected2D:
    return project_cloud(GaussianCloud.from_list([g]), cam, cfg)[0]


def ndc_to_pixel(ndc: np.ndarray, cam: Camera) -> np.ndarray:
    ndc = np.asarray(ndc, dtype=np.float64)
    px = (ndc[..., 0] + 1.0) / 2.0 * cam.width + (cam.cx - cam.width / 2.0)
    py = (ndc[..., 1] + 1.0) / 2.0 * cam.height + (cam.cy - cam.height / 2.0)
    return np.stack([px, py], axis=-1)


def ndc_jacobian(p_cam: np.ndarray, cam: Camera) -> np.ndarray:
    """d(mean_ndc)/d(p_cam) as a 2x3 matrix."""
    x, y, z = p_cam
    p0, p1, _, _ = cam.projection_coeffs
    return np.array([[p0 / z, 0.0, -p0 * x / z**2],
                     [0.0, p1 / z, -p1 * y / z**2]])


def grad_ndc_to_world(grad_ndc, g_cam, ndc, cam: Camera) -> np.ndarray:
    """Pull an NDC positional gradient back to world space.

    The third column of the chain matrix is ``-ndc / z_cam`` (the derivative of
    ``P0 * x / z`` with respect to ``z``).
    """
    g_cam = np.asarray(g_cam, dtype=np.float64)
    z = g_cam[2]
    if not z > 0:
        raise ValueError("camera-space depth must be positive; cull before pulling gradients back")
    p0, p1, _, _ = cam.projection_coeffs
    ndc = np.asarray(ndc, dtype=np.float64)
    jac = np.array([[p0 / z, 0.0, -ndc[0] / z],
                    [0.0, p1 / z, -ndc[1] / z]])
    d_cam = np.asarray(grad_ndc, dtype=np.float64) @ jac
    return d_cam @ cam.rotation.T


def grad_world_to_ndc(grad_world, g_cam, cam: Camera) -> np.ndarray:
    """The per-view NDC gradient that a world-space positional gradient appears as.

    Uses the in-plane inverse ``(dL/dx_cam, dL/dy_cam) diag(z/P0, z/P1)``.
    """
    z = np.asarray(g_cam, dtype=np.float64)[2]
    if not z > 0:
        raise ValueError("camera-space depth must be positive")
    p0, p1, _, _ = cam.projection_coeffs
    d_cam = np.asarray(grad_world, dtype=np.float64) @ cam.rotation
    return np.array([d_cam[0] * z / p0, d_cam[1] * z / p1])


def project_backward(cloud: GaussianCloud, cam: Camera, proj: ProjectedCloud,
                     d_mean2d: np.ndarray, d_conic: np.ndarray, d_depth: np.ndarray):
    """Adjoint of :func:`project_cloud`; returns (d_means, d_log_scales, d_quats)."""
    batch = ProjectedBatch(proj.p_cam[None], proj.mean2d[None], proj.mean_ndc[None], proj.depth[None],
                           proj.cov2d[None], proj.conic[None], proj.radius[None], proj.visible[None],
                           np.array([proj.degenerate]), proj.rot, proj.scale, proj.jac[None], proj.cov_cam[None],
                           cam.rotation[None], np.array([[cam.fx, cam.fy]]))
    return project_views_backward(cloud, batch, d_mean2d[None], d_conic[None], d_depth[None])


def project_views_backward(cloud: GaussianCloud, proj: ProjectedBatch, d_mean2d: np.ndarray,
                           d_conic: np.ndarray, d_depth: np.ndarray):
    """Adjoint of :func:`project_views`, summed over views.

    Inputs carry a leading view axis; invisible (view, splat) pairs contribute nothing.
    """
    n = len(cloud)
    d_sigma, d_means = np.zeros((n, 3, 3)), np.zeros((n, 3))
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    _kernels.project_adjoint(proj.p_cam, proj.conic, proj.jac, proj.cov_cam, proj.visible, f64(proj.cam_rot),
                      f64(proj.focal), f64(d_mean2d), f64(d_conic), f64(d_depth), d_sigma, d_means)
    rot, scale = proj.rot, proj.scale
    m = rot * scale[:, None, :]
    d_m = 2.0 * d_sigma @ m
    d_scale = np.sum(d_m * rot, axis=1)
    d_rot = d_m * scale[:, None, :]
    d_log_scales = d_scale * scale
    d_quats = _rotmat_vjp(cloud.quats, d_rot)
    return d_means, d_log_scales, d_quats
