"""Numba kernels for blending, its adjoint, and windowed SSIM.

A "block" is one (tile, view) work unit; it owns a contiguous slice of the
request index array and the depth-sorted bin of its (tile, view).  Kernels
take a block range so callers can split work across threads; every output
slot is written by exactly one block.
"""

import math

import numpy as np
from numba import njit

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
BACKGROUND_T = 0.999


@njit(cache=True, nogil=True, inline="always")
def _clamp01(v):
    return min(max(v, 0.0), 1.0)


@njit(cache=True, nogil=True)
def _min_power(opac):
    # below this exponent alpha is certainly under ALPHA_MIN, so exp() can be skipped;
    # the margin keeps the exact alpha test authoritative near the boundary
    out = np.empty(len(opac))
    for g in range(len(opac)):
        out[g] = math.log(ALPHA_MIN / opac[g]) - 1e-6
    return out


@njit(cache=True, nogil=True)
def blend_blocks(k0, k1, block_view, block_tile, block_start, block_end, pix, width, ntiles,
                 bin_start, bin_end, entry_gauss, mean2d, conic, opac, color, depth, zfar,
                 early_stop, out_color, out_depth, out_T, out_fetched):
    min_power = _min_power(opac)
    for k in range(k0, k1):
        b = block_view[k]
        key = b * ntiles + block_tile[k]
        s = bin_start[key]
        e = bin_end[key]
        deepest = s
        for r in range(block_start[k], block_end[k]):
            p = pix[r]
            px = (p % width) + 0.5
            py = (p // width) + 0.5
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            d = 0.0
            j = s
            while j < e:
                g = entry_gauss[j]
                dx = px - mean2d[b, g, 0]
                dy = py - mean2d[b, g, 1]
                power = -0.5 * (conic[b, g, 0] * dx * dx + conic[b, g, 2] * dy * dy) - conic[b, g, 1] * dx * dy
                j += 1
                if power > 0.0 or power < min_power[g]:
                    continue
                alpha = opac[g] * math.exp(power)
                if alpha < ALPHA_MIN:
                    continue
                w = alpha * T
                c0 += w * _clamp01(color[g, 0])
                c1 += w * _clamp01(color[g, 1])
                c2 += w * _clamp01(color[g, 2])
                d += w * depth[b, g]
                T *= 1.0 - alpha
                if early_stop and T < T_MIN:
                    break
            if j > deepest:
                deepest = j
            out_color[r, 0] = c0
            out_color[r, 1] = c1
            out_color[r, 2] = c2
            out_depth[r] = zfar[b] if T > BACKGROUND_T else d
            out_T[r] = T
        out_fetched[k] = deepest - s


@njit(cache=True, nogil=True)
def blend_backward_blocks(k0, k1, block_view, block_tile, block_start, block_end, pix, width, height,
                          ntiles, bin_start, bin_end, entry_gauss, mean2d, conic, opac, color, depth,
                          early_stop, d_color, d_depth,
                          e_mean2d, e_conic, e_opac, e_color, e_depth, e_ndc, e_norm):
    """Adjoint of :func:`blend_blocks` accumulated per bin entry.

    Each pixel re-runs its forward sweep into scratch buffers, then walks
    back to front keeping the colour/depth composited behind the current
    splat, so no division by (1 - alpha) is needed.
    """
    half_w = 0.5 * width
    half_h = 0.5 * height
    maxlen = 0
    for k in range(k0, k1):
        key = block_view[k] * ntiles + block_tile[k]
        maxlen = max(maxlen, bin_end[key] - bin_start[key])
    min_power = _min_power(opac)
    s_j = np.empty(maxlen, dtype=np.int64)
    s_T = np.empty(maxlen)
    s_a = np.empty(maxlen)
    s_G = np.empty(maxlen)
    for k in range(k0, k1):
        b = block_view[k]
        key = b * ntiles + block_tile[k]
        s = bin_start[key]
        e = bin_end[key]
        for r in range(block_start[k], block_end[k]):
            p = pix[r]
            px = (p % width) + 0.5
            py = (p // width) + 0.5
            T = 1.0
            n = 0
            for j in range(s, e):
                g = entry_gauss[j]
                dx = px - mean2d[b, g, 0]
                dy = py - mean2d[b, g, 1]
                power = -0.5 * (conic[b, g, 0] * dx * dx + conic[b, g, 2] * dy * dy) - conic[b, g, 1] * dx * dy
                if power > 0.0 or power < min_power[g]:
                    continue
                G = math.exp(power)
                alpha = opac[g] * G
                if alpha < ALPHA_MIN:
                    continue
                s_j[n] = j
                s_T[n] = T
                s_a[n] = alpha
                s_G[n] = G
                n += 1
                T *= 1.0 - alpha
                if early_stop and T < T_MIN:
                    break
            dC0 = d_color[r, 0]
            dC1 = d_color[r, 1]
            dC2 = d_color[r, 2]
            dD = d_depth[r] if T <= BACKGROUND_T else 0.0
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            aD = 0.0
            for m in range(n - 1, -1, -1):
                j = s_j[m]
                g = entry_gauss[j]
                Ti = s_T[m]
                alpha = s_a[m]
                G = s_G[m]
                cg0 = color[g, 0]
                cg1 = color[g, 1]
                cg2 = color[g, 2]
                c0 = _clamp01(cg0)
                c1 = _clamp01(cg1)
                c2 = _clamp01(cg2)
                dg = depth[b, g]
                w = alpha * Ti
                if 0.0 < cg0 < 1.0:
                    e_color[j, 0] += dC0 * w
                if 0.0 < cg1 < 1.0:
                    e_color[j, 1] += dC1 * w
                if 0.0 < cg2 < 1.0:
                    e_color[j, 2] += dC2 * w
                e_depth[j] += dD * w
                d_alpha = Ti * (dC0 * (c0 - a0) + dC1 * (c1 - a1) + dC2 * (c2 - a2) + dD * (dg - aD))
                a0 = c0 * alpha + (1.0 - alpha) * a0
                a1 = c1 * alpha + (1.0 - alpha) * a1
                a2 = c2 * alpha + (1.0 - alpha) * a2
                aD = dg * alpha + (1.0 - alpha) * aD
                e_opac[j] += d_alpha * G
                d_power = d_alpha * opac[g] * G
                dx = px - mean2d[b, g, 0]
                dy = py - mean2d[b, g, 1]
                ca = conic[b, g, 0]
                cb = conic[b, g, 1]
                cc = conic[b, g, 2]
                gx = d_power * (ca * dx + cb * dy)
                gy = d_power * (cb * dx + cc * dy)
                e_mean2d[j, 0] += gx
                e_mean2d[j, 1] += gy
                e_conic[j, 0] += -0.5 * d_power * dx * dx
                e_conic[j, 1] += -d_power * dx * dy
                e_conic[j, 2] += -0.5 * d_power * dy * dy
                nx = gx * half_w
                ny = gy * half_h
                e_ndc[j, 0] += nx
                e_ndc[j, 1] += ny
                e_norm[j] += math.sqrt(nx * nx + ny * ny)


@njit(cache=True, nogil=True)
def reduce_entries(entry_view, entry_gauss, e_mean2d, e_conic, e_opac, e_color, e_depth, e_ndc, e_norm,
                   v_mean2d, v_conic, v_depth, v_ndc, g_opac, g_color, g_norm):
    """Sum entry buffers into per-(view, splat) and per-splat arrays in entry order."""
    for j in range(len(entry_gauss)):
        b = entry_view[j]
        g = entry_gauss[j]
        v_mean2d[b, g, 0] += e_mean2d[j, 0]
        v_mean2d[b, g, 1] += e_mean2d[j, 1]
        v_conic[b, g, 0] += e_conic[j, 0]
        v_conic[b, g, 1] += e_conic[j, 1]
        v_conic[b, g, 2] += e_conic[j, 2]
        v_depth[b, g] += e_depth[j]
        v_ndc[b, g, 0] += e_ndc[j, 0]
        v_ndc[b, g, 1] += e_ndc[j, 1]
        g_opac[g] += e_opac[j]
        g_color[g, 0] += e_color[j, 0]
        g_color[g, 1] += e_color[j, 1]
        g_color[g, 2] += e_color[j, 2]
        g_norm[g] += e_norm[j]


# ---------------------------------------------------------------------------
# windowed SSIM with arbitrary per-window weights


@njit(cache=True, nogil=True)
def weighted_ssim(img1, img2, weights, centers, half, c1, c2, ssim_map, grad):
    """SSIM per (center, channel) with window weights ``weights[y, x, dy, dx]``.

    ``grad`` receives d(sum of SSIM over centers and channels)/d img1.
    Only centers with ``centers[y, x]`` set are evaluated.
    """
    h, w, nch = img1.shape
    k = 2 * half + 1
    for y in range(h):
        for x in range(w):
            if not centers[y, x]:
                continue
            for ch in range(nch):
                m1 = 0.0
                m2 = 0.0
                s11 = 0.0
                s22 = 0.0
                s12 = 0.0
                for dy in range(k):
                    yy = y + dy - half
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(k):
                        xx = x + dx - half
                        if xx < 0 or xx >= w:
                            continue
                        wt = weights[y, x, dy, dx]
                        if wt == 0.0:
                            continue
                        a = img1[yy, xx, ch]
                        bb = img2[yy, xx, ch]
                        m1 += wt * a
                        m2 += wt * bb
                        s11 += wt * a * a
                        s22 += wt * bb * bb
                        s12 += wt * a * bb
                v1 = s11 - m1 * m1
                v2 = s22 - m2 * m2
                v12 = s12 - m1 * m2
                A1 = 2.0 * m1 * m2 + c1
                A2 = 2.0 * v12 + c2
                B1 = m1 * m1 + m2 * m2 + c1
                B2 = v1 + v2 + c2
                S = (A1 * A2) / (B1 * B2)
                ssim_map[y, x, ch] = S
                ca = S * (2.0 * m2 / A1 - 2.0 * m1 / B1) + 2.0 * S * m1 / B2 - 2.0 * S * m2 / A2
                cb = -2.0 * S / B2
                cd = 2.0 * S / A2
                for dy in range(k):
                    yy = y + dy - half
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(k):
                        xx = x + dx - half
                        if xx < 0 or xx >= w:
                            continue
                        wt = weights[y, x, dy, dx]
                        if wt == 0.0:
                            continue
                        grad[yy, xx, ch] += wt * (ca + cb * img1[yy, xx, ch] + cd * img2[yy, xx, ch])


@njit(cache=True, nogil=True)
def window_weights(valid, view_map, same_view_only, half, sigma, weights):
    """Normalised 2D Gaussian window over valid (and optionally same-view) pixels."""
    h, w = valid.shape
    k = 2 * half + 1
    inv = 1.0 / (2.0 * sigma * sigma)
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            total = 0.0
            for dy in range(k):
                yy = y + dy - half
                if yy < 0 or yy >= h:
                    continue
                for dx in range(k):
                    xx = x + dx - half
                    if xx < 0 or xx >= w or not valid[yy, xx]:
                        continue
                    if same_view_only and view_map[yy, xx] != view_map[y, x]:
                        continue
                    u = dx - half
                    v = dy - half
                    wt = math.exp(-(u * u + v * v) * inv)
                    weights[y, x, dy, dx] = wt
                    total += wt
            if total > 0.0:
                for dy in range(k):
                    for dx in range(k):
                        weights[y, x, dy, dx] /= total


@njit(cache=True, nogil=True)
def window_weights_3d(points, valid, surface, half, sigma, sigma2d, min_valid, weights, centers):
    """Normalised 3D-distance window weights.

    ``points[y, x]`` are world surface points.  Background centers fall back to
    the 2D kernel over valid pixels; windows with fewer than ``min_valid``
    surface entries are dropped from ``centers``.  Returns the dropped count.
    """
    h, w = valid.shape
    k = 2 * half + 1
    inv = 1.0 / (2.0 * sigma * sigma)
    inv2d = 1.0 / (2.0 * sigma2d * sigma2d)
    dropped = 0
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            total = 0.0
            count = 0
            if surface[y, x]:
                for dy in range(k):
                    yy = y + dy - half
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(k):
                        xx = x + dx - half
                        if xx < 0 or xx >= w or not (valid[yy, xx] and surface[yy, xx]):
                            continue
                        ox = points[yy, xx, 0] - points[y, x, 0]
                        oy = points[yy, xx, 1] - points[y, x, 1]
                        oz = points[yy, xx, 2] - points[y, x, 2]
                        wt = math.exp(-(ox * ox + oy * oy + oz * oz) * inv)
                        weights[y, x, dy, dx] = wt
                        total += wt
                        count += 1
                if count < min_valid:
                    for dy in range(k):
                        for dx in range(k):
                            weights[y, x, dy, dx] = 0.0
                    centers[y, x] = False
                    dropped += 1
                    continue
            else:
                for dy in range(k):
                    yy = y + dy - half
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(k):
                        xx = x + dx - half
                        if xx < 0 or xx >= w or not valid[yy, xx]:
                            continue
                        u = dx - half
                        v = dy - half
                        wt = math.exp(-(u * u + v * v) * inv2d)
                        weights[y, x, dy, dx] = wt
                        total += wt
            centers[y, x] = True
            for dy in range(k):
                for dx in range(k):
                    weights[y, x, dy, dx] /= total
    return dropped


@njit(cache=True, nogil=True)
def project_forward(means, sigma, cam_rot, trans, intr, dilation, guard, nsig,
                    p_cam, mean2d, ndc, cov2d, conic, radius, visible, jac, cov_cam, degenerate):
    """Per (view, splat) projection; ``intr`` rows are (fx, fy, cx, cy, znear, p0, p1)."""
    nb, n = p_cam.shape[0], p_cam.shape[1]
    for b in range(nb):
        w = cam_rot[b]
        fx, fy, cx, cy, znear, p0, p1 = intr[b, 0], intr[b, 1], intr[b, 2], intr[b, 3], intr[b, 4], intr[b, 5], intr[b, 6]
        ndeg = 0
        for g in range(n):
            for k in range(3):
                p_cam[b, g, k] = (means[g, 0] * w[0, k] + means[g, 1] * w[1, k] + means[g, 2] * w[2, k]) + trans[b, k]
            x, y, z = p_cam[b, g, 0], p_cam[b, g, 1], p_cam[b, g, 2]
            in_front = z > znear
            zs = z if in_front else 1.0
            ndc[b, g, 0] = p0 * x / zs
            ndc[b, g, 1] = p1 * y / zs
            mean2d[b, g, 0] = fx * x / zs + cx
            mean2d[b, g, 1] = fy * y / zs + cy
            # W^T Sigma W
            s = sigma[g]
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc += w[k, i] * (s[k, 0] * w[0, j] + s[k, 1] * w[1, j] + s[k, 2] * w[2, j])
                    cov_cam[b, g, i, j] = acc
            jac[b, g, 0, 0] = fx / zs
            jac[b, g, 0, 1] = 0.0
            jac[b, g, 0, 2] = -fx * x / zs**2
            jac[b, g, 1, 0] = 0.0
            jac[b, g, 1, 1] = fy / zs
            jac[b, g, 1, 2] = -fy * y / zs**2
            j_ = jac[b, g]
            c_ = cov_cam[b, g]
            for i in range(2):
                for j in range(2):
                    acc = 0.0
                    for k in range(3):
                        acc += j_[i, k] * (c_[k, 0] * j_[j, 0] + c_[k, 1] * j_[j, 1] + c_[k, 2] * j_[j, 2])
                    cov2d[b, g, i, j] = acc
            cov2d[b, g, 0, 0] += dilation
            cov2d[b, g, 1, 1] += dilation
            a, bb, c = cov2d[b, g, 0, 0], cov2d[b, g, 0, 1], cov2d[b, g, 1, 1]
            det = a * c - bb * bb
            ok_det = det > 0
            inv_det = 1.0 / det if ok_det else 0.0
            conic[b, g, 0] = c * inv_det
            conic[b, g, 1] = -bb * inv_det
            conic[b, g, 2] = a * inv_det
            lam = 0.5 * (a + c) + math.sqrt(max(0.25 * (a - c) ** 2 + bb * bb, 0.0))
            r = nsig * math.sqrt(max(lam, 0.0))
            in_band = abs(ndc[b, g, 0]) <= guard and abs(ndc[b, g, 1]) <= guard
            finite = (math.isfinite(conic[b, g, 0]) and math.isfinite(conic[b, g, 1])
                      and math.isfinite(conic[b, g, 2]) and math.isfinite(mean2d[b, g, 0])
                      and math.isfinite(mean2d[b, g, 1]))
            vis = in_front and in_band and ok_det and finite and r > 0
            visible[b, g] = vis
            radius[b, g] = r if vis else 0.0
            if in_front and in_band and not ok_det:
                ndeg += 1
        degenerate[b] = ndeg


@njit(cache=True, nogil=True)
def project_adjoint(p_cam, conic, jac, cov_cam, visible, cam_rot, focal, d_mean2d, d_conic, d_depth,
                    d_sigma, d_means):
    """Adjoint of :func:`project_forward` up to the world covariance; sums over views into
    ``d_sigma`` (G, 3, 3) and ``d_means`` (G, 3)."""
    nb, n = p_cam.shape[0], p_cam.shape[1]
    q = np.empty((2, 2))
    gq = np.empty((2, 2))
    d2 = np.empty((2, 2))
    dcc = np.empty((3, 3))
    tmp = np.empty((3, 3))
    dj = np.empty((2, 3))
    for b in range(nb):
        w = cam_rot[b]
        fx, fy = focal[b, 0], focal[b, 1]
        for g in range(n):
            if not visible[b, g]:
                continue
            x, y, z = p_cam[b, g, 0], p_cam[b, g, 1], p_cam[b, g, 2]
            # conic = inverse(cov2d): dL/dcov2d = -Q G Q
            gq[0, 0] = d_conic[b, g, 0]
            gq[0, 1] = gq[1, 0] = 0.5 * d_conic[b, g, 1]
            gq[1, 1] = d_conic[b, g, 2]
            q[0, 0] = conic[b, g, 0]
            q[0, 1] = q[1, 0] = conic[b, g, 1]
            q[1, 1] = conic[b, g, 2]
            for i in range(2):
                for j in range(2):
                    d2[i, j] = -((q[i, 0] * gq[0, 0] + q[i, 1] * gq[1, 0]) * q[0, j]
                                 + (q[i, 0] * gq[0, 1] + q[i, 1] * gq[1, 1]) * q[1, j])
            j_ = jac[b, g]
            c_ = cov_cam[b, g]
            for i in range(3):
                for j in range(3):
                    dcc[i, j] = (j_[0, i] * (d2[0, 0] * j_[0, j] + d2[0, 1] * j_[1, j])
                                 + j_[1, i] * (d2[1, 0] * j_[0, j] + d2[1, 1] * j_[1, j]))
            for i in range(2):
                for j in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc += (d2[i, 0] * j_[0, k] + d2[i, 1] * j_[1, k]) * c_[k, j]
                    dj[i, j] = 2.0 * acc
            # d_sigma += W dcc W^T
            for i in range(3):
                for j in range(3):
                    tmp[i, j] = dcc[i, 0] * w[j, 0] + dcc[i, 1] * w[j, 1] + dcc[i, 2] * w[j, 2]
            for i in range(3):
                for j in range(3):
                    d_sigma[g, i, j] += w[i, 0] * tmp[0, j] + w[i, 1] * tmp[1, j] + w[i, 2] * tmp[2, j]
            du, dv = d_mean2d[b, g, 0], d_mean2d[b, g, 1]
            z2 = z * z
            z3 = z2 * z
            dx = du * fx / z + dj[0, 2] * (-fx / z2)
            dy = dv * fy / z + dj[1, 2] * (-fy / z2)
            dz = (-du * fx * x / z2 - dv * fy * y / z2 + d_depth[b, g]
                  + dj[0, 0] * (-fx / z2) + dj[0, 2] * (2 * fx * x / z3)
                  + dj[1, 1] * (-fy / z2) + dj[1, 2] * (2 * fy * y / z3))
            for k in range(3):
                d_means[g, k] += dx * w[k, 0] + dy * w[k, 1] + dz * w[k, 2]
