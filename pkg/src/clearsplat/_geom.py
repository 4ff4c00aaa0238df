"""Numba kernels for per-Gaussian projection and the parameter-space chain rule.

Both loops are independent per Gaussian and run serially, which keeps every
floating-point operation in a fixed order.
"""

import math

import numpy as np
from numba import njit


@njit(inline="always")
def _rotmat(w, x, y, z, r):
    r[0, 0] = 1 - 2 * (y * y + z * z)
    r[0, 1] = 2 * (x * y - w * z)
    r[0, 2] = 2 * (x * z + w * y)
    r[1, 0] = 2 * (x * y + w * z)
    r[1, 1] = 1 - 2 * (x * x + z * z)
    r[1, 2] = 2 * (y * z - w * x)
    r[2, 0] = 2 * (x * z - w * y)
    r[2, 1] = 2 * (y * z + w * x)
    r[2, 2] = 1 - 2 * (x * x + y * y)


@njit(cache=True)
def project(positions, rotations, log_scales, wrot, trans, fx, fy, cx, cy, near, width, height,
            dilation):
    n = positions.shape[0]
    p_cam = np.empty((n, 3))
    jac = np.zeros((n, 2, 3))
    view_cov = np.empty((n, 3, 3))
    cov2d = np.empty((n, 2, 2))
    conic = np.empty((n, 3))
    mean2d = np.empty((n, 2))
    radius = np.empty(n)
    rotmat = np.empty((n, 3, 3))
    qnorm = np.empty(n)
    visible = np.zeros(n, dtype=np.bool_)
    m = np.empty((3, 3))
    c3 = np.empty((3, 3))
    wc = np.empty((3, 3))
    for k in range(n):
        for i in range(3):
            p_cam[k, i] = (wrot[i, 0] * positions[k, 0] + wrot[i, 1] * positions[k, 1]
                           + wrot[i, 2] * positions[k, 2] + trans[i])
        x, y, z = p_cam[k, 0], p_cam[k, 1], p_cam[k, 2]
        in_front = z > near
        zs = z if in_front else 1.0
        jac[k, 0, 0] = fx / zs
        jac[k, 0, 2] = -fx * x / (zs * zs)
        jac[k, 1, 1] = fy / zs
        jac[k, 1, 2] = -fy * y / (zs * zs)

        q0, q1, q2, q3 = rotations[k, 0], rotations[k, 1], rotations[k, 2], rotations[k, 3]
        qn = math.sqrt(q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3)
        qnorm[k] = qn
        r = rotmat[k]
        _rotmat(q0 / qn, q1 / qn, q2 / qn, q3 / qn, r)
        for i in range(3):
            for j in range(3):
                m[i, j] = r[i, j] * math.exp(log_scales[k, j])
        # cov3 = M M^T, then W cov3 W^T
        for i in range(3):
            for j in range(3):
                c3[i, j] = m[i, 0] * m[j, 0] + m[i, 1] * m[j, 1] + m[i, 2] * m[j, 2]
        for i in range(3):
            for j in range(3):
                wc[i, j] = wrot[i, 0] * c3[0, j] + wrot[i, 1] * c3[1, j] + wrot[i, 2] * c3[2, j]
        v = view_cov[k]
        for i in range(3):
            for j in range(3):
                v[i, j] = wc[i, 0] * wrot[j, 0] + wc[i, 1] * wrot[j, 1] + wc[i, 2] * wrot[j, 2]
        # J V J^T with J = [[j00, 0, j02], [0, j11, j12]]
        j00, j02, j11, j12 = jac[k, 0, 0], jac[k, 0, 2], jac[k, 1, 1], jac[k, 1, 2]
        u00 = j00 * v[0, 0] + j02 * v[2, 0]
        u01 = j00 * v[0, 1] + j02 * v[2, 1]
        u02 = j00 * v[0, 2] + j02 * v[2, 2]
        u10 = j11 * v[1, 0] + j12 * v[2, 0]
        u11 = j11 * v[1, 1] + j12 * v[2, 1]
        u12 = j11 * v[1, 2] + j12 * v[2, 2]
        s00 = u00 * j00 + u02 * j02
        s01 = u01 * j11 + u02 * j12
        s10 = u10 * j00 + u12 * j02
        s11 = u11 * j11 + u12 * j12
        a = s00 + dilation
        b = 0.5 * (s01 + s10)
        c = s11 + dilation
        cov2d[k, 0, 0] = a
        cov2d[k, 0, 1] = b
        cov2d[k, 1, 0] = b
        cov2d[k, 1, 1] = c
        det = a * c - b * b
        conic[k, 0] = c / det
        conic[k, 1] = -b / det
        conic[k, 2] = a / det
        mx = fx * x / zs + cx
        my = fy * y / zs + cy
        mean2d[k, 0] = mx
        mean2d[k, 1] = my
        mid = 0.5 * (a + c)
        lam = mid + math.sqrt(max((0.5 * (a - c)) ** 2 + b * b, 0.0))
        rad = 3.0 * math.sqrt(lam) if lam >= 0.0 else math.nan
        radius[k] = rad
        visible[k] = (in_front and math.isfinite(rad) and mx + rad >= 0.0 and mx - rad <= width
                      and my + rad >= 0.0 and my - rad <= height)
    return p_cam, jac, view_cov, cov2d, conic, mean2d, radius, rotmat, qnorm, visible


@njit(cache=True)
def chain(order, g2, rotations, log_scales, colors, opacity, p_cam, jac, view_cov, conic, rotmat,
          qnorm, wrot, fx, fy):
    """Map 2D-parameter gradients of the sorted Gaussians to cloud parameters.

    Returns (positions, rotations, log_scales, opacity_logits, colors, mean2d)
    gradients indexed by source Gaussian.
    """
    n = rotations.shape[0]
    d_pos = np.zeros((n, 3))
    d_rotq = np.zeros((n, 4))
    d_ls = np.zeros((n, 3))
    d_opl = np.zeros(n)
    d_col = np.zeros((n, 3))
    d_mean = np.zeros((n, 2))
    h = np.empty((2, 2))
    dv = np.empty((3, 3))
    dj = np.empty((2, 3))
    hj = np.empty((2, 3))
    tmp = np.empty((3, 3))
    dc3 = np.empty((3, 3))
    m = np.empty((3, 3))
    dm = np.empty((3, 3))
    drot = np.empty((3, 3))
    dr = np.empty((4, 3, 3))
    for s in range(order.shape[0]):
        k = order[s]
        for ch in range(3):
            if colors[k, ch] >= 0.0 and colors[k, ch] <= 1.0:
                d_col[k, ch] = g2[s, 6 + ch]
        op = opacity[k]
        d_opl[k] = g2[s, 5] * op * (1.0 - op)
        d_mean[k, 0] = g2[s, 0]
        d_mean[k, 1] = g2[s, 1]

        # conic Q = inv(cov2d); dL = tr(H dcov2d) with H = -Q Gq Q, b counted twice
        qa, qb, qc = conic[k, 0], conic[k, 1], conic[k, 2]
        ga, gb, gc = g2[s, 2], 0.5 * g2[s, 3], g2[s, 4]
        t00 = ga * qa + gb * qb
        t01 = ga * qb + gb * qc
        t10 = gb * qa + gc * qb
        t11 = gb * qb + gc * qc
        h[0, 0] = -(qa * t00 + qb * t10)
        h[0, 1] = -(qa * t01 + qb * t11)
        h[1, 0] = -(qb * t00 + qc * t10)
        h[1, 1] = -(qb * t01 + qc * t11)

        j = jac[k]
        v = view_cov[k]
        for i in range(2):
            for c in range(3):
                hj[i, c] = h[i, 0] * j[0, c] + h[i, 1] * j[1, c]
        # dV = J^T H J ; dJ = 2 H J V
        for a in range(3):
            for c in range(3):
                dv[a, c] = j[0, a] * hj[0, c] + j[1, a] * hj[1, c]
        for i in range(2):
            for c in range(3):
                dj[i, c] = 2.0 * (hj[i, 0] * v[0, c] + hj[i, 1] * v[1, c] + hj[i, 2] * v[2, c])
        # dSigma = W^T dV W
        for a in range(3):
            for c in range(3):
                tmp[a, c] = dv[a, 0] * wrot[0, c] + dv[a, 1] * wrot[1, c] + dv[a, 2] * wrot[2, c]
        for a in range(3):
            for c in range(3):
                dc3[a, c] = wrot[0, a] * tmp[0, c] + wrot[1, a] * tmp[1, c] + wrot[2, a] * tmp[2, c]

        r = rotmat[k]
        for c in range(3):
            sc = math.exp(log_scales[k, c])
            for a in range(3):
                m[a, c] = r[a, c] * sc
        for a in range(3):
            for c in range(3):
                dm[a, c] = 2.0 * (dc3[a, 0] * m[0, c] + dc3[a, 1] * m[1, c] + dc3[a, 2] * m[2, c])
        for c in range(3):
            sc = math.exp(log_scales[k, c])
            acc = 0.0
            for a in range(3):
                drot[a, c] = dm[a, c] * sc
                acc += r[a, c] * dm[a, c]
            d_ls[k, c] = acc * sc

        qn = qnorm[k]
        w, x, y, z = rotations[k, 0] / qn, rotations[k, 1] / qn, rotations[k, 2] / qn, rotations[k, 3] / qn
        dr[0, 0, 0] = 0.0
        dr[0, 0, 1] = -2 * z
        dr[0, 0, 2] = 2 * y
        dr[0, 1, 0] = 2 * z
        dr[0, 1, 1] = 0.0
        dr[0, 1, 2] = -2 * x
        dr[0, 2, 0] = -2 * y
        dr[0, 2, 1] = 2 * x
        dr[0, 2, 2] = 0.0
        dr[1, 0, 0] = 0.0
        dr[1, 0, 1] = 2 * y
        dr[1, 0, 2] = 2 * z
        dr[1, 1, 0] = 2 * y
        dr[1, 1, 1] = -4 * x
        dr[1, 1, 2] = -2 * w
        dr[1, 2, 0] = 2 * z
        dr[1, 2, 1] = 2 * w
        dr[1, 2, 2] = -4 * x
        dr[2, 0, 0] = -4 * y
        dr[2, 0, 1] = 2 * x
        dr[2, 0, 2] = 2 * w
        dr[2, 1, 0] = 2 * x
        dr[2, 1, 1] = 0.0
        dr[2, 1, 2] = 2 * z
        dr[2, 2, 0] = -2 * w
        dr[2, 2, 1] = 2 * z
        dr[2, 2, 2] = -4 * y
        dr[3, 0, 0] = -4 * z
        dr[3, 0, 1] = -2 * w
        dr[3, 0, 2] = 2 * x
        dr[3, 1, 0] = 2 * w
        dr[3, 1, 1] = -4 * z
        dr[3, 1, 2] = 2 * y
        dr[3, 2, 0] = 2 * x
        dr[3, 2, 1] = 2 * y
        dr[3, 2, 2] = 0.0
        dq0 = 0.0
        dq1 = 0.0
        dq2 = 0.0
        dq3 = 0.0
        for a in range(3):
            for c in range(3):
                dq0 += dr[0, a, c] * drot[a, c]
                dq1 += dr[1, a, c] * drot[a, c]
                dq2 += dr[2, a, c] * drot[a, c]
                dq3 += dr[3, a, c] * drot[a, c]
        # through the normalization q / |q|: drop the radial part, scale by 1/|q|
        rad = w * dq0 + x * dq1 + y * dq2 + z * dq3
        d_rotq[k, 0] = (dq0 - w * rad) / qn
        d_rotq[k, 1] = (dq1 - x * rad) / qn
        d_rotq[k, 2] = (dq2 - y * rad) / qn
        d_rotq[k, 3] = (dq3 - z * rad) / qn

        px, py, pz = p_cam[k, 0], p_cam[k, 1], p_cam[k, 2]
        z2 = pz * pz
        z3 = z2 * pz
        dmx, dmy = g2[s, 0], g2[s, 1]
        d0 = dmx * fx / pz - dj[0, 2] * fx / z2
        d1 = dmy * fy / pz - dj[1, 2] * fy / z2
        d2 = (-dmx * fx * px / z2 - dmy * fy * py / z2
              - dj[0, 0] * fx / z2 + dj[0, 2] * 2.0 * fx * px / z3
              - dj[1, 1] * fy / z2 + dj[1, 2] * 2.0 * fy * py / z3)
        for c in range(3):
            d_pos[k, c] = d0 * wrot[0, c] + d1 * wrot[1, c] + d2 * wrot[2, c]
    return d_pos, d_rotq, d_ls, d_opl, d_col, d_mean
