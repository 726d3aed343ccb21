# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Interface identical to ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()

NAME = "cython"


cdef inline Py_ssize_t _lo(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # first output index whose tap k lands at input index >= 0
    cdef Py_ssize_t d = pad - k
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t size, Py_ssize_t out) nogil:
    # one past the last output index whose tap k lands inside the input
    cdef Py_ssize_t d = size - 1 + pad - k
    if d < 0:
        return 0
    return min(out, d // stride + 1)


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.empty((c * kh * kw, n, ho * wo))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t ci, ky, kx, b, oy, ox, iy, row, lo, hi, off
    cdef double* dst
    cdef const double* src
    with nogil:
        for ci in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    row = (ci * kh + ky) * kw + kx
                    lo = _lo(kx, pad, stride)
                    hi = _hi(kx, pad, stride, w, wo)
                    if hi < lo:
                        hi = lo
                    off = kx - pad
                    for b in range(n):
                        for oy in range(ho):
                            dst = &out[row, b, oy * wo]
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                for ox in range(wo):
                                    dst[ox] = 0.0
                                continue
                            src = &x[b, ci, iy, 0]
                            for ox in range(lo):
                                dst[ox] = 0.0
                            for ox in range(lo, hi):
                                dst[ox] = src[ox * stride + off]
                            for ox in range(hi, wo):
                                dst[ox] = 0.0
    return out_arr


def col2im(const double[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, ky, kx, b, oy, ox, iy, row, lo, hi, off
    cdef double* dst
    cdef const double* src
    # accumulation order per input cell: (ky, kx) ascending, as in the numpy path
    with nogil:
        for ky in range(kh):
            for kx in range(kw):
                lo = _lo(kx, pad, stride)
                hi = _hi(kx, pad, stride, w, wo)
                off = kx - pad
                for ci in range(c):
                    row = (ci * kh + ky) * kw + kx
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            src = &cols[row, b, oy * wo]
                            dst = &out[b, ci, iy, 0]
                            for ox in range(lo, hi):
                                dst[ox * stride + off] += src[ox]
    return out_arr


cdef inline double _mirrored_mean(const double* marg, Py_ssize_t size) nogil:
    # 0.5 + sum over mirrored pairs; equal weights cancel exactly
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(size // 2):
        acc += (marg[i] - marg[size - 1 - i]) * ((i + 0.5) / size - 0.5)
    return 0.5 + acc


def spatial_softmax_forward(const double[:, :, :, ::1] maps):
    cdef Py_ssize_t n = maps.shape[0], k = maps.shape[1], h = maps.shape[2], w = maps.shape[3]
    cdef Py_ssize_t hw = h * w
    points_arr = np.empty((n, k, 2))
    probs_arr = np.empty((n, k, hw))
    colm_arr = np.empty(w)
    rowm_arr = np.empty(h)
    cdef double[:, :, ::1] points = points_arr
    cdef double[:, :, ::1] probs = probs_arr
    cdef double[::1] colm = colm_arr
    cdef double[::1] rowm = rowm_arr
    cdef Py_ssize_t b, ch, y, x, i
    cdef double mx, z, inv, q
    cdef const double* src
    cdef double* dst
    with nogil:
        for b in range(n):
            for ch in range(k):
                src = &maps[b, ch, 0, 0]
                dst = &probs[b, ch, 0]
                mx = -INFINITY
                for i in range(hw):
                    if src[i] > mx:
                        mx = src[i]
                z = 0.0
                for i in range(hw):
                    q = exp(src[i] - mx)
                    dst[i] = q
                    z += q
                inv = 1.0 / z
                for x in range(w):
                    colm[x] = 0.0
                i = 0
                for y in range(h):
                    rowm[y] = 0.0
                    for x in range(w):
                        q = dst[i] * inv
                        dst[i] = q
                        colm[x] += q
                        rowm[y] += q
                        i += 1
                points[b, ch, 0] = _mirrored_mean(&colm[0], w)
                points[b, ch, 1] = _mirrored_mean(&rowm[0], h)
    return points_arr, probs_arr


def spatial_softmax_backward(const double[:, :, ::1] grad_points, const double[:, :, ::1] probs,
                             const double[:, :, ::1] points, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = probs.shape[0], k = probs.shape[1]
    out_arr = np.zeros((n, k, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, y, x
    cdef double gx, gy, px, py
    for b in range(n):
        for ch in range(k):
            gx = grad_points[b, ch, 0]
            gy = grad_points[b, ch, 1]
            px = points[b, ch, 0]
            py = points[b, ch, 1]
            for y in range(h):
                for x in range(w):
                    out[b, ch, y, x] = probs[b, ch, y * w + x] * (
                        ((x + 0.5) / w - px) * gx + ((y + 0.5) / h - py) * gy)
    return out_arr


def gap_loss_batch(const double[:, :, ::1] points, const double[:, :, ::1] centroids, const double[:, ::1] sigma_t,
                   double lambda_c, double lambda_s, double lambda_d, double delta_min):
    cdef Py_ssize_t n = points.shape[0], k = points.shape[1], m = centroids.shape[1]
    cdef Py_ssize_t s = k // m
    terms_arr = np.zeros((n, m, 3))
    grad_arr = np.zeros((n, k, 2))
    cdef double[:, :, ::1] terms = terms_arr
    cdef double[:, :, ::1] grad = grad_arr
    dist_arr = np.zeros(s)
    ux_arr = np.zeros(s)
    uy_arr = np.zeros(s)
    cdef double[::1] dist = dist_arr
    cdef double[::1] ux = ux_arr
    cdef double[::1] uy = uy_arr
    cdef Py_ssize_t b, e, i, j, base, best
    cdef double mx, my, ox, oy, sig, gap, ubx, uby, dx, dy, d, dmin, hinge, cxv, cyv, coef, div
    cdef double inv_m = 1.0 / m
    for b in range(n):
        for e in range(m):
            base = e * s
            mx = 0.0
            my = 0.0
            for i in range(s):
                mx += points[b, base + i, 0]
                my += points[b, base + i, 1]
            mx /= s
            my /= s
            ox = mx - centroids[b, e, 0]
            oy = my - centroids[b, e, 1]
            terms[b, e, 0] = ox * ox + oy * oy
            for i in range(s):
                grad[b, base + i, 0] += lambda_c * (2.0 * ox / s) * inv_m
                grad[b, base + i, 1] += lambda_c * (2.0 * oy / s) * inv_m

            sig = 0.0
            for i in range(s):
                dx = points[b, base + i, 0] - mx
                dy = points[b, base + i, 1] - my
                d = sqrt(dx * dx + dy * dy)
                dist[i] = d
                if d > 0.0:
                    ux[i] = dx / d
                    uy[i] = dy / d
                else:
                    ux[i] = 0.0
                    uy[i] = 0.0
                sig += d
            sig /= s
            gap = sig - sigma_t[b, e]
            terms[b, e, 1] = gap * gap
            ubx = 0.0
            uby = 0.0
            for i in range(s):
                ubx += ux[i]
                uby += uy[i]
            ubx /= s
            uby /= s
            coef = lambda_s * (2.0 * gap / s)
            for i in range(s):
                grad[b, base + i, 0] += coef * (ux[i] - ubx) * inv_m
                grad[b, base + i, 1] += coef * (uy[i] - uby) * inv_m

            if s < 2:
                continue
            div = 0.0
            for i in range(s):
                dmin = INFINITY
                best = -1
                for j in range(s):
                    if j == i:
                        continue
                    dx = points[b, base + i, 0] - points[b, base + j, 0]
                    dy = points[b, base + i, 1] - points[b, base + j, 1]
                    d = sqrt(dx * dx + dy * dy)
                    if d < dmin:
                        dmin = d
                        best = j
                hinge = delta_min - dmin
                if hinge <= 0.0:
                    continue
                div += hinge * hinge
                if dmin > 0.0:
                    cxv = (points[b, base + i, 0] - points[b, base + best, 0]) / dmin
                    cyv = (points[b, base + i, 1] - points[b, base + best, 1]) / dmin
                else:
                    cxv = 1.0 if i > best else -1.0
                    cyv = 0.0
                coef = (lambda_d * 2.0 / s) * hinge
                grad[b, base + i, 0] -= coef * cxv * inv_m
                grad[b, base + i, 1] -= coef * cyv * inv_m
                grad[b, base + best, 0] += coef * cxv * inv_m
                grad[b, base + best, 1] += coef * cyv * inv_m
            terms[b, e, 2] = div / s
    return terms_arr, grad_arr
