# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the tensor engine.

Every function here has a numpy twin in ``_pykernels`` with the same
signature and semantics; ``kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    """(N, C, H, W) -> (C*k*k, N*Ho*Wo) patch matrix with zero padding."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((C * k * k, N * Ho * Wo), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, row, base, lo, hi, off
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                off = kj - pad
                # valid ox: 0 <= ox * stride + off < W
                lo = 0 if off >= 0 else (-off + stride - 1) // stride
                hi = (W - 1 - off) // stride + 1 if W - 1 - off >= 0 else 0
                if hi > Wo:
                    hi = Wo
                for n in range(N):
                    for oy in range(Ho):
                        iy = oy * stride - pad + ki
                        if iy < 0 or iy >= H:
                            continue
                        base = (n * Ho + oy) * Wo
                        if stride == 1:
                            if hi > lo:
                                memcpy(&out[row, base + lo], &x[n, c, iy, lo + off], (hi - lo) * sizeof(real))
                        else:
                            for ox in range(lo, hi):
                                out[row, base + ox] = x[n, c, iy, ox * stride + off]
    return out_arr


def col2im(real[:, ::1] cols, shape, int k, int stride, int pad):
    """Adjoint of :func:`im2col`: scatter-add patches back into (N, C, H, W)."""
    cdef Py_ssize_t N = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, ix, row, col0
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for n in range(N):
                    col0 = n * Ho * Wo
                    for oy in range(Ho):
                        iy = oy * stride - pad + ki
                        if iy < 0 or iy >= H:
                            continue
                        for ox in range(Wo):
                            ix = ox * stride - pad + kj
                            if ix < 0 or ix >= W:
                                continue
                            out[n, c, iy, ix] += cols[row, col0 + oy * Wo + ox]
    return out_arr


cdef inline real _clampf(real v, real hi) nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def grid_sample_fwd(real[:, :, :, ::1] img, real[:, :, :, ::1] flow):
    cdef Py_ssize_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, y, x, x0, y0, x1, y1
    cdef real sx, sy, wx, wy
    for n in range(N):
        for y in range(H):
            for x in range(W):
                sx = _clampf(<real>x + flow[n, 0, y, x], <real>(W - 1))
                sy = _clampf(<real>y + flow[n, 1, y, x], <real>(H - 1))
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                x1 = x0 + 1 if x0 + 1 < W else W - 1
                y1 = y0 + 1 if y0 + 1 < H else H - 1
                wx = sx - x0
                wy = sy - y0
                for c in range(C):
                    out[n, c, y, x] = ((1 - wy) * ((1 - wx) * img[n, c, y0, x0] + wx * img[n, c, y0, x1])
                                       + wy * ((1 - wx) * img[n, c, y1, x0] + wx * img[n, c, y1, x1]))
    return out_arr


def grid_sample_bwd(real[:, :, :, ::1] img, real[:, :, :, ::1] flow, real[:, :, :, ::1] gout):
    """Gradients of the clamped bilinear warp w.r.t. image and flow."""
    cdef Py_ssize_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    dtype = np.float32 if real is float else np.float64
    gimg_arr = np.zeros((N, C, H, W), dtype=dtype)
    gflow_arr = np.zeros((N, 2, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] gimg = gimg_arr
    cdef real[:, :, :, ::1] gflow = gflow_arr
    cdef Py_ssize_t n, c, y, x, x0, y0, x1, y1
    cdef real rx, ry, sx, sy, wx, wy, g, a, b, d, e, dsx, dsy
    cdef bint inx, iny
    for n in range(N):
        for y in range(H):
            for x in range(W):
                rx = <real>x + flow[n, 0, y, x]
                ry = <real>y + flow[n, 1, y, x]
                inx = rx > 0 and rx < W - 1
                iny = ry > 0 and ry < H - 1
                sx = _clampf(rx, <real>(W - 1))
                sy = _clampf(ry, <real>(H - 1))
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                x1 = x0 + 1 if x0 + 1 < W else W - 1
                y1 = y0 + 1 if y0 + 1 < H else H - 1
                wx = sx - x0
                wy = sy - y0
                dsx = 0
                dsy = 0
                for c in range(C):
                    g = gout[n, c, y, x]
                    a = img[n, c, y0, x0]
                    b = img[n, c, y0, x1]
                    d = img[n, c, y1, x0]
                    e = img[n, c, y1, x1]
                    gimg[n, c, y0, x0] += g * (1 - wx) * (1 - wy)
                    gimg[n, c, y0, x1] += g * wx * (1 - wy)
                    gimg[n, c, y1, x0] += g * (1 - wx) * wy
                    gimg[n, c, y1, x1] += g * wx * wy
                    dsx += g * ((1 - wy) * (b - a) + wy * (e - d))
                    dsy += g * ((1 - wx) * (d - a) + wx * (e - b))
                if inx:
                    gflow[n, 0, y, x] = dsx
                if iny:
                    gflow[n, 1, y, x] = dsy
    return gimg_arr, gflow_arr


cdef inline void _up_taps(Py_ssize_t o, Py_ssize_t n_in, Py_ssize_t* i0, Py_ssize_t* i1, double* w1) noexcept nogil:
    # align_corners=False source coordinate for a factor-2 upsample
    cdef double src = (o + 0.5) / 2.0 - 0.5
    if src < 0:
        src = 0
    i0[0] = <Py_ssize_t>floor(src)
    i1[0] = i0[0] + 1 if i0[0] + 1 < n_in else n_in - 1
    w1[0] = src - i0[0]


def _taps(Py_ssize_t n_in):
    """Left/right source index and right weight for each of the 2 * n_in outputs."""
    lo = np.empty(2 * n_in, dtype=np.intp)
    hi = np.empty(2 * n_in, dtype=np.intp)
    w = np.empty(2 * n_in, dtype=np.float64)
    cdef Py_ssize_t[::1] lo_v = lo, hi_v = hi
    cdef double[::1] w_v = w
    cdef Py_ssize_t o
    for o in range(2 * n_in):
        _up_taps(o, n_in, &lo_v[o], &hi_v[o], &w_v[o])
    return lo, hi, w


def upsample2_fwd(real[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((N, C, 2 * H, 2 * W), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    ya, yb, yw = _taps(H)
    xa, xb, xw = _taps(W)
    cdef Py_ssize_t[::1] y0 = ya, y1 = yb, x0 = xa, x1 = xb
    cdef double[::1] wy = yw, wx = xw
    cdef Py_ssize_t n, c, oy, ox
    cdef double top, bot
    for n in range(N):
        for c in range(C):
            for oy in range(2 * H):
                for ox in range(2 * W):
                    top = (1 - wx[ox]) * x[n, c, y0[oy], x0[ox]] + wx[ox] * x[n, c, y0[oy], x1[ox]]
                    bot = (1 - wx[ox]) * x[n, c, y1[oy], x0[ox]] + wx[ox] * x[n, c, y1[oy], x1[ox]]
                    out[n, c, oy, ox] = <real>((1 - wy[oy]) * top + wy[oy] * bot)
    return out_arr


def upsample2_bwd(real[:, :, :, ::1] g):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], H = g.shape[2] // 2, W = g.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    ya, yb, yw = _taps(H)
    xa, xb, xw = _taps(W)
    cdef Py_ssize_t[::1] y0 = ya, y1 = yb, x0 = xa, x1 = xb
    cdef double[::1] wy = yw, wx = xw
    cdef Py_ssize_t n, c, oy, ox
    cdef double v, a, b
    for n in range(N):
        for c in range(C):
            for oy in range(2 * H):
                for ox in range(2 * W):
                    v = g[n, c, oy, ox]
                    a = v * (1 - wy[oy])
                    b = v * wy[oy]
                    out[n, c, y0[oy], x0[ox]] += <real>(a * (1 - wx[ox]))
                    out[n, c, y0[oy], x1[ox]] += <real>(a * wx[ox])
                    out[n, c, y1[oy], x0[ox]] += <real>(b * (1 - wx[ox]))
                    out[n, c, y1[oy], x1[ox]] += <real>(b * wx[ox])
    return out_arr
