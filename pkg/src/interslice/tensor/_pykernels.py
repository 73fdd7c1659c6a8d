"""Pure numpy versions of the compiled kernels (same signatures as ``_ckernels``)."""
import numpy as np


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    N, C, H, W = x.shape
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, k, k, N, Ho, Wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * (Ho - 1) + 1:stride, kj:kj + stride * (Wo - 1) + 1:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, N * Ho * Wo)


def col2im(cols, shape, k, stride, pad):
    N, C, H, W = shape
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    cols = cols.reshape(C, k, k, N, Ho, Wo)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * (Ho - 1) + 1:stride, kj:kj + stride * (Wo - 1) + 1:stride] += \
                cols[:, ki, kj].transpose(1, 0, 2, 3)
    if pad:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(xp)


def _sample_coords(flow):
    N, _, H, W = flow.shape
    gy, gx = np.meshgrid(np.arange(H, dtype=flow.dtype), np.arange(W, dtype=flow.dtype), indexing="ij")
    rx = gx + flow[:, 0]
    ry = gy + flow[:, 1]
    sx = np.clip(rx, 0, W - 1)
    sy = np.clip(ry, 0, H - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (sx - x0).astype(flow.dtype)
    wy = (sy - y0).astype(flow.dtype)
    return rx, ry, x0, y0, x1, y1, wx, wy


def _gather(img, yy, xx):
    # img (N, C, H, W); yy, xx (N, H, W) -> (N, C, H, W)
    N = img.shape[0]
    n = np.arange(N)[:, None, None]
    return img[n, :, yy, xx].transpose(0, 3, 1, 2)


def grid_sample_fwd(img, flow):
    _, _, x0, y0, x1, y1, wx, wy = _sample_coords(flow)
    wx = wx[:, None]
    wy = wy[:, None]
    top = (1 - wx) * _gather(img, y0, x0) + wx * _gather(img, y0, x1)
    bot = (1 - wx) * _gather(img, y1, x0) + wx * _gather(img, y1, x1)
    return np.ascontiguousarray((1 - wy) * top + wy * bot)


def grid_sample_bwd(img, flow, gout):
    N, C, H, W = img.shape
    rx, ry, x0, y0, x1, y1, wx, wy = _sample_coords(flow)
    a = _gather(img, y0, x0)
    b = _gather(img, y0, x1)
    d = _gather(img, y1, x0)
    e = _gather(img, y1, x1)
    wx4, wy4 = wx[:, None], wy[:, None]

    gflow = np.zeros((N, 2, H, W), dtype=img.dtype)
    dsx = (gout * ((1 - wy4) * (b - a) + wy4 * (e - d))).sum(axis=1)
    dsy = (gout * ((1 - wx4) * (d - a) + wx4 * (e - b))).sum(axis=1)
    gflow[:, 0] = np.where((rx > 0) & (rx < W - 1), dsx, 0)
    gflow[:, 1] = np.where((ry > 0) & (ry < H - 1), dsy, 0)

    # scatter-add through one bincount over flat (n, c, pixel) indices
    base = (np.arange(N)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * (H * W)
    size = N * C * H * W
    gimg = np.zeros(size, dtype=np.float64)
    for yy, xx, w in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                      (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
        idx = base + (yy * W + xx)[:, None]
        gimg += np.bincount(idx.ravel(), weights=(gout * w[:, None]).ravel(), minlength=size)
    return gimg.reshape(N, C, H, W).astype(img.dtype), gflow


def _upsample_matrix(n, dtype):
    """(2n, n) interpolation matrix for a factor-2 align_corners=False upsample."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        m[o, i0] += 1 - w1
        m[o, i1] += w1
    return m.astype(dtype)


def upsample2_fwd(x):
    uh = _upsample_matrix(x.shape[2], x.dtype)
    uw = _upsample_matrix(x.shape[3], x.dtype)
    return np.ascontiguousarray(np.einsum("ah,nchw,bw->ncab", uh, x, uw, optimize=True))


def upsample2_bwd(g):
    uh = _upsample_matrix(g.shape[2] // 2, g.dtype)
    uw = _upsample_matrix(g.shape[3] // 2, g.dtype)
    return np.ascontiguousarray(np.einsum("ah,ncab,bw->nchw", uh, g, uw, optimize=True))
