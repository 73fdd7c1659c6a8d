"""Differentiable operations used by the networks.

Spatial ops accept a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``
and return the same rank they were given.
"""
import numpy as np

from ..errors import DimensionError
from . import kernels
from .core import Tensor, as_tensor

LOG_EPS = 1e-7


def _batched(x):
    """View a rank-3 tensor as a batch of one."""
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")


def _unbatch(y, squeezed):
    return y.reshape(y.shape[1:]) if squeezed else y


# -- convolution ---------------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation with zero padding: ``(N, Cin, H, W) * (Cout, Cin, k, k)``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    x, squeezed = _batched(x)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    cout, cin, k, _ = kernel.shape
    N, C, H, W = x.shape
    if C != cin:
        raise DimensionError(f"input shape {x.shape} has {C} channels but kernel shape {kernel.shape} expects {cin}")
    if k % 2 == 0:
        raise DimensionError(f"kernel extent must be odd, got kernel shape {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"input shape {x.shape} too small for kernel shape {kernel.shape} with pad {pad}")

    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, N, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    xs, ks = x, kernel

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gk = (g2 @ cols.T).reshape(ks.shape) if ks.requires_grad else None
        gx = kernels.col2im(wmat.T @ g2, xs.shape, k, stride, pad) if xs.requires_grad else None
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (xs, ks) if bias is None else (xs, ks, bias)
    return _unbatch(Tensor._make(out, parents, back), squeezed)


def fully_connected(x, weight, bias):
    """Affine map ``weight @ x + bias`` for ``x`` of shape (D,) or (N, D)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"fully_connected: input {x.shape}, weight {weight.shape}, bias {bias.shape} are inconsistent")
    if x.ndim == 1:
        return weight @ x + bias
    return (weight @ x.T).T + bias


# -- warping and resampling ----------------------------------------------------

def grid_sample_bilinear(image, flow):
    """Backward warp: ``out(p) = image(p + flow(p))``, bilinear, border-clamped.

    ``flow`` channel 0 is the horizontal (column) displacement and channel 1
    the vertical (row) displacement, both in pixels.
    """
    image, flow = as_tensor(image), as_tensor(flow)
    image, squeezed = _batched(image)
    flow, _ = _batched(flow)
    N, C, H, W = image.shape
    if flow.shape != (N, 2, H, W):
        raise DimensionError(f"flow shape {flow.shape} does not match image shape {image.shape}")
    out = kernels.grid_sample_fwd(image.data, flow.data)
    img, fl = image, flow

    def back(g):
        gimg, gflow = kernels.grid_sample_bwd(img.data, fl.data, g)
        return gimg, gflow

    return _unbatch(Tensor._make(out, (img, fl), back), squeezed)


def avgpool2(x):
    x = as_tensor(x)
    x, squeezed = _batched(x)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avgpool2 needs even spatial extents, got shape {x.shape}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _unbatch(Tensor._make(out, (x,), back), squeezed)


def upsample2(x):
    """Factor-2 bilinear upsampling, align_corners=False convention."""
    x = as_tensor(x)
    x, squeezed = _batched(x)
    out = kernels.upsample2_fwd(x.data)
    return _unbatch(Tensor._make(out, (x,), lambda g: (kernels.upsample2_bwd(g),)), squeezed)


def pool_and_resample(x, mode):
    if mode == "avgpool2":
        return avgpool2(x)
    if mode == "bilinear_upsample2":
        return upsample2(x)
    raise ValueError(f"unknown mode {mode!r}")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    return as_tensor(a) + b


def mul(a, b):
    return as_tensor(a) * b


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.1):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x):
    """Logistic function, kept strictly inside (0, 1) at the working precision."""
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    tiny = np.finfo(d.dtype).eps
    s = np.clip(s, tiny, 1.0 - tiny)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x, eps=LOG_EPS):
    """Natural log with the argument clamped below at ``eps``."""
    x = as_tensor(x)
    safe = np.maximum(x.data, eps)
    live = x.data > eps
    return Tensor._make(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0).astype(x.dtype),))


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    return Tensor._make(e, (x,), lambda g: (g * e,))


def abs(x):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * sign,))


def clamp(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), back)


def elementwise_suite(a, b, op):
    """Dispatch one of the binary/unary elementwise ops by name (``b`` unused for unary ops)."""
    binary = {"add": add, "mul": mul, "sub": lambda u, v: as_tensor(u) - v}
    unary = {"relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "log": log, "abs": abs}
    if op in binary:
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- losses ----------------------------------------------------------------------

def mean_abs(x):
    return abs(x).mean()


def binary_cross_entropy(p, target):
    """Mean pixelwise BCE on probabilities ``p`` against a {0,1} (or soft) target."""
    p = as_tensor(p)
    t = np.asarray(target, dtype=p.dtype)
    return -(log(p) * t + log(1.0 - p) * (1.0 - t)).mean()
