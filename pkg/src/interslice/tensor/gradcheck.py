"""Central finite-difference checks for every registered differentiable op."""
import numpy as np

from . import ops
from .core import Tensor


def relative_error(analytic, numeric):
    """Max-norm error scaled by the larger gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(fn, arrays, index, h=1e-5):
    """d fn(arrays) / d arrays[index] by central differences."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn(*[Tensor(a) for a in base]).item()
        flat[i] = keep - h
        fm = fn(*[Tensor(a) for a in base]).item()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_function(fn, arrays, h=1e-5, wrt=None):
    """Compare analytic and numeric gradients of scalar ``fn`` at ``arrays``.

    Returns the worst relative error over the checked inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    fn(*tensors).backward()
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numeric_grad(fn, arrays, i, h)))
    return worst


def _away_from_zero(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _fractional_flow(rng, shape, span=2.5):
    """Random flow whose sample points avoid integer grid lines (bilinear kinks)."""
    N, _, H, W = shape
    flow = rng.uniform(-span, span, size=shape)
    gy, gx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    for ch, base in ((0, gx), (1, gy)):
        pos = base + flow[:, ch]
        frac = pos - np.floor(pos)
        frac = np.clip(frac, 0.05, 0.95)
        flow[:, ch] = np.floor(pos) + frac - base
    return flow


def _weighted(fn, weights):
    return lambda *t: (fn(*t) * weights).sum()


def _case(rng, name):
    """Return (scalar fn, input arrays) for one random point of op ``name``."""
    if name == "conv2d":
        x, k, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        w = rng.normal(size=(2, 4, 6, 5))
        return _weighted(lambda x, k, b: ops.conv2d(x, k, b, stride=1, pad=1), w), [x, k, b]
    if name == "conv2d_stride2":
        x, k = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
        w = rng.normal(size=(1, 3, 4, 4))
        return _weighted(lambda x, k: ops.conv2d(x, k, stride=2, pad=1), w), [x, k]
    if name == "grid_sample_bilinear":
        img = rng.normal(size=(2, 2, 5, 6))
        flow = _fractional_flow(rng, (2, 2, 5, 6))
        w = rng.normal(size=img.shape)
        return _weighted(ops.grid_sample_bilinear, w), [img, flow]
    if name == "avgpool2":
        x = rng.normal(size=(2, 3, 4, 6))
        return _weighted(ops.avgpool2, rng.normal(size=(2, 3, 2, 3))), [x]
    if name == "upsample2":
        x = rng.normal(size=(2, 2, 3, 4))
        return _weighted(ops.upsample2, rng.normal(size=(2, 2, 6, 8))), [x]
    if name == "fully_connected":
        x, wt, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
        return _weighted(ops.fully_connected, rng.normal(size=(3, 4))), [x, wt, b]
    if name in ("add", "sub", "mul"):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        f = {"add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b}[name]
        return _weighted(f, rng.normal(size=(3, 4))), [a, b]
    if name == "div":
        a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))
        return _weighted(lambda a, b: a / b, rng.normal(size=(3, 4))), [a, b]
    if name in ("relu", "leaky_relu", "abs"):
        f = {"relu": ops.relu, "leaky_relu": ops.leaky_relu, "abs": ops.abs}[name]
        return _weighted(f, rng.normal(size=(4, 5))), [_away_from_zero(rng, (4, 5))]
    if name == "sigmoid":
        return _weighted(ops.sigmoid, rng.normal(size=(4, 5))), [rng.normal(scale=3, size=(4, 5))]
    if name == "log":
        return _weighted(ops.log, rng.normal(size=(4, 5))), [rng.uniform(0.1, 3.0, size=(4, 5))]
    if name == "exp":
        return _weighted(ops.exp, rng.normal(size=(4, 5))), [rng.normal(size=(4, 5))]
    if name == "clamp":
        x = rng.uniform(-1, 2, size=(4, 5))
        x[np.abs(x) < 0.05] += 0.1
        x[np.abs(x - 1) < 0.05] += 0.1
        return _weighted(lambda x: ops.clamp(x, 0.0, 1.0), rng.normal(size=(4, 5))), [x]
    if name == "softmax":
        return _weighted(ops.softmax, rng.normal(size=(3, 4))), [rng.normal(size=(3, 4))]
    if name == "concat":
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 1, 4))
        return _weighted(lambda a, b: ops.concat([a, b], axis=1), rng.normal(size=(2, 4, 4))), [a, b]
    if name == "matmul":
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        return _weighted(lambda a, b: a @ b, rng.normal(size=(3, 2))), [a, b]
    if name == "mean_reshape_transpose":
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 2))
        return _weighted(lambda x: x.transpose(2, 0, 1).mean(axis=2).reshape(4, 2), w), [x]
    if name == "getitem":
        x = rng.normal(size=(4, 5))
        return _weighted(lambda x: x[1:3, ::2], rng.normal(size=(2, 3))), [x]
    if name == "pow":
        x = rng.uniform(0.2, 2.0, size=(3, 3))
        return _weighted(lambda x: x ** 2.5, rng.normal(size=(3, 3))), [x]
    if name == "binary_cross_entropy":
        p = rng.uniform(0.05, 0.95, size=(2, 1, 3, 3))
        t = (rng.uniform(size=(2, 1, 3, 3)) > 0.5).astype(float)
        return (lambda p: ops.binary_cross_entropy(p, t)), [p]
    raise KeyError(name)


REGISTERED_OPS = (
    "conv2d", "conv2d_stride2", "grid_sample_bilinear", "avgpool2", "upsample2", "fully_connected",
    "add", "sub", "mul", "div", "relu", "leaky_relu", "abs", "sigmoid", "log", "exp", "clamp",
    "softmax", "concat", "matmul", "mean_reshape_transpose", "getitem", "pow", "binary_cross_entropy",
)


def run_suite(points=10, seed=0, h=1e-5, names=REGISTERED_OPS):
    """Check every op at ``points`` random double-precision points.

    Returns ``{op name: worst relative error}``.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for name in names:
        worst = 0.0
        for _ in range(points):
            fn, arrays = _case(rng, name)
            worst = max(worst, check_function(fn, arrays, h))
        results[name] = worst
    return results
