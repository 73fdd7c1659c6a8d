"""Per-step flows, training-time fusion, and joint image/label synthesis.

Images, labels and flows may be numpy arrays or :class:`Tensor` objects,
either single (C, H, W) / (H, W) or batched (N, C, H, W).
"""
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, ops
from .tensor.core import as_tensor


@dataclass
class FlowPair:
    """Bidirectional displacement between two endpoint slices, in pixels.

    ``forward`` is F_{0->1} and ``backward`` is F_{1->0}; each is (2, H, W)
    or (N, 2, H, W) with channel 0 = column shift and channel 1 = row shift.
    """

    forward: object
    backward: object

    def __post_init__(self):
        if tuple(self.forward.shape) != tuple(self.backward.shape):
            raise DimensionError(f"flow pair shapes differ: {self.forward.shape} vs {self.backward.shape}")

    @classmethod
    def from_network(cls, out):
        """Split a 4-channel network output (.., 4, H, W) into a pair."""
        out = as_tensor(out)
        if out.shape[-3] != 4:
            raise DimensionError(f"expected 4 flow channels, got shape {out.shape}")
        if out.ndim == 3:
            return cls(out[0:2], out[2:4])
        return cls(out[:, 0:2], out[:, 2:4])

    @classmethod
    def zeros(cls, height, width, dtype=np.float64):
        return cls(np.zeros((2, height, width), dtype), np.zeros((2, height, width), dtype))


def _as_image(x):
    """Promote (H, W) to (1, H, W); Tensors and arrays of rank >= 3 pass through."""
    x = as_tensor(x)
    return x.reshape((1,) + x.shape) if x.ndim == 2 else x


def intermediate_flows(pair, tau):
    """Flows from the step at ``tau`` back to each endpoint.

    Linear combination of the bidirectional pair::

        F_t->0 = -(1 - tau) * tau * F_0->1 + tau^2 * F_1->0
        F_t->1 = (1 - tau)^2 * F_0->1 - tau * (1 - tau) * F_1->0
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    f01, f10 = as_tensor(pair.forward), as_tensor(pair.backward)
    f_t0 = f01 * (-(1 - tau) * tau) + f10 * (tau * tau)
    f_t1 = f01 * ((1 - tau) ** 2) + f10 * (-tau * (1 - tau))
    return f_t0, f_t1


def fusion_weights(t, T):
    """Weights (w0, w1) applied to the warped I_0 and I_{T+1} at step t of T."""
    if not 1 <= t <= T:
        raise ContractError(f"step t must satisfy 1 <= t <= T={T}, got {t}")
    w1 = t / (T + 1)
    return 1.0 - w1, w1


def warp(image, flow):
    """Backward warp g(image, flow); a (H, W) image comes back as (H, W)."""
    squeeze = np.ndim(image.data if isinstance(image, Tensor) else image) == 2
    out = ops.grid_sample_bilinear(_as_image(image), flow)
    return out.reshape(out.shape[1:]) if squeeze else out


def _blend(a0, a1, w1, f0, f1):
    """(1 - w1) * g(a0, f0) + w1 * g(a1, f1), written so equal warps come back exactly."""
    g0 = warp(a0, f0)
    return g0 + (warp(a1, f1) - g0) * w1


def fuse_training(i0, i_end, f_t0, f_tend, t, T):
    """Training-time fusion at step t of T, clamped to [0, 1]."""
    _, w1 = fusion_weights(t, T)
    return ops.clamp(_blend(i0, i_end, w1, f_t0, f_tend), 0.0, 1.0)


def synthesize_pair(i0, i1, l0, l1, t, pair):
    """Synthesize the slice at fractional step ``t`` and its soft label.

    The label goes through exactly the same flows and weights as the image.
    """
    if not 0.0 < t < 1.0:
        raise ContractError(f"space step t must lie in (0, 1), got {t}")
    if np.shape(getattr(i0, "data", i0)) != np.shape(getattr(l0, "data", l0)):
        raise DimensionError("images and labels must be co-registered (same shape)")
    f_t0, f_t1 = intermediate_flows(pair, t)
    image = _blend(i0, i1, t, f_t0, f_t1)
    label = _blend(np.asarray(getattr(l0, "data", l0), dtype=image.dtype),
                   np.asarray(getattr(l1, "data", l1), dtype=image.dtype), t, f_t0, f_t1)
    return image, label


def binarize_label(soft, theta=0.5):
    """Threshold a soft label map: 1 where ``soft >= theta``."""
    soft = np.asarray(getattr(soft, "data", soft))
    return (soft >= theta).astype(np.uint8)
