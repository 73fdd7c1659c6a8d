"""Attention network and the organ-present/absent object classifier built on it."""
import logging

import numpy as np

from .errors import TrainingError
from .tensor import Adam, ParamSet, Tensor, backward, no_grad, ops
from .volume import write_pgm

logger = logging.getLogger(__name__)

ATT_CHANNELS = 16
HIDDEN = 32
SLOPE = 0.1


def _as_batch(images, dtype):
    """(H, W), (N, H, W) or (N, 1, H, W) -> (N, 1, H, W) tensor."""
    if isinstance(images, Tensor):
        x = images
        if x.ndim == 3:
            x = x.reshape((x.shape[0], 1) + x.shape[1:])
        return x
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


class AttentionNet:
    """Two branches over a 1-channel slice.

    feature branch: conv3x3 1->16, leaky-relu
    mask branch:    conv3x3 1->16, leaky-relu, conv3x3 16->16, sigmoid
    """

    def __init__(self, params, prefix="att", channels=ATT_CHANNELS):
        self.params = params
        self.prefix = prefix
        self.channels = channels
        if f"{prefix}.feat.w" not in params:
            params.conv(f"{prefix}.feat", channels, 1, 3)
            params.conv(f"{prefix}.mask1", channels, 1, 3)
            params.conv(f"{prefix}.mask2", channels, channels, 3)

    def _conv(self, name, x):
        p = self.params
        return ops.conv2d(x, p[f"{self.prefix}.{name}.w"], p[f"{self.prefix}.{name}.b"], pad=1)

    def features(self, x):
        return ops.leaky_relu(self._conv("feat", x), SLOPE)

    def activation_map(self, x):
        return ops.sigmoid(self._conv("mask2", ops.leaky_relu(self._conv("mask1", x), SLOPE)))

    def __call__(self, x, activation_override=None):
        feats = self.features(x)
        amap = self.activation_map(x) if activation_override is None else activation_override
        return feats, amap, feats * amap


def attention_forward(net, image, activation_override=None):
    """Return ``(features, activation_map, gated)`` for one slice or a batch.

    ``activation_override`` (a scalar or array broadcastable to the map)
    replaces the mask branch; used to probe the gating in isolation.
    """
    x = _as_batch(image, net.params.dtype)
    override = None
    if activation_override is not None:
        override = Tensor(np.broadcast_to(np.asarray(activation_override, dtype=x.dtype),
                                          (x.shape[0], net.channels) + x.shape[2:]).copy())
    return net(x, override)


class ObjectClassifier:
    """Global average pool of gated features -> FC 16->32 -> leaky-relu -> FC 32->2 -> softmax."""

    def __init__(self, params, prefix="cls", in_features=ATT_CHANNELS, hidden=HIDDEN):
        self.params = params
        self.prefix = prefix
        if f"{prefix}.fc1.w" not in params:
            params.linear(f"{prefix}.fc1", hidden, in_features)
            params.linear(f"{prefix}.fc2", 2, hidden)

    def __call__(self, gated):
        p = self.params
        pooled = gated.mean(axis=(2, 3))
        h = ops.leaky_relu(ops.fully_connected(pooled, p[f"{self.prefix}.fc1.w"], p[f"{self.prefix}.fc1.b"]), SLOPE)
        return ops.softmax(ops.fully_connected(h, p[f"{self.prefix}.fc2.w"], p[f"{self.prefix}.fc2.b"]), axis=-1)


class ClassifierModel:
    """Attention network plus object classifier sharing one parameter set."""

    def __init__(self, seed=0, dtype=np.float32, params=None):
        self.params = params if params is not None else ParamSet(seed, dtype)
        self.attention = AttentionNet(self.params)
        self.classifier = ObjectClassifier(self.params)

    def probs(self, images):
        x = _as_batch(images, self.params.dtype)
        _, _, gated = self.attention(x)
        return self.classifier(gated)

    def predict(self, images):
        with no_grad():
            return np.argmax(self.probs(images).data, axis=-1)

    def attention_params(self):
        return self.params.subset("att.")


def classifier_loss(targets, probs):
    """Two-class cross-entropy summed over the batch, natural log, log clamped at 1e-7.

    ``probs`` is (n, 2) with column 1 = organ present.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs, dtype=np.float64))
    y = np.asarray(targets, dtype=probs.dtype).reshape(-1)
    logp = ops.log(probs)
    return -(logp[:, 1] * y + logp[:, 0] * (1.0 - y)).sum()


def slice_targets(labels):
    """1 for slices whose mask is non-empty."""
    labels = np.asarray(labels)
    return (labels.reshape(labels.shape[0], -1).max(axis=1) > 0).astype(np.int64)


def balanced_batches(targets, batch_size, rng):
    """Index batches drawn half from each class, covering the larger class once per epoch."""
    pos = np.flatnonzero(targets == 1)
    neg = np.flatnonzero(targets == 0)
    if pos.size == 0 or neg.size == 0:
        raise TrainingError("classifier training needs both organ-present and organ-absent slices")
    n_batches = int(np.ceil(len(targets) / batch_size))
    n_pos = batch_size // 2
    n_neg = batch_size - n_pos

    def stream(idx, count):
        reps = int(np.ceil(count / idx.size))
        return np.concatenate([rng.permutation(idx) for _ in range(reps)])[:count]

    pos_order = stream(pos, n_batches * n_pos)
    neg_order = stream(neg, n_batches * n_neg)
    batches = []
    for b in range(n_batches):
        batch = np.concatenate([pos_order[b * n_pos:(b + 1) * n_pos], neg_order[b * n_neg:(b + 1) * n_neg]])
        batches.append(rng.permutation(batch))
    return batches


def train_classifier(images, targets, epochs=100, lr=5e-4, batch_size=6, seed=0, model=None, on_epoch=None):
    """Train attention + classifier with Adam on class-balanced batches.

    Returns ``(model, history)`` where history rows are ``(epoch, mean loss, train accuracy)``.
    """
    images = np.asarray(images, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.int64)
    if len(np.unique(targets)) < 2:
        raise TrainingError("classifier training needs both organ-present and organ-absent slices")
    model = model or ClassifierModel(seed)
    opt = Adam(model.params, lr)
    rng = np.random.default_rng([seed, 0xC1A5])
    history = []
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in balanced_batches(targets, batch_size, rng):
            loss = classifier_loss(targets[idx], model.probs(images[idx]))
            grads = backward(loss, model.params)
            opt.step(grads)
            losses.append(loss.item() / len(idx))
        acc = float(np.mean(model.predict(images) == targets))
        history.append((epoch, float(np.mean(losses)), acc))
        logger.info("classifier epoch %d loss %.4f acc %.3f", epoch, history[-1][1], acc)
        if on_epoch:
            on_epoch(history[-1])
    return model, history


def activation_image(model, image):
    """Channel-mean activation map of one slice, min-max rescaled to [0, 1]."""
    with no_grad():
        amap = model.attention.activation_map(_as_batch(image, model.params.dtype)).data[0].mean(axis=0)
    lo, hi = amap.min(), amap.max()
    return (amap - lo) / (hi - lo) if hi > lo else np.zeros_like(amap)


def export_activation_map(model, image, path=None):
    """Compute (and optionally write as PGM) the rescaled activation map of ``image``."""
    img = activation_image(model, image)
    if path is not None:
        write_pgm(path, img)
    return img
