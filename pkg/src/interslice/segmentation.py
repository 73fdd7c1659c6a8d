"""2D U-Net segmenter, Dice metric, evaluation reports and the method comparison harness."""
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Adam, ParamSet, Tensor, backward, no_grad, ops

logger = logging.getLogger(__name__)

ENC_WIDTHS = (16, 32, 64, 128)
DEC_WIDTHS = (128, 64, 32, 16, 16)
METHODS = ("normal", "rotation-aug", "scaling-aug", "gamma-aug", "rand-aug", "ours-normal", "ours-Dis",
           "ours-Dis-Att")


def dice(mask, mask_hat):
    """2 |M & M^| / (|M| + |M^|); two empty masks score 1."""
    a = np.asarray(mask)
    b = np.asarray(mask_hat)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


class SegUNet:
    """Encoder 16/32/64/128 (conv3x3 + relu, then avgpool2), five decoder convs, 1x1 head, sigmoid.

    The first four decoder convs are each followed by 2x upsampling and
    concatenation with the encoder output of matching scale.
    """

    def __init__(self, params, prefix="seg"):
        self.params = params
        self.prefix = prefix
        if f"{prefix}.head.w" in params:
            return
        cin = 1
        for i, w in enumerate(ENC_WIDTHS):
            params.conv(f"{prefix}.enc{i}", w, cin, 3)
            cin = w
        skips = list(reversed(ENC_WIDTHS))
        for i, w in enumerate(DEC_WIDTHS):
            params.conv(f"{prefix}.dec{i}", w, cin, 3)
            cin = w + skips[i] if i < len(skips) else w
        params.conv(f"{prefix}.head", 1, cin, 1)

    def _conv(self, name, x, k_pad=1):
        p = self.params
        return ops.conv2d(x, p[f"{self.prefix}.{name}.w"], p[f"{self.prefix}.{name}.b"], pad=k_pad)

    def __call__(self, x, skip_scale=None):
        """Per-pixel probabilities (N, 1, H, W).

        ``skip_scale`` maps an encoder level to a multiplier applied to its
        skip features (used to probe connectivity).
        """
        n = len(ENC_WIDTHS)
        if x.shape[2] % 2 ** n or x.shape[3] % 2 ** n:
            raise DimensionError(f"spatial extents {x.shape[2:]} must be divisible by {2 ** n}")
        skips = []
        for i in range(n):
            x = ops.relu(self._conv(f"enc{i}", x))
            skips.append(x)
            x = ops.avgpool2(x)
        for i in range(len(DEC_WIDTHS)):
            x = ops.relu(self._conv(f"dec{i}", x))
            if i < n:
                s = skips[n - 1 - i]
                if skip_scale and (n - 1 - i) in skip_scale:
                    s = s * skip_scale[n - 1 - i]
                x = ops.concat([ops.upsample2(x), s], axis=1)
        return ops.sigmoid(self._conv("head", x, 0))


class Segmenter:
    def __init__(self, seed=0, dtype=np.float32, params=None):
        self.params = params if params is not None else ParamSet(seed, dtype)
        self.net = SegUNet(self.params)

    def probs(self, images):
        arr = np.asarray(images, dtype=self.params.dtype)
        if arr.ndim == 2:
            arr = arr[None]
        with no_grad():
            out = [self.net(Tensor(arr[i:i + 16, None])).data[:, 0] for i in range(0, arr.shape[0], 16)]
        return np.concatenate(out)

    def predict(self, images, theta=0.5):
        return (self.probs(images) >= theta).astype(np.uint8)


def bce_loss(probs, targets):
    """Mean pixelwise binary cross-entropy."""
    return ops.binary_cross_entropy(probs, targets)


@dataclass
class SegConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 6
    seed: int = 0


def train_segmenter(images, labels, config=None, model=None, on_epoch=None):
    """Adam on shuffled mini-batches; returns ``(model, history)`` of ``(epoch, mean loss)``."""
    config = config or SegConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.float32)
    if images.shape[0] == 0:
        raise ConfigError("empty segmentation training set")
    if images.shape != labels.shape:
        raise DimensionError(f"images {images.shape} and labels {labels.shape} differ")
    model = model or Segmenter(config.seed)
    opt = Adam(model.params, config.lr)
    rng = np.random.default_rng([config.seed, 0x5E6])
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(images.shape[0])
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            probs = model.net(Tensor(images[idx, None]))
            loss = bce_loss(probs, labels[idx, None])
            opt.step(backward(loss, model.params))
            losses.append(loss.item())
        history.append((epoch, float(np.mean(losses))))
        logger.info("segmenter epoch %d loss %.4f", epoch, history[-1][1])
        if on_epoch:
            on_epoch(history[-1])
    return model, history


@dataclass
class EvalReport:
    dice: list
    volume_ids: list = field(default_factory=list)
    fingerprint: str = ""
    seed: int = 0

    @property
    def mean(self):
        return float(np.mean(self.dice))

    @property
    def std(self):
        return float(np.std(self.dice))


def params_fingerprint(params):
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()[:16]


def evaluate(model, volumes, theta=0.5, seed=0):
    """Per-volume Dice, pooling every slice of a volume before dividing.

    ``volumes`` is an iterable of ``(volume_id, images (N, H, W), labels (N, H, W))``.
    """
    scores, ids = [], []
    for vid, imgs, labs in volumes:
        scores.append(dice(np.asarray(labs), model.predict(imgs, theta)))
        ids.append(vid)
    return EvalReport(scores, ids, params_fingerprint(model.params), seed)


# -- comparison tables ------------------------------------------------------------------

def check_methods(methods):
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}; choose from {', '.join(METHODS)}")
    if not methods:
        raise ConfigError("no methods given")
    return list(methods)


def compare_methods(build_dataset, methods, set_sizes, seeds, test_volumes, seg_config=None):
    """Train and evaluate one segmenter per method x set size x seed.

    ``build_dataset(method, n_train, seed)`` returns ``(images, labels)``.
    Each cell reports mean(std) over seeds of the per-run mean test Dice.
    Returns rows ``(method, n_train, mean, std, [per-seed means])``.
    """
    methods = check_methods(methods)
    seg_config = seg_config or SegConfig()
    rows = []
    for method in methods:
        for n in set_sizes:
            per_seed = []
            for seed in seeds:
                imgs, labs = build_dataset(method, n, seed)
                cfg = SegConfig(seg_config.epochs, seg_config.lr, seg_config.batch_size, seed)
                model, _ = train_segmenter(imgs, labs, cfg)
                report = evaluate(model, test_volumes, seed=seed)
                per_seed.append(report.mean)
                logger.info("compare %s n=%d seed=%d dice %.4f", method, n, seed, report.mean)
            rows.append((method, n, float(np.mean(per_seed)), float(np.std(per_seed)), per_seed))
    return rows


def write_comparison_csv(path, rows, seeds):
    """Long format: ``method,n_train,mean_dice,std_dice,seeds``."""
    seed_text = " ".join(str(s) for s in seeds)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,n_train,mean_dice,std_dice,seeds\n")
        for method, n, mean, std, _ in rows:
            fh.write(f"{method},{n},{mean:.6f},{std:.6f},{seed_text}\n")


def write_table_csv(path, rows):
    """Wide layout: one row per method, one ``mean(std)`` column per training-set size."""
    sizes = sorted({r[1] for r in rows})
    methods = list(dict.fromkeys(r[0] for r in rows))
    cell = {(r[0], r[1]): f"{r[2]:.3f}({r[3]:.3f})" for r in rows}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method," + ",".join(f"n{n}" for n in sizes) + "\n")
        for m in methods:
            fh.write(m + "," + ",".join(cell.get((m, n), "") for n in sizes) + "\n")
