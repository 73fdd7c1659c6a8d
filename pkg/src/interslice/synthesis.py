"""Intermediate slice synthesis: flow U-Net, loss terms, discriminators and training.

The generator predicts one bidirectional flow pair per window of T+2 slices.
Per-step flows come from :func:`warp.intermediate_flows`, and the
intermediate slices are fused from the two warped endpoints. Three variants
are supported:

``normal``   reconstruction-style terms only, no discriminators
``dis``      plus a global and a label-gated local discriminator
``dis_att``  plus a global and an attention-gated local discriminator (frozen attention)
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Adam, ParamSet, Tensor, backward, no_grad, ops
from .tensor.gradcheck import relative_error
from .warp import FlowPair, binarize_label, fuse_training, intermediate_flows, synthesize_pair, warp

logger = logging.getLogger(__name__)

SLOPE = 0.1
FLOW_WIDTHS = (32, 64, 128, 256)
FLOW_SCALE = 4.0  # head output unit, in pixels
# Intensity unit of the L1 fidelity terms: the weight set was tuned with pixel values in [0, 255].
LOSS_INTENSITY_SCALE = 255.0
DISC_WIDTHS = (16, 32, 64)
VARIANTS = ("normal", "dis", "dis_att")
LOSS_TERMS = ("rec", "per", "warp", "smooth", "adv")


@dataclass
class LossWeights:
    rec: float = 2.0
    per: float = 0.005
    warp: float = 1.0
    smooth: float = 1.0
    adv: float = 1.0

    def __post_init__(self):
        for name in LOSS_TERMS:
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be non-negative")


def normalize_variant(variant):
    v = variant.replace("-", "_").lower()
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from normal, dis, dis-att")
    return v


# -- networks ------------------------------------------------------------------------

class FlowNet:
    """U-Net from (I_0, I_end) stacked as 2 channels to a 4-channel flow pair.

    Encoder levels 32/64/128/256 (two 3x3 convs + leaky-relu each, avgpool2
    between levels); the decoder mirrors it with bilinear upsampling and skip
    concatenation; a 1x1 head emits (F_0->1, F_1->0).
    """

    def __init__(self, params, prefix="flow", widths=FLOW_WIDTHS, scale=FLOW_SCALE):
        self.params = params
        self.prefix = prefix
        self.widths = widths
        self.scale = scale
        if f"{prefix}.head.w" in params:
            return
        cin = 2
        for i, w in enumerate(widths):
            params.conv(f"{prefix}.enc{i}.a", w, cin, 3)
            params.conv(f"{prefix}.enc{i}.b", w, w, 3)
            cin = w
        for i in reversed(range(len(widths) - 1)):
            params.conv(f"{prefix}.dec{i}.a", widths[i], widths[i + 1] + widths[i], 3)
            params.conv(f"{prefix}.dec{i}.b", widths[i], widths[i], 3)
        params.conv(f"{prefix}.head", 4, widths[0], 1)

    def _block(self, name, x):
        p = self.params
        for part in ("a", "b"):
            x = ops.leaky_relu(ops.conv2d(x, p[f"{self.prefix}.{name}.{part}.w"], p[f"{self.prefix}.{name}.{part}.b"],
                                          pad=1), SLOPE)
        return x

    def __call__(self, i0, i1):
        x = ops.concat([i0, i1], axis=1)
        factor = 2 ** (len(self.widths) - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ContractError(f"spatial extents {x.shape[2:]} must be divisible by {factor}")
        skips = []
        for i in range(len(self.widths)):
            x = self._block(f"enc{i}", x)
            if i < len(self.widths) - 1:
                skips.append(x)
                x = ops.avgpool2(x)
        for i in reversed(range(len(self.widths) - 1)):
            x = ops.concat([ops.upsample2(x), skips[i]], axis=1)
            x = self._block(f"dec{i}", x)
        p = self.params
        out = ops.conv2d(x, p[f"{self.prefix}.head.w"], p[f"{self.prefix}.head.b"])
        return FlowPair.from_network(out * self.scale if self.scale != 1 else out)


class Discriminator:
    """Three stride-2 3x3 convs (16/32/64, leaky-relu), one FC layer, sigmoid."""

    def __init__(self, params, prefix, in_channels, height, width, widths=DISC_WIDTHS):
        self.params = params
        self.prefix = prefix
        self.widths = widths
        if f"{prefix}.fc.w" in params:
            return
        cin = in_channels
        h, w = height, width
        for i, c in enumerate(widths):
            params.conv(f"{prefix}.conv{i}", c, cin, 3)
            cin = c
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        params.linear(f"{prefix}.fc", 1, cin * h * w)

    def __call__(self, x):
        p = self.params
        for i in range(len(self.widths)):
            x = ops.leaky_relu(ops.conv2d(x, p[f"{self.prefix}.conv{i}.w"], p[f"{self.prefix}.conv{i}.b"],
                                          stride=2, pad=1), SLOPE)
        flat = x.reshape(x.shape[0], -1)
        return ops.sigmoid(ops.fully_connected(flat, p[f"{self.prefix}.fc.w"], p[f"{self.prefix}.fc.b"]))


class FeatureExtractor:
    """Frozen feature branch of a trained attention network (perceptual features)."""

    def __init__(self, attention):
        self.attention = attention

    def __call__(self, x):
        return self.attention.features(x)


class SynthesisModel:
    """Generator plus (variant-dependent) discriminators in one parameter set."""

    def __init__(self, variant="normal", height=64, width=64, seed=0, dtype=np.float32, attention=None,
                 params=None):
        self.variant = normalize_variant(variant)
        self.params = params if params is not None else ParamSet(seed, dtype)
        self.flownet = FlowNet(self.params)
        self.attention = attention
        self.gd = self.ld = None
        if self.variant != "normal":
            if self.variant == "dis_att" and attention is None:
                raise ConfigError("variant dis_att needs a trained attention network (classifier checkpoint)")
            self.gd = Discriminator(self.params, "gd", 1, height, width)
            local_in = attention.channels if self.variant == "dis_att" else 1
            self.ld = Discriminator(self.params, "ld", local_in, height, width)

    def generator_params(self):
        return self.params.subset("flow.")

    def discriminator_params(self):
        return self.params.subset("gd.") if self.gd is None else _merge(self.params.subset("gd."),
                                                                         self.params.subset("ld."))

    def flows(self, i0, i1):
        return self.flownet(_batch(i0, self.params.dtype), _batch(i1, self.params.dtype))


def _merge(a, b):
    out = ParamSet(a.rng_seed, a.dtype)
    out._params = {**a._params, **b._params}
    return out


def _batch(x, dtype):
    """(H, W) -> (1, 1, H, W); (N, H, W) -> (N, 1, H, W); tensors pass through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        return Tensor(arr[None, None])
    if arr.ndim == 3:
        return Tensor(arr[:, None])
    return Tensor(arr)


# -- loss terms ------------------------------------------------------------------------

def reconstruction_loss(truths, predictions):
    """(1/T) * sum_t mean|pred_t - I_t|."""
    T = len(predictions)
    return sum(ops.mean_abs(p - t) for p, t in zip(predictions, truths)) * (1.0 / T)


def perceptual_loss(phi, truths, predictions):
    """(1/T) * sum_t mean squared difference of extracted features."""
    if phi is None:
        raise ConfigError("perceptual loss needs the feature extractor of a trained attention network")
    T = len(predictions)
    total = 0.0
    for p, t in zip(predictions, truths):
        with no_grad():
            target = phi(t.detach() if isinstance(t, Tensor) else t).data
        d = phi(p) - target
        total = total + (d * d).mean()
    return total * (1.0 / T)


def warping_loss(i0, i_end, truths, pair, T):
    """L1 fidelity of every warped reconstruction the flows imply."""
    loss = ops.mean_abs(i0 - warp(i_end, pair.forward)) + ops.mean_abs(i_end - warp(i0, pair.backward))
    steps = 0.0
    for t, truth in enumerate(truths, start=1):
        f_t0, f_t1 = intermediate_flows(pair, t / (T + 1))
        steps = steps + ops.mean_abs(truth - warp(i0, f_t0)) + ops.mean_abs(truth - warp(i_end, f_t1))
    return loss + steps * (1.0 / T)


def flow_tv_components(flow):
    """Per-channel (mean |horizontal diff|, mean |vertical diff|) of a (.., C, H, W) flow, as arrays."""
    f = np.asarray(getattr(flow, "data", flow))
    dx = np.abs(np.diff(f, axis=-1)).mean(axis=(-2, -1))
    dy = np.abs(np.diff(f, axis=-2)).mean(axis=(-2, -1))
    if f.ndim == 4:
        dx, dy = dx.mean(axis=0), dy.mean(axis=0)
    return dx, dy


def _tv(flow):
    flow = flow if isinstance(flow, Tensor) else Tensor(np.asarray(flow, dtype=np.float64))
    dx = flow[..., :, 1:] - flow[..., :, :-1]
    dy = flow[..., 1:, :] - flow[..., :-1, :]
    return ops.mean_abs(dx) + ops.mean_abs(dy)


def smoothness_loss(pair):
    """Total variation of both flows: sum over F in (F_0->1, F_1->0) of mean|dF/dx| + mean|dF/dy|."""
    return _tv(pair.forward) + _tv(pair.backward)


def adversarial_loss(ld_fake, gd_fake):
    """Generator loss against both discriminators.

    Each argument is a list (length T) of discriminator outputs on the
    synthesized slices; an output may be an array over a batch, which is
    averaged. ``ld_fake`` entries may be None when the local path skips a step.
    """
    T = len(gd_fake)
    loss = 0.0
    for d in gd_fake:
        loss = loss - ops.log(d).mean()
    for d in ld_fake:
        if d is not None:
            loss = loss - ops.log(d).mean()
    return loss * (1.0 / T)


def discriminator_loss(d_fake, d_real):
    """-(1/T) sum log(1 - D(fake_t)) - (1/T) sum log D(real_t), entries may be None (skipped)."""
    T = len(d_fake)
    loss = 0.0
    for f, r in zip(d_fake, d_real):
        if f is None:
            continue
        loss = loss - ops.log(1.0 - f).mean() - ops.log(r).mean()
    return loss * (1.0 / T)


def discriminator_losses(gd_fake, gd_real, ld_fake, ld_real):
    """``(l_global, l_local)`` from per-step discriminator outputs."""
    return discriminator_loss(gd_fake, gd_real), discriminator_loss(ld_fake, ld_real)


# -- window batches --------------------------------------------------------------------

def stack_windows(windows, dtype=np.float32):
    """List of TrainWindow -> (images (B, T+2, H, W), labels (B, T+2, H, W))."""
    imgs = np.stack([w.images for w in windows]).astype(dtype)
    labs = np.stack([w.labels for w in windows]).astype(dtype)
    return imgs, labs


def predict_window(model, images):
    """Flow pair and the T fused predictions for a (B, T+2, H, W) window batch."""
    T = images.shape[1] - 2
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.params.dtype))
    i0 = x[:, 0:1]
    i_end = x[:, T + 1:T + 2]
    pair = model.flownet(i0, i_end)
    preds = []
    for t in range(1, T + 1):
        f_t0, f_t1 = intermediate_flows(pair, t / (T + 1))
        preds.append(fuse_training(i0, i_end, f_t0, f_t1, t, T))
    return i0, i_end, pair, preds


def _local_inputs(model, slices, labels):
    """Local-discriminator inputs per step and the batch rows they cover (None if no rows)."""
    out = []
    for s, lab in zip(slices, labels):
        if model.variant == "dis_att":
            _, _, gated = model.attention(s)
            out.append((gated, None))
        else:
            keep = np.flatnonzero(lab.reshape(lab.shape[0], -1).max(axis=1) > 0)
            if keep.size == 0:
                out.append((None, keep))
            else:
                out.append((s[keep] * lab[keep], keep))
    return out


def generator_terms(model, images, labels, phi, weights=None, intensity_scale=LOSS_INTENSITY_SCALE):
    """All generator loss terms for one window batch, as a dict of scalar tensors (incl. ``total``).

    The L1 terms (rec, warp) see intensities multiplied by ``intensity_scale``;
    the networks themselves always work on [0, 1] slices.
    """
    weights = weights or LossWeights()
    T = images.shape[1] - 2
    x = Tensor(np.asarray(images, dtype=model.params.dtype))
    i0, i_end, pair, preds = predict_window(model, x)
    truths = [x[:, t:t + 1] for t in range(1, T + 1)]
    s = float(intensity_scale)
    terms = {
        "rec": reconstruction_loss([t * s for t in truths], [p * s for p in preds]),
        "per": perceptual_loss(phi, truths, preds),
        "warp": warping_loss(i0 * s, i_end * s, [t * s for t in truths], pair, T),
        "smooth": smoothness_loss(pair),
    }
    total = (terms["rec"] * weights.rec + terms["per"] * weights.per + terms["warp"] * weights.warp
             + terms["smooth"] * weights.smooth)
    if model.variant != "normal":
        lab = np.asarray(labels, dtype=model.params.dtype)
        step_labels = [lab[:, t:t + 1] for t in range(1, T + 1)]
        gd_fake = [model.gd(p) for p in preds]
        ld_fake = [model.ld(inp) if inp is not None else None for inp, _ in _local_inputs(model, preds, step_labels)]
        terms["adv"] = adversarial_loss(ld_fake, gd_fake)
        total = total + terms["adv"] * weights.adv
    terms["total"] = total
    return terms


def discriminator_terms(model, images, labels, preds=None):
    """``(l_global, l_local)`` for one window batch with the generator held fixed."""
    T = images.shape[1] - 2
    x = Tensor(np.asarray(images, dtype=model.params.dtype))
    if preds is None:
        with no_grad():
            _, _, _, preds = predict_window(model, x)
    preds = [p.detach() for p in preds]
    reals = [x[:, t:t + 1].detach() for t in range(1, T + 1)]
    lab = np.asarray(labels, dtype=model.params.dtype)
    step_labels = [lab[:, t:t + 1] for t in range(1, T + 1)]
    gd_fake = [model.gd(p) for p in preds]
    gd_real = [model.gd(r) for r in reals]
    ld_fake = [model.ld(i) if i is not None else None for i, _ in _local_inputs(model, preds, step_labels)]
    ld_real = [model.ld(i) if i is not None else None for i, _ in _local_inputs(model, reals, step_labels)]
    return discriminator_losses(gd_fake, gd_real, ld_fake, ld_real)


# -- training ----------------------------------------------------------------------------

@dataclass
class SynthConfig:
    epochs: int = 200
    lr: float = 5e-4
    batch_size: int = 6
    milestones: tuple = (100, 150)
    lr_decay: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    intensity_scale: float = LOSS_INTENSITY_SCALE

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch`` (decayed once per passed milestone)."""
        return self.lr * self.lr_decay ** sum(epoch >= m for m in self.milestones)


def scaled_milestones(epochs, base_epochs=200, base=(100, 150)):
    """Milestones at the same fraction of training as the full schedule."""
    return tuple(int(round(m * epochs / base_epochs)) for m in base)


def csv_columns(variant):
    cols = ["epoch", "rec", "per", "warp", "smooth"]
    if normalize_variant(variant) != "normal":
        cols.append("adv")
    cols.append("total")
    if normalize_variant(variant) != "normal":
        cols += ["d_global", "d_local"]
    return cols


def train_synthesis(windows, variant="normal", config=None, attention=None, model=None, on_epoch=None):
    """Alternating GAN training (one discriminator step, then one generator step, per batch).

    ``attention`` is a frozen :class:`AttentionNet`; its feature branch is the
    perceptual extractor and, for ``dis_att``, it gates the local path.
    Returns ``(model, history)``; history rows are dicts keyed by :func:`csv_columns`.
    """
    config = config or SynthConfig()
    variant = normalize_variant(variant)
    if not windows:
        raise ConfigError("no training windows")
    if attention is None:
        raise ConfigError("synthesis training needs a trained classifier checkpoint (perceptual features)")
    Ts = {w.T for w in windows}
    if len(Ts) != 1:
        raise ConfigError(f"windows mix different T values: {sorted(Ts)}")
    H, W = windows[0].images.shape[1:]
    if model is None:
        model = SynthesisModel(variant, H, W, seed=config.seed, attention=attention)
    attention.params.freeze()
    phi = FeatureExtractor(attention)
    gen_params = model.generator_params()
    gen_opt = Adam(gen_params, config.lr)
    disc_params = model.discriminator_params() if variant != "normal" else None
    disc_opt = Adam(disc_params, config.lr) if disc_params is not None else None
    imgs_all, labs_all = stack_windows(windows, model.params.dtype)
    rng = np.random.default_rng([config.seed, 0x5E7])
    cols = csv_columns(variant)
    history = []
    for epoch in range(config.epochs):
        gen_opt.lr = config.lr_at(epoch)
        if disc_opt is not None:
            disc_opt.lr = config.lr_at(epoch)
        sums = {c: 0.0 for c in cols if c != "epoch"}
        order = rng.permutation(len(windows))
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            imgs, labs = imgs_all[idx], labs_all[idx]
            if disc_opt is not None:
                l_global, l_local = discriminator_terms(model, imgs, labs)
                d_total = l_global + l_local
                disc_opt.step(backward(d_total, disc_params))
                sums["d_global"] += float(l_global.item())
                sums["d_local"] += float(l_local.item() if isinstance(l_local, Tensor) else l_local)
                disc_params.freeze()
            terms = generator_terms(model, imgs, labs, phi, config.weights, config.intensity_scale)
            gen_opt.step(backward(terms["total"], gen_params))
            if disc_params is not None:
                for t in disc_params.values():
                    t.requires_grad = True
            for name, value in terms.items():
                sums[name] += float(value.item())
            n_batches += 1
        row = {"epoch": epoch + 1, **{k: v / n_batches for k, v in sums.items()}}
        history.append(row)
        logger.info("synth epoch %d rec %.4f total %.4f lr %.2e", epoch + 1, row["rec"], row["total"],
                    gen_opt.lr)
        if on_epoch:
            on_epoch(row)
    return model, history


def write_loss_csv(path, history, variant):
    cols = csv_columns(variant)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(str(row["epoch"]) if c == "epoch" else f"{row[c]:.8g}" for c in cols) + "\n")


# -- inference ---------------------------------------------------------------------------

def synthesize_between(model, images, labels, t_count, binarize=True, theta=0.5):
    """Synthesize ``t_count`` slices (and labels) between every consecutive pair of slices.

    Returns a list of dicts with keys image, label, soft_label, index (left slice) and tau.
    """
    images = np.asarray(images, dtype=model.params.dtype)
    labels = np.asarray(labels)
    out = []
    with no_grad():
        for i in range(images.shape[0] - 1):
            pair = model.flows(images[i], images[i + 1])
            pair = FlowPair(pair.forward[0], pair.backward[0])
            for k in range(1, t_count + 1):
                tau = k / (t_count + 1)
                img, soft = synthesize_pair(images[i], images[i + 1], labels[i], labels[i + 1], tau, pair)
                img = np.clip(img.data, 0.0, 1.0)
                soft = np.clip(soft.data, 0.0, 1.0)
                out.append({"image": img.astype(np.float32), "soft_label": soft.astype(np.float32),
                            "label": binarize_label(soft, theta) if binarize else soft.astype(np.float32),
                            "index": i, "tau": tau})
    return out


def crossfade(i0, i1, tau):
    return (1.0 - tau) * np.asarray(i0, dtype=np.float64) + tau * np.asarray(i1, dtype=np.float64)


def psnr(pred, truth, peak=1.0):
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


# -- end-to-end gradient check -------------------------------------------------------------

def flownet_gradient_check(n_params=20, size=8, T=3, seed=0, h=1e-5, variant="dis_att"):
    """Analytic vs central-difference gradient of the total generator loss.

    Runs in double precision on a tiny ``size`` x ``size`` window with frozen
    discriminators and a random frozen attention network; returns the
    relative error over ``n_params`` randomly chosen FlowNet weights.
    """
    from .attention import AttentionNet

    rng = np.random.default_rng(seed)
    att = AttentionNet(ParamSet(seed + 1, np.float64))
    att.params.freeze()
    model = SynthesisModel(variant, size, size, seed=seed, dtype=np.float64, attention=att)
    model.discriminator_params().freeze()
    images = rng.uniform(0.1, 0.9, size=(2, T + 2, size, size))
    labels = (rng.uniform(size=(2, T + 2, size, size)) > 0.5).astype(np.float64)
    phi = FeatureExtractor(att)
    gen = model.generator_params()

    def loss_value():
        with no_grad():
            return generator_terms(model, images, labels, phi)["total"].item()

    grads = backward(generator_terms(model, images, labels, phi)["total"], gen)
    names = gen.names()
    analytic, numeric = [], []
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        flat = gen[name].data.reshape(-1)
        j = int(rng.integers(flat.size))
        keep = flat[j]
        flat[j] = keep + h
        fp = loss_value()
        flat[j] = keep - h
        fm = loss_value()
        flat[j] = keep
        analytic.append(grads[name].reshape(-1)[j])
        numeric.append((fp - fm) / (2 * h))
    return relative_error(np.array(analytic), np.array(numeric))
