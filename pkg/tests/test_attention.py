import numpy as np
import pytest

from interslice.attention import (AttentionNet, ClassifierModel, activation_image, attention_forward,
                                  balanced_batches, classifier_loss, export_activation_map, slice_targets,
                                  train_classifier)
from interslice.errors import TrainingError
from interslice.phantom import generate_benchmark
from interslice.tensor import Adam, ParamSet, Tensor, backward, decode_checkpoint, encode_checkpoint, ops
from interslice.volume import read_pgm


def test_activation_override(rng):
    net = AttentionNet(ParamSet(0, np.float64))
    img = rng.uniform(size=(8, 8))
    feats, _, gated = attention_forward(net, img, activation_override=1.0)
    np.testing.assert_array_equal(gated.data, feats.data)
    _, _, gated = attention_forward(net, img, activation_override=0.0)
    assert np.all(gated.data == 0)


def test_map_in_unit_interval_and_shapes(rng):
    net = AttentionNet(ParamSet(1))
    feats, amap, gated = attention_forward(net, rng.uniform(size=(3, 10, 12)))
    assert feats.shape == amap.shape == gated.shape == (3, 16, 10, 12)
    assert np.all(amap.data > 0) and np.all(amap.data < 1)


def test_gated_gradient_reaches_both_branches(rng):
    ps = ParamSet(2, np.float64)
    net = AttentionNet(ps)
    img = rng.uniform(size=(1, 1, 6, 6))
    grads = backward(net(Tensor(img))[2].sum(), ps)
    for name in ("att.feat.w", "att.mask1.w", "att.mask2.w"):
        assert np.abs(grads[name]).max() > 0

    j = (0, 0, 1, 1)
    h = 1e-6
    for name in ("att.feat.w", "att.mask1.w"):
        w = ps[name].data
        keep = w[j]
        w[j] = keep + h
        fp = net(Tensor(img))[2].sum().item()
        w[j] = keep - h
        fm = net(Tensor(img))[2].sum().item()
        w[j] = keep
        assert (fp - fm) / (2 * h) == pytest.approx(grads[name][j], rel=1e-5, abs=1e-8)


def test_classifier_loss_examples():
    assert classifier_loss([1], np.array([[0.5, 0.5]])).item() == pytest.approx(np.log(2))
    assert classifier_loss([1, 0], np.full((2, 2), 0.5)).item() == pytest.approx(2 * np.log(2))
    perfect = classifier_loss([1, 0], np.array([[0.0, 1.0], [1.0, 0.0]])).item()
    assert 0 <= perfect <= 2 * np.log(1 / (1 - 1e-7)) + 1e-12


def test_softmax_probabilities_sum_to_one(rng):
    model = ClassifierModel(0)
    p = model.probs(rng.uniform(size=(4, 16, 16))).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_balanced_batches(rng):
    targets = np.array([1] * 5 + [0] * 25)
    batches = balanced_batches(targets, 6, rng)
    assert len(batches) == 5
    for b in batches:
        assert targets[b].sum() == 3
    with pytest.raises(TrainingError):
        balanced_batches(np.ones(5, int), 6, rng)
    with pytest.raises(TrainingError):
        train_classifier(np.zeros((4, 8, 8)), np.zeros(4), epochs=1)


def test_freezing_contract(rng):
    cls = ClassifierModel(3)
    att = cls.attention_params()
    before = att.snapshot()
    att.freeze()
    downstream = ParamSet(4)
    downstream.conv("head", 1, 16, 1)
    opt = Adam(downstream, 1e-2)
    img = Tensor(rng.uniform(size=(2, 1, 8, 8)).astype(np.float32))
    for _ in range(100):
        _, _, gated = cls.attention(img)
        loss = ops.conv2d(gated, downstream["head.w"], downstream["head.b"]).mean()
        opt.step(backward(loss, downstream))
    for name, arr in att.snapshot().items():
        assert arr.tobytes() == before[name].tobytes()


def test_checkpoint_reload_bitwise(rng):
    model = ClassifierModel(5)
    clone = ClassifierModel(99)
    clone.params.load(decode_checkpoint(encode_checkpoint(model.params.snapshot())))
    x = rng.uniform(size=(3, 16, 16))
    assert model.probs(x).data.tobytes() == clone.probs(x).data.tobytes()


def test_activation_export(tmp_path, rng):
    model = ClassifierModel(0)
    img = rng.uniform(size=(16, 20))
    out = export_activation_map(model, img, tmp_path / "map.pgm")
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
    assert read_pgm(tmp_path / "map.pgm").shape == img.shape


@pytest.fixture(scope="module")
def trained():
    cases = generate_benchmark(11, 3, 2)
    imgs = np.concatenate([c.image.slices for c in cases["train"]])
    labs = np.concatenate([c.label.slices for c in cases["train"]])
    model, hist = train_classifier(imgs, slice_targets(labs), epochs=30, seed=0)
    return model, hist, cases


@pytest.mark.slow
def test_trained_classifier_on_phantoms(trained):
    model, hist, cases = trained
    assert hist[-1][1] < hist[0][1]
    assert hist[-1][2] >= 0.95
    inside_minus_outside = []
    for c in cases["test"]:
        for img, lab in zip(c.image.slices, c.label.slices):
            if lab.sum() > 50:
                a = activation_image(model, img)
                inside_minus_outside.append(a[lab > 0].mean() - a[lab == 0].mean())
    assert np.median(inside_minus_outside) > 0
