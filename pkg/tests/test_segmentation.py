import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from interslice.errors import ConfigError, DimensionError
from interslice.phantom import generate_benchmark
from interslice.segmentation import (METHODS, EvalReport, SegConfig, Segmenter, SegUNet, check_methods, compare_methods,
                                     dice, evaluate, train_segmenter, write_comparison_csv, write_table_csv)
from interslice.tensor import ParamSet, Tensor


def square(h, w, y0, x0, size):
    m = np.zeros((h, w), np.uint8)
    m[y0:y0 + size, x0:x0 + size] = 1
    return m


def test_dice_hand_values():
    a = square(6, 6, 1, 1, 3)
    assert dice(a, a) == 1.0
    assert dice(square(6, 6, 0, 0, 2), square(6, 6, 4, 4, 2)) == 0.0
    m = np.zeros((2, 4), np.uint8)
    m[0] = 1
    n = np.zeros((2, 4), np.uint8)
    n[:, :2] = 1
    assert dice(m, n) == 0.5
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(DimensionError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))


def test_dice_properties_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 9, size=2))
        a = rng.uniform(size=shape) < rng.uniform()
        b = rng.uniform(size=shape) < rng.uniform()
        d = dice(a, b)
        assert 0.0 <= d <= 1.0
        assert d == dice(b, a)
        if a.any():
            assert dice(a, a) == 1.0


@given(st.integers(1, 20), st.integers(0, 20))
def test_dice_grows_with_intersection(size, inter):
    inter = min(inter, size)
    # |M| = |M^| = size fixed, intersection varies
    m = np.zeros(2 * size, bool)
    m[:size] = True
    lo = np.zeros(2 * size, bool)
    lo[size - inter:2 * size - inter] = True
    if inter < size:
        hi = np.zeros(2 * size, bool)
        hi[size - inter - 1:2 * size - inter - 1] = True
        assert dice(m, hi) > dice(m, lo)
    assert dice(m, lo) == pytest.approx(inter / size)


def test_unet_shape_and_range(rng):
    net = SegUNet(ParamSet(0))
    out = net(Tensor(rng.uniform(size=(2, 1, 32, 48)).astype(np.float32))).data
    assert out.shape == (2, 1, 32, 48)
    assert np.all((out > 0) & (out < 1))
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((1, 1, 24, 24), np.float32)))


def test_skip_connections_are_live(rng):
    ps = ParamSet(1, np.float64)
    net = SegUNet(ps)
    for name in ps.names():
        if name.endswith(".b"):
            ps[name].data[:] = 0.05
    x = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    base = net(x).data
    for level in range(4):
        assert np.abs(net(x, skip_scale={level: 0.0}).data - base).max() > 0


class Stub:
    def __init__(self, fn):
        self.fn = fn
        self.params = ParamSet(0)

    def predict(self, images, theta=0.5):
        return self.fn(np.asarray(images))


def stub_volumes(rng, n=3):
    vols = []
    for k in range(n):
        labs = (rng.uniform(size=(4, 8, 8)) > 0.7).astype(np.uint8)
        labs[0, 2, 2] = 1
        vols.append((f"v{k}", labs.astype(np.float32), labs))
    return vols


def test_evaluate_with_stubs(rng):
    vols = stub_volumes(rng)
    perfect = evaluate(Stub(lambda im: (im > 0.5).astype(np.uint8)), vols)
    assert perfect.mean == 1.0 and perfect.volume_ids == ["v0", "v1", "v2"]
    blank = evaluate(Stub(lambda im: np.zeros(im.shape, np.uint8)), vols)
    assert blank.mean == 0.0


def test_evaluate_pools_slices_per_volume():
    labs = np.zeros((2, 4, 4), np.uint8)
    labs[0, :2] = 1  # 8 pixels on slice 0, slice 1 empty
    pred = np.zeros_like(labs)
    pred[0, 0] = 1  # 4 pixels, all correct
    report = evaluate(Stub(lambda im: pred), [("v", labs.astype(np.float32), labs)])
    assert report.dice == [pytest.approx(2 * 4 / 12)]


def test_report_std_matches_recomputation():
    vals = [0.2, 0.5, 0.9, 0.7]
    r = EvalReport(vals)
    m = sum(vals) / 4
    assert r.mean == pytest.approx(m)
    assert r.std == pytest.approx((sum((v - m) ** 2 for v in vals) / 4) ** 0.5, rel=1e-12)


def test_unknown_method():
    with pytest.raises(ConfigError):
        check_methods(["normal", "mixup"])
    with pytest.raises(ConfigError):
        check_methods([])
    assert len(METHODS) == 8


def test_comparison_csv_layout(tmp_path, rng):
    vols = stub_volumes(rng, 2)
    calls = []

    def build(method, n, seed):
        calls.append((method, n, seed))
        return rng.uniform(size=(2, 16, 16)), (rng.uniform(size=(2, 16, 16)) > 0.5)

    rows = compare_methods(build, ["normal", "ours-normal"], [1, 2], [0, 1],
                           [(v, np.zeros((4, 16, 16)), np.zeros((4, 16, 16), np.uint8)) for v, _, _ in vols],
                           SegConfig(epochs=1))
    assert len(calls) == 8
    write_comparison_csv(tmp_path / "long.csv", rows, [0, 1])
    long_lines = (tmp_path / "long.csv").read_text().splitlines()
    assert long_lines[0] == "method,n_train,mean_dice,std_dice,seeds"
    assert len(long_lines) == 1 + 4 and long_lines[1].endswith(",0 1")
    write_table_csv(tmp_path / "table.csv", rows)
    table = [line.split(",") for line in (tmp_path / "table.csv").read_text().splitlines()]
    assert table[0] == ["method", "n1", "n2"]
    assert len(table) - 1 == 2 and all(len(r) == 3 for r in table)
    for method, n, mean, std, per_seed in rows:
        assert mean == pytest.approx(np.mean(per_seed)) and std == pytest.approx(np.std(per_seed))


def test_training_is_deterministic(rng):
    imgs = rng.uniform(size=(4, 16, 16)).astype(np.float32)
    labs = (imgs > 0.5).astype(np.float32)
    a, ha = train_segmenter(imgs, labs, SegConfig(epochs=2, seed=3))
    b, hb = train_segmenter(imgs, labs, SegConfig(epochs=2, seed=3))
    assert ha == hb
    assert a.probs(imgs).tobytes() == b.probs(imgs).tobytes()
    with pytest.raises(DimensionError):
        train_segmenter(imgs, labs[:3])


@pytest.mark.slow
def test_training_loss_decreases_on_phantoms():
    cases = generate_benchmark(4, 2, 1, height=32, width=32, n_slices=20)["train"]
    imgs = np.concatenate([c.image.slices for c in cases])
    labs = np.concatenate([c.label.slices for c in cases])
    ratios = []
    for seed in range(5):
        _, hist = train_segmenter(imgs, labs, SegConfig(epochs=20, seed=seed))
        ratios.append(hist[-1][1] / hist[0][1])
    assert np.median(ratios) < 1.0
