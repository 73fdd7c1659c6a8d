import os
import subprocess
import sys

import numpy as np
import pytest

from interslice import cli, pipeline
from interslice.volume import Volume, load_slices, load_volume, store_volume

TINY = """\
height = 16
width = 16
n_slices = 12
n_train = 2
n_test = 1
classifier_epochs = 2
synth_epochs = 1
synth_milestones = 1,1
seg_epochs = 1
seeds = 0,1
set_sizes = 1
t_values = 1,2
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_usage_errors(capsys):
    assert run() == 1
    assert run("train-everything") == 1
    assert run("compare", "--no-such-flag") == 1
    assert run("compare", "--variant", "gan") == 1
    assert run("--help") == 0
    assert "usage" in capsys.readouterr().err


def test_validation_and_runtime_exit_codes(tmp_path, tiny):
    bad = tmp_path / "bad.txt"
    bad.write_text("height = 40\n")
    assert run("gen-phantom", "--config", bad, "--out", tmp_path / "o") == 1
    assert run("eval", "--config", tiny, "--out", tmp_path / "o", "--method", "mixup") == 1
    assert run("synth", "--config", tiny, "--out", tmp_path / "o", "--input", tmp_path / "x", tmp_path / "y") == 1
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen-phantom", "--config", tiny, "--out", blocker) == 2


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "interslice.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


def test_grad_check(tmp_path, capsys):
    assert run("grad-check", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "check,max_relative_error,threshold" and len(rows) > 20


def test_import_raw(tmp_path):
    src = tmp_path / "patient7"
    src.mkdir()
    rng = np.random.default_rng(0)
    for k in range(3):
        rng.uniform(-100, 300, size=(16, 16)).astype("<f4").tofile(src / f"s{k:02d}.raw")
    out = tmp_path / "o"
    assert run("import-raw", "--out", out, "--input", src, "--height", 16, "--width", 16, "--inter-slice", 2.5) == 0
    vol = load_volume(out / "patient7.isav")
    assert vol.slices.shape == (3, 16, 16) and vol.inter_slice_distance_mm == 2.5
    assert vol.slices.min() == 0 and vol.slices.max() == 1
    assert run("import-raw", "--out", out, "--input", tmp_path / "missing", "--height", 16, "--width", 16) == 1


def test_synth_two_slice_input(tmp_path, tiny):
    rng = np.random.default_rng(1)
    img = Volume(rng.uniform(size=(2, 16, 16)).astype(np.float32), 1.0, 4.0, "pair")
    lab = Volume((rng.uniform(size=(2, 16, 16)) > 0.5).astype(np.uint8), 1.0, 4.0, "pair")
    store_volume(tmp_path / "img.isav", img)
    store_volume(tmp_path / "lab.islb", lab, labels=True)
    out = tmp_path / "o"
    assert run("synth", "--config", tiny, "--out", out, "--t-count", 3,
               "--input", tmp_path / "img.isav", tmp_path / "lab.islb") == 0
    files = sorted(os.listdir(out / "synth"))
    assert len([f for f in files if f.endswith(".isav")]) == 3
    assert len([f for f in files if f.endswith(".islb")]) == 3
    data, _, dz, is_label = load_slices(out / "synth" / files[1])
    assert is_label and data.shape == (1, 16, 16) and set(np.unique(data)) <= {0, 1}


def test_compare_rows_and_determinism(tmp_path, tiny, capsys):
    outs = []
    for name in ("a", "b"):
        assert run("compare", "--config", tiny, "--out", tmp_path / name, "--methods", "normal,ours-normal") == 0
        outs.append(tmp_path / name)
    table = (outs[0] / "comparison_table.csv").read_text().splitlines()
    assert len(table) == 1 + 2 and table[0] == "method,n1"
    for csv in ("comparison.csv", "comparison_table.csv", "comparison_per_seed.csv", "classifier_n1_loss.csv",
                "synth_normal_T3_n1_loss.csv"):
        assert (outs[0] / csv).read_bytes() == (outs[1] / csv).read_bytes()
    assert "normal" in capsys.readouterr().out


def test_resume_skips_completed_stages(tmp_path, tiny, monkeypatch):
    out = tmp_path / "o"
    assert run("train-classifier", "--config", tiny, "--out", out) == 0
    calls = []
    real = pipeline.train_classifier

    def counting(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(pipeline, "train_classifier", counting)
    assert run("train-classifier", "--config", tiny, "--out", out, "--resume") == 0
    assert calls == []
    # a changed artifact invalidates the stage
    with open(out / "classifier_n2_loss.csv", "a") as fh:
        fh.write("tampered\n")
    assert run("train-classifier", "--config", tiny, "--out", out, "--resume") == 0
    assert calls == [1]
    # without --resume the stage always runs
    assert run("train-classifier", "--config", tiny, "--out", out) == 0
    assert calls == [1, 1]
    manifest = (out / "artifacts.tsv").read_text().splitlines()
    assert any(line.startswith("classifier_n2\t") for line in manifest)


def test_augment_and_eval_stages(tmp_path, tiny, capsys):
    out = tmp_path / "o"
    assert run("augment", "--config", tiny, "--out", out, "--method", "elastic") == 0
    lines = (out / "augment" / "elastic" / "manifest.tsv").read_text().splitlines()
    assert lines and all(line.startswith("augmented\t") for line in lines)
    assert run("eval", "--config", tiny, "--out", out, "--method", "gamma-aug") == 0
    text = (out / "eval_gamma-aug_s0.csv").read_text()
    assert text.startswith("volume,dice\n") and "\nmean," in text


def test_sweep_rows(tmp_path, tiny):
    out = tmp_path / "o"
    assert run("sweep-t", "--config", tiny, "--out", out) == 0
    rows = (out / "sweep_t.csv").read_text().splitlines()
    assert rows[0] == "T,n_train_slices,mean_dice,std_dice,seeds,published_sliver07_9"
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2"]
    assert rows[1].endswith(",0.863") and rows[2].endswith(",0.882")


def test_sweep_counts():
    assert pipeline.sweep_counts([10, 10], 3) == 2 * (10 + 27)
