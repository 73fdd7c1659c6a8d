"""Experiment stages: data, classifier, synthesis, augmentation, segmentation, reports.

Every stage records its outputs in ``artifacts.tsv`` under the output
directory together with a key hashing the stage inputs, so a resumed run can
skip stages whose key and outputs are unchanged.
"""
import hashlib
import logging
import os

import numpy as np

from . import augment as aug
from .attention import ClassifierModel, export_activation_map, slice_targets, train_classifier
from .config import dump_config, stage_seed
from .errors import ConfigError
from .phantom import load_benchmark, make_benchmark, read_manifest, thick_slices
from .segmentation import (SegConfig, Segmenter, compare_methods, evaluate, train_segmenter,
                           write_comparison_csv, write_table_csv)
from .synthesis import SynthConfig, SynthesisModel, synthesize_between, train_synthesis, write_loss_csv
from .tensor import ParamSet, load_checkpoint, save_checkpoint
from .volume import load_volume, partition_windows, store_slices

logger = logging.getLogger(__name__)

OURS = {"ours-normal": "normal", "ours-Dis": "dis", "ours-Dis-Att": "dis_att"}
CLASSIC = {"rotation-aug": "rotation", "scaling-aug": "scaling", "gamma-aug": "gamma", "rand-aug": "elastic"}
# published SLIVER07 9-patient Dice for T = 1..5 interpolated slices
PUBLISHED_SWEEP = {1: 0.863, 2: 0.882, 3: 0.912, 4: 0.866, 5: 0.863}


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Output directory plus the artifact manifest used for ``--resume``."""

    MANIFEST = "artifacts.tsv"

    def __init__(self, out, cfg, resume=False):
        self.out = out
        self.cfg = cfg
        self.resume = resume
        os.makedirs(out, exist_ok=True)
        self.records = self._read()
        self._cache = {}

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def dir(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(p, exist_ok=True)
        return p

    def _read(self):
        records = {}
        p = os.path.join(self.out, self.MANIFEST)
        if os.path.exists(p):
            with open(p, encoding="utf-8") as fh:
                for line in fh:
                    stage, key, rel, digest = line.rstrip("\n").split("\t")
                    records.setdefault(stage, (key, []))[1].append((rel, digest))
        return records

    def _write(self):
        with open(os.path.join(self.out, self.MANIFEST), "w", encoding="utf-8") as fh:
            for stage in sorted(self.records):
                key, files = self.records[stage]
                for rel, digest in files:
                    fh.write(f"{stage}\t{key}\t{rel}\t{digest}\n")

    def stage_key(self, stage, inputs=()):
        h = hashlib.sha256(stage.encode())
        h.update(dump_config(self.cfg).encode())
        for item in inputs:
            h.update(b"\0" + (file_hash(item) if os.path.isfile(str(item)) else str(item)).encode())
        return h.hexdigest()[:20]

    def done(self, stage, key):
        if not self.resume or stage not in self.records:
            return False
        old_key, files = self.records[stage]
        if old_key != key:
            return False
        return all(os.path.exists(os.path.join(self.out, rel)) and
                   file_hash(os.path.join(self.out, rel)) == digest for rel, digest in files)

    def outputs(self, stage):
        return [os.path.join(self.out, rel) for rel, _ in self.records[stage][1]]

    def record(self, stage, key, paths):
        files = [(os.path.relpath(p, self.out), file_hash(p)) for p in paths]
        self.records[stage] = (key, files)
        self._write()

    def run(self, stage, fn, inputs=()):
        """Run ``fn() -> [paths]`` unless a resumed run already holds matching outputs."""
        key = self.stage_key(stage, inputs)
        if self.done(stage, key):
            logger.info("stage %s up to date, skipping", stage)
            return self.outputs(stage)
        paths = fn()
        self.record(stage, key, paths)
        return paths


def write_config(ws):
    p = ws.path("config.txt")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(dump_config(ws.cfg))
    return p


# -- data ----------------------------------------------------------------------------

def stage_phantoms(ws):
    cfg = ws.cfg

    def fn():
        manifest = make_benchmark(stage_seed(cfg.seed, "phantom"), cfg.n_train, cfg.n_test, ws.path("data"),
                                  cfg.height, cfg.width, cfg.n_slices)
        return [p for _, p, _ in read_manifest(manifest)] + [manifest]

    paths = ws.run("gen-phantom", fn)
    return paths[-1]


def benchmark(ws):
    """Benchmark cases from the configured manifest (generating phantoms when none is given)."""
    if "bench" not in ws._cache:
        manifest = ws.cfg.manifest or stage_phantoms(ws)
        if not os.path.exists(manifest):
            raise ConfigError(f"dataset manifest {manifest} not found")
        cases = load_benchmark(manifest)
        for split in cases:
            cases[split].sort(key=lambda c: c.seed)
        if len(cases["train"]) < max(ws.cfg.set_sizes) or not cases["test"]:
            raise ConfigError(f"manifest {manifest} has {len(cases['train'])} training and "
                              f"{len(cases['test'])} test volumes; too few for this config")
        ws._cache["bench"] = (manifest, cases)
    return ws._cache["bench"]


def train_cases(ws, n):
    return benchmark(ws)[1]["train"][:n]


def test_volumes(ws):
    return [(c.image.patient_id, c.image.slices, c.label.slices) for c in benchmark(ws)[1]["test"]]


# -- classifier ----------------------------------------------------------------------

def stage_classifier(ws, n=None):
    cfg = ws.cfg
    n = n or cfg.n_train
    name = f"classifier_n{n}"
    manifest = benchmark(ws)[0]

    def fn():
        cases = train_cases(ws, n)
        images = np.concatenate([c.image.slices for c in cases])
        labels = np.concatenate([c.label.slices for c in cases])
        model, hist = train_classifier(images, slice_targets(labels), cfg.classifier_epochs, cfg.classifier_lr,
                                       cfg.classifier_batch, seed=stage_seed(cfg.seed, name))
        ck = ws.path(f"{name}.isck")
        save_checkpoint(ck, model.params)
        csv = ws.path(f"{name}_loss.csv")
        with open(csv, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,accuracy\n")
            for epoch, loss, acc in hist:
                fh.write(f"{epoch},{loss:.8g},{acc:.6f}\n")
        organ = int(np.argmax(cases[0].label.slices.reshape(cases[0].label.n_slices, -1).sum(axis=1)))
        pgm = ws.path(f"{name}_activation.pgm")
        export_activation_map(model, cases[0].image.slices[organ], pgm)
        return [ck, csv, pgm]

    return ws.run(name, fn, [manifest])[0]


def load_classifier(path):
    model = ClassifierModel(0)
    model.params.load(load_checkpoint(path))
    model.params.freeze()
    return model


# -- synthesis ------------------------------------------------------------------------

def synth_config(cfg, seed):
    return SynthConfig(epochs=cfg.synth_epochs, lr=cfg.synth_lr, batch_size=cfg.synth_batch,
                       milestones=tuple(cfg.synth_milestones), weights=cfg.loss_weights(), seed=seed)


def stage_synth(ws, variant=None, T=None, n=None):
    cfg = ws.cfg
    variant = (variant or cfg.variant).replace("-", "_")
    T = T or cfg.T
    n = n or cfg.n_train
    name = f"synth_{variant}_T{T}_n{n}"
    cls_path = stage_classifier(ws, n)

    def fn():
        windows = []
        for c in train_cases(ws, n):
            windows += partition_windows(c.image, T, c.label)
        if not windows:
            raise ConfigError(f"no training windows of {T + 2} slices")
        cls = load_classifier(cls_path)
        model, hist = train_synthesis(windows, variant, synth_config(cfg, stage_seed(cfg.seed, name)),
                                      attention=cls.attention)
        ck = ws.path(f"{name}.isck")
        save_checkpoint(ck, model.params)
        csv = ws.path(f"{name}_loss.csv")
        write_loss_csv(csv, hist, variant)
        return [ck, csv]

    return ws.run(name, fn, [cls_path])[0], cls_path


def load_synth(path, variant, cls_path=None, height=64, width=64):
    attention = load_classifier(cls_path).attention if cls_path else None
    arrays = load_checkpoint(path)
    params = ParamSet(0)
    model = SynthesisModel(variant, height, width, attention=attention, params=params)
    params.load(arrays, strict=False)
    return model


def synthesize_volume(model, image, label, t_count):
    """Synthesized (images, labels) between every consecutive slice pair of a volume."""
    out = synthesize_between(model, image.slices, label.slices, t_count)
    if not out:
        return np.zeros((0,) + image.shape[1:], np.float32), np.zeros((0,) + image.shape[1:], np.uint8)
    return np.stack([o["image"] for o in out]), np.stack([o["label"] for o in out])


def write_synthesized(model, image, label, t_count, out_dir, stem):
    """One ISAV1/ISLB1 pair per synthesized slice, suffixed ``.t<tau*1000>``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for o in synthesize_between(model, image.slices, label.slices, t_count):
        tag = f"{stem}_{o['index']:03d}.t{int(round(o['tau'] * 1000)):03d}"
        dz = image.inter_slice_distance_mm * o["tau"]
        for arr, ext, is_label in ((o["image"], "isav", False), (o["label"], "islb", True)):
            p = os.path.join(out_dir, f"{tag}.{ext}")
            store_slices(p, arr[None], image.x_y_spacing_mm, dz, labels=is_label)
            paths.append(p)
    return paths


def stage_synthesize(ws, inputs=None):
    """Apply the synthesizer to explicit (image, label) files or to the thick training volumes."""
    cfg = ws.cfg
    ck, cls_path = stage_synth(ws)
    variant = cfg.variant

    def fn():
        model = load_synth(ck, variant, cls_path, cfg.height, cfg.width)
        paths = []
        if inputs:
            image, label = load_volume(inputs[0]), load_volume(inputs[1])
            paths += write_synthesized(model, image, label, cfg.t_count, ws.dir("synth"),
                                       image.patient_id or "input")
        else:
            for c in train_cases(ws, cfg.n_train):
                ti, tl, _, _, _ = thick_slices(c.image, c.label)
                paths += write_synthesized(model, ti, tl, cfg.t_count, ws.dir("synth"), c.image.patient_id)
        return paths

    return ws.run(f"synth_{variant}_t{cfg.t_count}", fn, [ck] + list(inputs or []))


# -- datasets per method ---------------------------------------------------------------

def thick_training(ws, n):
    imgs, labs, vols = [], [], []
    for c in train_cases(ws, n):
        ti, tl, _, _, _ = thick_slices(c.image, c.label)
        imgs.append(ti.slices)
        labs.append(tl.slices)
        vols.append((ti, tl))
    return np.concatenate(imgs), np.concatenate(labs), vols


def build_dataset(ws, method, n, seed, t_count=None, T=None):
    """Training (images, labels) for ``method`` from the first ``n`` thick-slice training volumes."""
    cfg = ws.cfg
    imgs, labs, vols = thick_training(ws, n)
    if method == "normal":
        return imgs.astype(np.float32), labs.astype(np.uint8)
    if method in CLASSIC:
        samples = aug.augment_dataset(imgs, labs, CLASSIC[method], cfg.aug_count,
                                      seed=stage_seed(cfg.seed, f"{method}-{seed}"))
        return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])
    if method in OURS:
        variant = OURS[method]
        T = T or cfg.T
        t_count = t_count or cfg.t_count
        key = ("synth-data", variant, T, n, t_count)
        if key not in ws._cache:
            ck, cls_path = stage_synth(ws, variant, T, n)
            model = load_synth(ck, variant, cls_path, cfg.height, cfg.width)
            parts_i, parts_l = [imgs], [labs]
            for ti, tl in vols:
                si, sl = synthesize_volume(model, ti, tl, t_count)
                parts_i.append(si)
                parts_l.append(sl)
            ws._cache[key] = (np.concatenate(parts_i).astype(np.float32), np.concatenate(parts_l).astype(np.uint8))
        return ws._cache[key]
    raise ConfigError(f"unknown method {method!r}")


def stage_augment(ws, method):
    """Write an augmented training set with per-sample provenance in its manifest."""
    cfg = ws.cfg
    if method not in aug.METHODS:
        raise ConfigError(f"unknown augmentation {method!r}; choose from {', '.join(aug.METHODS)}")

    def fn():
        imgs, labs, _ = thick_training(ws, cfg.n_train)
        samples = aug.augment_dataset(imgs, labs, method, cfg.aug_count, seed=stage_seed(cfg.seed, f"aug-{method}"))
        out_dir = ws.dir("augment", method)
        paths = []
        manifest = os.path.join(out_dir, "manifest.tsv")
        with open(manifest, "w", encoding="utf-8") as fh:
            for i, s in enumerate(samples):
                stem = os.path.join(out_dir, f"{method}_{i:05d}")
                store_slices(stem + ".isav", s.image[None])
                store_slices(stem + ".islb", s.label[None], labels=True)
                paths += [stem + ".isav", stem + ".islb"]
                fh.write(f"augmented\t{os.path.basename(stem)}.isav\t{s.provenance['source']}\t"
                         f"{aug.provenance_line(s)}\n")
        return paths + [manifest]

    return ws.run(f"augment_{method}", fn, [benchmark(ws)[0]])


# -- segmentation -----------------------------------------------------------------------

def seg_config(cfg, seed):
    return SegConfig(cfg.seg_epochs, cfg.seg_lr, cfg.seg_batch, seed)


def stage_train_seg(ws, method, seed=None):
    cfg = ws.cfg
    seed = cfg.seeds[0] if seed is None else seed
    name = f"seg_{method}_s{seed}"

    def fn():
        imgs, labs = build_dataset(ws, method, cfg.n_train, seed)
        model, hist = train_segmenter(imgs, labs, seg_config(cfg, seed))
        ck = ws.path(f"{name}.isck")
        save_checkpoint(ck, model.params)
        csv = ws.path(f"{name}_loss.csv")
        with open(csv, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for epoch, loss in hist:
                fh.write(f"{epoch},{loss:.8g}\n")
        return [ck, csv]

    return ws.run(name, fn, [benchmark(ws)[0]])[0]


def stage_eval(ws, method, seed=None):
    cfg = ws.cfg
    seed = cfg.seeds[0] if seed is None else seed
    ck = stage_train_seg(ws, method, seed)

    def fn():
        model = Segmenter()
        model.params.load(load_checkpoint(ck))
        report = evaluate(model, test_volumes(ws), seed=seed)
        csv = ws.path(f"eval_{method}_s{seed}.csv")
        with open(csv, "w", encoding="utf-8") as fh:
            fh.write("volume,dice\n")
            for vid, d in zip(report.volume_ids, report.dice):
                fh.write(f"{vid},{d:.6f}\n")
            fh.write(f"mean,{report.mean:.6f}\nstd,{report.std:.6f}\n")
        return [csv]

    return ws.run(f"eval_{method}_s{seed}", fn, [ck])[0]


def stage_compare(ws, methods=None):
    cfg = ws.cfg
    methods = list(methods or cfg.methods)

    def fn():
        rows = compare_methods(lambda m, n, s: build_dataset(ws, m, n, s), methods, list(cfg.set_sizes),
                               list(cfg.seeds), test_volumes(ws), seg_config(cfg, 0))
        long_csv = ws.path("comparison.csv")
        write_comparison_csv(long_csv, rows, cfg.seeds)
        table_csv = ws.path("comparison_table.csv")
        write_table_csv(table_csv, rows)
        seed_csv = ws.path("comparison_per_seed.csv")
        with open(seed_csv, "w", encoding="utf-8") as fh:
            fh.write("method,n_train,seed,mean_dice\n")
            for method, n, _, _, per_seed in rows:
                for seed, d in zip(cfg.seeds, per_seed):
                    fh.write(f"{method},{n},{seed},{d:.6f}\n")
        return [long_csv, table_csv, seed_csv]

    return ws.run("compare_" + "-".join(methods), fn, [benchmark(ws)[0]])


def sweep_counts(n_volumes_slices, T):
    """Training-set size for a sweep row: originals plus T per consecutive pair."""
    return sum(n + T * (n - 1) for n in n_volumes_slices)


def stage_sweep(ws):
    """One row per T: a synthesizer trained on T+2 windows, T slices inserted per thick pair."""
    cfg = ws.cfg
    method = {"normal": "ours-normal", "dis": "ours-Dis", "dis_att": "ours-Dis-Att"}[cfg.variant]

    def fn():
        n = max(cfg.set_sizes)
        _, _, vols = thick_training(ws, n)
        counts = [ti.n_slices for ti, _ in vols]
        csv = ws.path("sweep_t.csv")
        with open(csv, "w", encoding="utf-8") as fh:
            fh.write("T,n_train_slices,mean_dice,std_dice,seeds,published_sliver07_9\n")
            for T in cfg.t_values:
                per_seed = []
                for seed in cfg.seeds:
                    imgs, labs = build_dataset(ws, method, n, seed, t_count=T, T=T)
                    model, _ = train_segmenter(imgs, labs, seg_config(cfg, seed))
                    per_seed.append(evaluate(model, test_volumes(ws), seed=seed).mean)
                published = PUBLISHED_SWEEP.get(T, "")
                fh.write(f"{T},{sweep_counts(counts, T)},{np.mean(per_seed):.6f},{np.std(per_seed):.6f},"
                         f"{' '.join(str(s) for s in cfg.seeds)},{published}\n")
        return [csv]

    return ws.run("sweep-t", fn, [benchmark(ws)[0]])


def check_method(method):
    from .segmentation import check_methods
    return check_methods([method])[0]


def stage_grad_check(ws, points=10):
    """Finite-difference suite over every registered op plus the end-to-end FlowNet check.

    Writes ``gradcheck.csv`` and returns the exit status (0 iff every op is
    below 1e-4 and the FlowNet check below 1e-3).
    """
    from .synthesis import flownet_gradient_check
    from .tensor.gradcheck import run_suite

    results = run_suite(points=points, seed=ws.cfg.seed)
    worst = max(results.values())
    flow_err = flownet_gradient_check(seed=ws.cfg.seed)
    csv = ws.path("gradcheck.csv")
    with open(csv, "w", encoding="utf-8") as fh:
        fh.write("check,max_relative_error,threshold\n")
        for name in sorted(results):
            fh.write(f"{name},{results[name]:.3e},1e-4\n")
        fh.write(f"flownet_total_loss,{flow_err:.3e},1e-3\n")
    ws.record("grad-check", ws.stage_key("grad-check"), [csv])
    print(f"max relative error over {len(results)} ops: {worst:.3e}")
    print(f"flownet end-to-end relative error: {flow_err:.3e}")
    return 0 if worst < 1e-4 and flow_err < 1e-3 else 1
