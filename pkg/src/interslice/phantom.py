"""Procedural labeled phantom volumes.

Each phantom is a single elliptical "organ" whose center, axes and
orientation vary smoothly with slice index, on top of a low-frequency
background texture that drifts in-plane from slice to slice. Consecutive
slices are therefore strongly correlated and the motion between slices is
explainable by a smooth displacement field, which is what inter-slice
interpolation exploits.
"""
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PhantomSpecError
from .volume import Volume, load_volume, store_volume

NOISE_SIGMA = 0.02
THICK_STEP = 4


@dataclass
class PhantomSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    n_slices: int = 40
    # organ center path: c(z) = center + amp * sin(2*pi*z/period + phase), per axis (row, col)
    center: tuple = (32.0, 32.0)
    path_amp: tuple = (3.0, 4.0)
    path_period: float = 60.0
    path_phase: tuple = (0.0, 1.0)
    # organ occupies slices [z_start, z_end]; axes grow from radius_min_frac * radius_max to radius_max
    z_start: float = 6.0
    z_end: float = 33.0
    radius_max: tuple = (13.0, 17.0)
    radius_min_frac: float = 0.6
    tilt_rate: float = 0.02  # ellipse rotation, radians per slice
    # background texture
    texture_scale: float = 6.0
    texture_contrast: float = 0.12
    texture_drift: tuple = (0.35, -0.5)  # pixels per slice (row, col)
    organ_mean: float = 0.68
    background_mean: float = 0.32
    noise_sigma: float = NOISE_SIGMA

    @classmethod
    def random(cls, seed, height=64, width=64, n_slices=40):
        """Draw a valid spec from ``seed`` (geometry scaled to the grid size)."""
        rng = np.random.default_rng([seed, 0x5EED])
        s = min(height, width) / 64.0
        span = n_slices / 40.0
        return cls(
            seed=int(seed), height=height, width=width, n_slices=n_slices,
            center=(height / 2 + rng.uniform(-3, 3) * s, width / 2 + rng.uniform(-3, 3) * s),
            path_amp=(rng.uniform(1.5, 4.0) * s, rng.uniform(1.5, 5.0) * s),
            path_period=rng.uniform(45, 80) * span,
            path_phase=(rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)),
            z_start=rng.uniform(4.5, 8.0) * span,
            z_end=rng.uniform(30.0, 34.0) * span,
            radius_max=(rng.uniform(11, 14) * s, rng.uniform(14, 18) * s),
            radius_min_frac=rng.uniform(0.55, 0.65),
            tilt_rate=rng.uniform(-0.03, 0.03) / span,
            texture_drift=(rng.uniform(-0.5, 0.5) * s / span, rng.uniform(-0.6, 0.6) * s / span),
            organ_mean=rng.uniform(0.62, 0.74),
            background_mean=rng.uniform(0.28, 0.36),
        )

    # -- geometry ---------------------------------------------------------------
    def center_at(self, z):
        return tuple(c + a * np.sin(2 * np.pi * z / self.path_period + p)
                     for c, a, p in zip(self.center, self.path_amp, self.path_phase))

    def radii_at(self, z):
        if not (self.z_start <= z <= self.z_end) or self.z_end <= self.z_start:
            return 0.0, 0.0
        u = (z - self.z_start) / (self.z_end - self.z_start)
        f = self.radius_min_frac + (1 - self.radius_min_frac) * np.sin(np.pi * u)
        return self.radius_max[0] * f, self.radius_max[1] * f

    def validate(self):
        if self.height < 8 or self.width < 8 or self.n_slices < 2:
            raise PhantomSpecError(f"grid {self.height}x{self.width}x{self.n_slices} too small")
        for z in range(self.n_slices):
            ry, rx = self.radii_at(z)
            if ry <= 0 and rx <= 0:
                continue
            cy, cx = self.center_at(z)
            reach = max(ry, rx)  # bounds a rotated ellipse
            if cy - reach < 2 or cx - reach < 2 or cy + reach > self.height - 3 or cx + reach > self.width - 3:
                raise PhantomSpecError(f"organ leaves the grid (2-pixel margin) at slice {z}")


def _texture(rng, shape, scale):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    field -= field.mean()
    return field / (np.abs(field).max() + 1e-12)


def organ_mask(spec, z):
    ry, rx = spec.radii_at(z)
    if ry <= 0 or rx <= 0:
        return np.zeros((spec.height, spec.width), dtype=np.uint8)
    cy, cx = spec.center_at(z)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    th = spec.tilt_rate * z
    dy, dx = yy - cy, xx - cx
    u = np.cos(th) * dy + np.sin(th) * dx
    v = -np.sin(th) * dy + np.cos(th) * dx
    return ((u / ry) ** 2 + (v / rx) ** 2 <= 1.0).astype(np.uint8)


def generate_phantom(spec):
    """Return ``(image Volume, label Volume)`` for ``spec``; bitwise reproducible."""
    spec.validate()
    H, W, N = spec.height, spec.width, spec.n_slices
    rng = np.random.default_rng([spec.seed, 0xFA57])
    pad = int(np.ceil(max(abs(spec.texture_drift[0]), abs(spec.texture_drift[1])) * N)) + 4
    canvas = (H + 2 * pad, W + 2 * pad)
    background = _texture(rng, canvas, spec.texture_scale)
    organ_tex = _texture(rng, canvas, spec.texture_scale * 0.6)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    images = np.empty((N, H, W), dtype=np.float32)
    labels = np.empty((N, H, W), dtype=np.uint8)
    for z in range(N):
        sy, sx = spec.texture_drift[0] * z, spec.texture_drift[1] * z
        bg = ndimage.map_coordinates(background, [yy + pad - sy, xx + pad - sx], order=1, mode="wrap")
        cy, cx = spec.center_at(z)
        oy, ox = cy - spec.center[0], cx - spec.center[1]
        ot = ndimage.map_coordinates(organ_tex, [yy + pad - oy, xx + pad - ox], order=1, mode="wrap")
        mask = organ_mask(spec, z)
        img = spec.background_mean + spec.texture_contrast * bg
        img = np.where(mask > 0, spec.organ_mean + 0.5 * spec.texture_contrast * ot, img)
        img = img + spec.noise_sigma * rng.standard_normal((H, W))
        images[z] = np.clip(img, 0.0, 1.0)
        labels[z] = mask
    pid = f"phantom{spec.seed}"
    return Volume(images, 1.0, 1.0, pid), Volume(labels, 1.0, 1.0, pid)


def adjacent_iou(labels):
    """IoU between consecutive label slices; NaN where both are empty."""
    out = []
    for a, b in zip(labels[:-1], labels[1:]):
        union = np.logical_or(a, b).sum()
        out.append(np.logical_and(a, b).sum() / union if union else np.nan)
    return np.array(out)


def thick_slices(image, label, step=THICK_STEP):
    """Keep slices {0, step, 2*step, ...}; the dropped in-between slices are interpolation ground truth.

    Returns ``(thick image, thick label, heldout image, heldout label, heldout index)``
    where held-out slices are those strictly between two kept slices.
    """
    n = image.n_slices
    kept = np.arange(0, n, step)
    held = np.array([i for i in range(kept[0], kept[-1]) if i % step], dtype=np.int64)
    dz = image.inter_slice_distance_mm * step
    thick_img = Volume(image.slices[kept], image.x_y_spacing_mm, dz, image.patient_id)
    thick_lab = Volume(label.slices[kept], label.x_y_spacing_mm, dz, label.patient_id)
    held_img = Volume(image.slices[held], image.x_y_spacing_mm, image.inter_slice_distance_mm, image.patient_id) \
        if held.size >= 2 else None
    held_lab = Volume(label.slices[held], label.x_y_spacing_mm, label.inter_slice_distance_mm, label.patient_id) \
        if held.size >= 2 else None
    return thick_img, thick_lab, held_img, held_lab, held


# -- benchmark sets ------------------------------------------------------------------

@dataclass
class Case:
    role: str
    seed: int
    image: Volume
    label: Volume


def benchmark_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _case_ok(spec):
    try:
        spec.validate()
    except PhantomSpecError:
        return False
    lab = np.array([organ_mask(spec, z).any() for z in range(spec.n_slices)])
    kept = lab[::THICK_STEP]
    return lab.any() and not lab.all() and kept.any() and not kept.all()


def generate_benchmark(seed, n_train, n_test, height=64, width=64, n_slices=40):
    """In-memory benchmark: ``{"train": [Case], "test": [Case]}`` with disjoint seeds."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    seeds = benchmark_seeds(seed, n_train + n_test)
    cases = {"train": [], "test": []}
    for i, s in enumerate(seeds):
        spec = PhantomSpec.random(s, height, width, n_slices)
        bump = 0
        while not _case_ok(spec):  # rare: redraw until the organ fits and both slice classes exist
            bump += 1
            spec = PhantomSpec.random(s + bump * 7919, height, width, n_slices)
            spec.seed = s
        img, lab = generate_phantom(spec)
        role = "train" if i < n_train else "test"
        cases[role].append(Case(role, s, img, lab))
    return cases


def make_benchmark(seed, n_train, n_test, out_dir, height=64, width=64, n_slices=40):
    """Write a benchmark to ``out_dir`` and return the manifest path.

    Manifest lines are ``role<TAB>path<TAB>seed``. Every training volume also
    gets a thick-slice variant (every 4th slice) plus the held-out slices.
    """
    os.makedirs(out_dir, exist_ok=True)
    cases = generate_benchmark(seed, n_train, n_test, height, width, n_slices)
    rows = []

    def put(role, name, vol, seed_, labels=False):
        path = os.path.join(out_dir, name)
        store_volume(path, vol, labels=labels)
        rows.append((role, path, seed_))

    for case in cases["train"] + cases["test"]:
        stem = f"{case.role}_{case.seed}"
        put(f"{case.role}_image", f"{stem}.isav", case.image, case.seed)
        put(f"{case.role}_label", f"{stem}.islb", case.label, case.seed, labels=True)
        if case.role == "train":
            ti, tl, hi, hl, _ = thick_slices(case.image, case.label)
            put("train_thick_image", f"{stem}.thick.isav", ti, case.seed)
            put("train_thick_label", f"{stem}.thick.islb", tl, case.seed, labels=True)
            if hi is not None:
                put("train_heldout_image", f"{stem}.heldout.isav", hi, case.seed)
                put("train_heldout_label", f"{stem}.heldout.islb", hl, case.seed, labels=True)
    manifest = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest, rows)
    return manifest


def write_manifest(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for role, p, s in rows:
            fh.write(f"{role}\t{p}\t{s}\n")


def read_manifest(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            role, p, s = line.split("\t")
            if not os.path.isabs(p) and not os.path.exists(p):
                p = os.path.join(os.path.dirname(path), os.path.basename(p))
            rows.append((role, p, int(s)))
    return rows


def load_benchmark(manifest_path):
    """Inverse of :func:`make_benchmark` for the full-resolution volumes."""
    rows = read_manifest(manifest_path)
    by_seed = {}
    for role, path, seed in rows:
        if role in ("train_image", "test_image", "train_label", "test_label"):
            split, kind = role.split("_")
            by_seed.setdefault((split, seed), {})[kind] = load_volume(path)
    cases = {"train": [], "test": []}
    for (split, seed), vols in by_seed.items():
        img, lab = vols["image"], vols["label"]
        img.patient_id = lab.patient_id = f"phantom{seed}"
        cases[split].append(Case(split, seed, img, lab))
    return cases
