"""Experiment configuration: typed fields, profiles, and a ``key = value`` text format."""
import dataclasses
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .segmentation import METHODS
from .synthesis import LossWeights, VARIANTS, normalize_variant

PROFILES = ("paper", "desk")


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: str = "desk"
    T: int = 3
    variant: str = "normal"
    # data
    manifest: str = ""
    out: str = "runs"
    height: int = 64
    width: int = 64
    n_slices: int = 40
    n_train: int = 3
    n_test: int = 5
    # attention classifier
    classifier_epochs: int = 30
    classifier_lr: float = 5e-4
    classifier_batch: int = 6
    # synthesis network
    synth_epochs: int = 60
    synth_lr: float = 5e-4
    synth_batch: int = 6
    synth_milestones: tuple = (30, 45)
    lambda_rec: float = 2.0
    lambda_per: float = 0.005
    lambda_warp: float = 1.0
    lambda_smooth: float = 1.0
    lambda_adv: float = 1.0
    # segmentation
    seg_epochs: int = 20
    seg_lr: float = 1e-4
    seg_batch: int = 6
    aug_count: int = 3
    # comparison / sweep
    methods: tuple = ("normal", "ours-normal")
    set_sizes: tuple = (3,)
    seeds: tuple = (0, 1, 2, 3, 4)
    t_values: tuple = (1, 2, 3, 4, 5)
    t_count: int = 3

    def loss_weights(self):
        return LossWeights(self.lambda_rec, self.lambda_per, self.lambda_warp, self.lambda_smooth, self.lambda_adv)

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        self.variant = normalize_variant(self.variant)
        for name in ("T", "t_count", "height", "width", "n_slices", "n_train", "n_test", "classifier_epochs",
                     "classifier_batch", "synth_epochs", "synth_batch", "seg_epochs", "seg_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.aug_count < 0:
            raise ConfigError("aug_count must be >= 0")
        for name in ("classifier_lr", "synth_lr", "seg_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.height % 16 or self.width % 16:
            raise ConfigError(f"height and width must be multiples of 16, got {self.height}x{self.width}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
        if not self.seeds or not self.set_sizes or not self.t_values:
            raise ConfigError("seeds, set_sizes and t_values must be non-empty")
        if any(t < 1 for t in self.t_values) or any(n < 1 for n in self.set_sizes):
            raise ConfigError("t_values and set_sizes must be >= 1")
        if max(self.set_sizes) > self.n_train:
            raise ConfigError(f"set size {max(self.set_sizes)} exceeds n_train={self.n_train}")
        return self


def profile_defaults(profile):
    """Field overrides for a named profile.

    ``paper`` keeps the published schedule (classifier 100 epochs, synthesis
    200 with decay after 100 and 150, segmenter 20) at 512x512; ``desk``
    shrinks epochs and resolution to workstation scale.
    """
    if profile == "paper":
        return dict(profile="paper", height=512, width=512, classifier_epochs=100, synth_epochs=200,
                    synth_milestones=(100, 150), seg_epochs=20)
    if profile == "desk":
        return dict(profile="desk", height=64, width=64, classifier_epochs=30, synth_epochs=60,
                    synth_milestones=(30, 45), seg_epochs=20)
    raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")


def make_config(profile="desk", **overrides):
    cfg = ExperimentConfig(**profile_defaults(profile))
    return apply_overrides(cfg, overrides)


def _fields():
    return {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(int(s) for s in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc
    return text


def apply_overrides(cfg, overrides):
    fields = _fields()
    for key, value in overrides.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(ExperimentConfig(), key)
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(key, value, default)
        elif isinstance(value, list):
            value = tuple(value)
        setattr(cfg, key, value)
    return cfg


def parse_config_text(text):
    """``key = value`` lines; blank lines and ``#`` comments ignored; unknown keys rejected."""
    fields = _fields()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path, profile=None):
    """Read a config file on top of its profile defaults (the file's ``profile`` key, unless overridden)."""
    try:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = profile or values.get("profile", "desk")
    values.pop("profile", None)
    return make_config(base, **values)


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg):
    """Canonical text form (fields in declaration order); parse_config_text round-trips it."""
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def stage_seed(root, stage):
    """Per-stage seed derived from the root seed and the stage name."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(stage.encode())]).generate_state(1)[0])


__all__ = ["ExperimentConfig", "PROFILES", "VARIANTS", "apply_overrides", "dump_config", "load_config",
           "make_config", "parse_config_text", "profile_defaults", "stage_seed"]
