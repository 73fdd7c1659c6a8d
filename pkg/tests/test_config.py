import pytest

from interslice.config import (apply_overrides, dump_config, load_config, make_config, parse_config_text,
                               profile_defaults, stage_seed)
from interslice.errors import ConfigError


def test_profiles():
    full = make_config("paper")
    assert (full.height, full.classifier_epochs, full.synth_epochs, full.synth_milestones, full.seg_epochs) == \
        (512, 100, 200, (100, 150), 20)
    assert (full.synth_lr, full.seg_lr, full.synth_batch, full.seg_batch, full.T) == (5e-4, 1e-4, 6, 6, 3)
    desk = make_config("desk")
    assert (desk.height, desk.width, desk.classifier_epochs, desk.synth_epochs, desk.seg_epochs) == (64, 64, 30, 60, 20)
    with pytest.raises(ConfigError):
        profile_defaults("laptop")


def test_round_trip(tmp_path):
    cfg = make_config("desk", seed=7, methods="normal,rand-aug", lambda_per="0.01")
    assert cfg.methods == ("normal", "rand-aug") and cfg.lambda_per == 0.01
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert dump_config(again) == dump_config(cfg)


def test_parse_rejects_bad_lines():
    assert parse_config_text("# comment\n\nseed = 3  # trailing\n") == {"seed": "3"}
    for text in ("seed 3\n", "colour = red\n", "seed = 1\nseed = 2\n"):
        with pytest.raises(ConfigError):
            parse_config_text(text)
    with pytest.raises(ConfigError):
        make_config("desk", seed="three")


@pytest.mark.parametrize("field,value", [
    ("T", 0), ("height", 40), ("synth_lr", 0.0), ("lambda_adv", -1.0), ("variant", "gan"),
    ("methods", ("normal", "mixup")), ("set_sizes", (5,)), ("profile", "laptop"), ("seeds", ()),
])
def test_validation(field, value):
    cfg = make_config("desk")
    setattr(cfg, field, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_variant_spelling_normalized():
    assert apply_overrides(make_config(), {"variant": "dis-att"}).validate().variant == "dis_att"


def test_stage_seeds_distinct_and_stable():
    a = stage_seed(0, "classifier_n3")
    assert a == stage_seed(0, "classifier_n3")
    assert a != stage_seed(1, "classifier_n3")
    assert a != stage_seed(0, "synth_normal_T3_n3")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.txt")
