"""Flat config format: parsing, overrides, validation, roundtrips."""

import pytest

from chirpnet.config import (
    KEY_TABLE,
    ConfigError,
    FilterConfig,
    PipelineConfig,
    apply_overrides,
    format_config,
    load_config,
    parse_config_text,
)


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.spectrogram.n_mels == 128
    assert cfg.spectrogram.n_cols == 256
    assert cfg.filter.threshold == 0.16
    assert cfg.model.downsample == "maxpool"
    assert cfg.train.base_lr == 0.001
    assert cfg.pool_mode == "mean_exp"


def test_parse_skips_comments_and_blanks():
    text = "# a comment\n\ntrain.seed = 5\n  # indented comment\n"
    assert parse_config_text(text) == {"train.seed": "5"}


def test_parse_reports_line_numbers():
    with pytest.raises(ConfigError, match=r"conf:3"):
        parse_config_text("a = 1\nb = 2\nnonsense\n", source="conf")


def test_parse_rejects_duplicates_and_empty_keys():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("train.seed = 1\ntrain.seed = 2\n")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("= 3\n")


def test_apply_overrides_parses_types():
    cfg = apply_overrides(
        PipelineConfig(),
        {
            "train.seed": "9",
            "train.augment": "false",
            "model.filter_multiplier": "0.25",
            "pool.mode": "mean",
        },
    )
    assert cfg.train.seed == 9
    assert cfg.train.augment is False
    assert cfg.model.filter_multiplier == 0.25
    assert cfg.pool_mode == "mean"
    # untouched sections keep their defaults
    assert cfg.spectrogram == PipelineConfig().spectrogram


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError, match="bogus.knob"):
        apply_overrides(PipelineConfig(), {"bogus.knob": "1"})


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="train.seed"):
        apply_overrides(PipelineConfig(), {"train.seed": "pony"})


def test_validation_failures_become_config_errors():
    for key, value in [
        ("train.max_epochs", "0"),
        ("filter.threshold", "1.5"),
        ("model.downsample", "avgpool"),
        ("augment.noise_prob", "2.0"),
        ("model.filter_multiplier", "0.3"),
    ]:
        with pytest.raises(ConfigError):
            apply_overrides(PipelineConfig(), {key: value})


def test_bool_spellings():
    for text, want in [
        ("true", True), ("YES", True), ("1", True), ("on", True),
        ("false", False), ("No", False), ("0", False), ("off", False),
    ]:
        cfg = apply_overrides(PipelineConfig(), {"train.augment": text})
        assert cfg.train.augment is want
    with pytest.raises(ConfigError):
        apply_overrides(PipelineConfig(), {"train.augment": "maybe"})


def test_invalid_pool_mode():
    with pytest.raises(ConfigError):
        apply_overrides(PipelineConfig(), {"pool.mode": "max"})


def test_format_parse_roundtrip():
    base = apply_overrides(
        PipelineConfig(),
        {
            "model.filter_multiplier": "0.125",
            "train.val_fraction": "0.1",
            "spectrogram.log_floor": "1e-05",
            "train.augment": "false",
        },
    )
    text = format_config(base)
    again = apply_overrides(PipelineConfig(), parse_config_text(text))
    assert again == base
    # and a second trip is a fixed point
    assert format_config(again) == text


def test_roundtrip_covers_every_key():
    text = format_config(PipelineConfig())
    raw = parse_config_text(text)
    assert set(raw) == set(KEY_TABLE)


def test_load_config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# smaller model\nmodel.filter_multiplier = 0.5\ntrain.seed = 3\n")
    cfg = load_config(path)
    assert cfg.model.filter_multiplier == 0.5
    assert cfg.train.seed == 3


def test_load_config_reports_path(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("junk line\n")
    with pytest.raises(ConfigError, match="run.conf:1"):
        load_config(path)


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(row_factor=0.0)
    with pytest.raises(ValueError):
        FilterConfig(threshold=-0.1)
