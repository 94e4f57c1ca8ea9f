"""Flat key=value run configuration: parsing, validation, presets."""

import pytest

from spikedepth import config as C


class TestParse:
    def test_defaults_when_empty(self):
        cfg = C.parse_config("")
        assert cfg == C.RunConfig()

    def test_overrides_and_comments(self):
        text = """
        # training block
        lr = 0.001   # peak rate
        steps = 42
        augment = true
        eta=0.8
        """
        cfg = C.parse_config(text)
        assert cfg.lr == 0.001
        assert cfg.steps == 42
        assert cfg.augment is True
        assert cfg.eta == 0.8
        assert cfg.hidden == C.RunConfig().hidden  # untouched default

    def test_bool_spellings(self):
        for raw, want in (("true", True), ("1", True), ("YES", True),
                          ("false", False), ("0", False), ("No", False)):
            assert C.parse_config(f"augment = {raw}").augment is want

    def test_unknown_key_rejected(self):
        with pytest.raises(C.ConfigError, match="unknown key"):
            C.parse_config("learning_rate = 0.1")

    def test_malformed_line_rejected(self):
        with pytest.raises(C.ConfigError, match="line 1"):
            C.parse_config("just some words")

    def test_bad_int_rejected(self):
        with pytest.raises(C.ConfigError, match="steps"):
            C.parse_config("steps = many")

    def test_bad_bool_rejected(self):
        with pytest.raises(C.ConfigError):
            C.parse_config("augment = maybe")

    def test_base_config_respected(self):
        base = C.RunConfig(hidden=64, norm_groups=8)
        cfg = C.parse_config("lr = 0.5", base=base)
        assert cfg.hidden == 64 and cfg.lr == 0.5


class TestValidate:
    @pytest.mark.parametrize("line", [
        "threshold = -1",
        "eta = 0",
        "eta = 1.5",
        "radius = 0",
        "iters = 0",
        "r0 = 1.0",
        "lambda_f = -0.1",
        "baseline = 0",
        "warmup_frac = 1.0",
    ])
    def test_out_of_range_rejected(self, line):
        with pytest.raises(C.ConfigError):
            C.parse_config(line)

    def test_hidden_group_divisibility(self):
        with pytest.raises(C.ConfigError, match="divisible"):
            C.parse_config("hidden = 30\nnorm_groups = 8")


class TestPresets:
    def test_desk_is_default(self):
        assert C.from_preset("desk") == C.RunConfig()

    def test_paper_preset_scales_up(self):
        cfg = C.from_preset("paper")
        assert cfg.hidden == 128
        assert cfg.steps == 300_000
        assert cfg.width == 400 and cfg.height == 250
        assert cfg.augment is True
        assert cfg.lr == 2e-4
        assert cfg.batch_size == 8

    def test_unknown_preset_rejected(self):
        with pytest.raises(C.ConfigError, match="unknown preset"):
            C.from_preset("huge")

    def test_preset_overrides(self):
        cfg = C.from_preset("desk", lr=0.123)
        assert cfg.lr == 0.123


class TestRoundtrip:
    def test_text_roundtrip_identity(self):
        cfg = C.RunConfig(lr=3e-4, augment=True, steps=7)
        again = C.parse_config(C.to_text(cfg))
        assert again == cfg

    def test_file_roundtrip(self, tmp_path):
        cfg = C.RunConfig(hidden=16, norm_groups=4, seed=11)
        path = tmp_path / "run.cfg"
        C.save_config(cfg, path)
        assert C.load_config(path) == cfg

    def test_every_field_appears_in_text(self):
        text = C.to_text(C.RunConfig())
        for name in C._FIELDS:
            assert any(line.startswith(f"{name} = ")
                       for line in text.splitlines())
