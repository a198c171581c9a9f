"""Run-configuration parsing and validation."""

import pytest

from packetmig.config import ConfigError, load_config

GOOD = """
[grid]
n = 128 128
spacing = 0.0079 0.0079

[model]
c0 = 1.0

[lens1]
contrast = 0.3
center = 0.5 0.4
widths = 0.2 0.15

[reflector1]
p0 = 0.25 0.35
p1 = 0.75 0.35
amplitude = 1.0

[tiling]
kmax = 3

[schedule]
ns = 2
t_end = 0.8

[acquisition]
t_total = 1.2
dt = 0.004

[source]
position = 0.5 0.0
f_peak = 7.0

[output]
dir = results
"""


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


class TestParsing:
    def test_full_config(self, tmp_path):
        cfg = load_config(write(tmp_path, GOOD))
        assert cfg.grid.n == (128, 128)
        assert cfg.model.c0 == 1.0
        assert len(cfg.model.lenses) == 1
        assert cfg.model.lenses[0].contrast == 0.3
        assert cfg.reflectivity is not None
        assert cfg.k_max == 3
        assert cfg.ns == 2
        assert cfg.t_end == 0.8
        assert cfg.t_total == 1.2
        assert cfg.source_position == (0.5, 0.0)
        assert cfg.outdir == "results"

    def test_auto_schedule_default(self, tmp_path):
        text = GOOD.replace("ns = 2", "ns = auto")
        cfg = load_config(write(tmp_path, text))
        assert cfg.ns is None

    def test_overrides_win(self, tmp_path):
        cfg = load_config(write(tmp_path, GOOD),
                          {"out": "elsewhere", "ns": "4", "threads": 3})
        assert cfg.outdir == "elsewhere"
        assert cfg.ns == 4
        assert cfg.threads == 3

    def test_inline_comments(self, tmp_path):
        text = GOOD.replace("kmax = 3", "kmax = 3  ; tiling depth")
        assert load_config(write(tmp_path, text)).k_max == 3

    def test_initial_section(self, tmp_path):
        text = GOOD + ("\n[initial]\ncenter = 0.5 0.6\nsigma = 0.05\n"
                       "frequency = 15\n")
        cfg = load_config(write(tmp_path, text))
        assert cfg.initial["sigma"] == 0.05
        assert cfg.initial["direction_deg"] == 90.0


class TestValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown section"):
            load_config(write(tmp_path, GOOD + "\n[mystery]\nx = 1\n"))

    def test_unknown_key(self, tmp_path):
        text = GOOD.replace("kmax = 3", "kmax = 3\nkmin = 1")
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(write(tmp_path, text))

    def test_missing_required_key(self, tmp_path):
        text = GOOD.replace("t_total = 1.2", "")
        with pytest.raises(ConfigError, match="t_total"):
            load_config(write(tmp_path, text))

    def test_bad_vector(self, tmp_path):
        text = GOOD.replace("spacing = 0.0079 0.0079",
                            "spacing = tiny tiny")
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text))

    def test_grid_too_coarse_for_kmax(self, tmp_path):
        text = GOOD.replace("kmax = 3", "kmax = 4")
        with pytest.raises(ConfigError, match="kmax"):
            load_config(write(tmp_path, text))

    def test_excess_lens_contrast(self, tmp_path):
        text = GOOD.replace("contrast = 0.3", "contrast = 1.3")
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text))

    def test_reflector_outside_grid(self, tmp_path):
        text = GOOD.replace("p1 = 0.75 0.35", "p1 = 1.75 0.35")
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text))

    def test_bad_schedule_order(self, tmp_path):
        text = GOOD.replace("t_end = 0.8", "t_end = -0.1")
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text))
