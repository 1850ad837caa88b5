"""Key-value config parsing and canonical hashing."""

import pytest

from nvscope.config import ConfigError, config_hash, dump_config, load_config, parse_config

SAMPLE = """
# instrument defaults
[fork]
f_res = 32.3e3
q_factor = 25000
use_noise = true

[nv]
nv_axis = 0.816496580927726, 0.0, 0.5773502691896258
label = tip A
"""


def test_parse_sections_and_types():
    cfg = parse_config(SAMPLE)
    assert cfg["fork"]["f_res"] == pytest.approx(32.3e3)
    assert cfg["fork"]["q_factor"] == 25000
    assert isinstance(cfg["fork"]["q_factor"], int)
    assert cfg["fork"]["use_noise"] is True
    assert cfg["nv"]["nv_axis"] == [0.816496580927726, 0.0, 0.5773502691896258]
    assert cfg["nv"]["label"] == "tip A"


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("[a]\n# comment\n\nx = 1  # trailing\n")
    assert cfg == {"a": {"x": 1}}


def test_key_outside_section_rejected():
    with pytest.raises(ConfigError):
        parse_config("x = 1\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError):
        parse_config("[a]\nnot a pair\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError):
        parse_config("[a]\nx = 1\nx = 2\n")


def test_hash_stable_under_key_order():
    a = parse_config("[s]\nx = 1\ny = 2\n")
    b = parse_config("[s]\ny = 2\nx = 1\n")
    assert config_hash(a) == config_hash(b)
    c = parse_config("[s]\nx = 1\ny = 3\n")
    assert config_hash(a) != config_hash(c)


def test_dump_round_trip():
    cfg = parse_config(SAMPLE)
    assert parse_config(dump_config(cfg)) == cfg


def test_load_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(SAMPLE)
    assert load_config(p) == parse_config(SAMPLE)
