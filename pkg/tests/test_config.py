import os

import pytest

from dynamerge.config import ConfigError, config_text, load_config, parse_config

BASE = """
[pipeline]
n_a = 5
threads = 2
[loop]
overlap_min = 0.4
[session.0]
clouds = a/clouds
poses = a/poses.tum
[session.3]
clouds = /abs/clouds
poses = /abs/poses.tum
labels = /abs/labels
"""


def test_parse_sections_and_sessions():
    cfg = parse_config(BASE, "/base")
    assert cfg.n_a == 5 and cfg.threads == 2 and cfg.loop.overlap_min == 0.4
    assert [s.id for s in cfg.sessions] == [0, 3]
    assert cfg.sessions[0].clouds == os.path.normpath("/base/a/clouds")
    assert cfg.sessions[1].labels == "/abs/labels"
    assert cfg.central_id == 0
    cfg.validate()


def test_missing_poses_names_the_session():
    with pytest.raises(ConfigError, match="session 7: missing poses"):
        parse_config("[session.7]\nclouds = x\n")


@pytest.mark.parametrize(
    "text",
    ["[nope]\na = 1\n", "[loop]\nbogus = 1\n", "[loop]\nk_nn = many\n", "[merge]\nthreads = 2\n", "[pipeline]\nfoo = 1\n"],
)
def test_bad_entries_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_validation():
    with pytest.raises(ConfigError):
        parse_config(BASE + "[descriptor]\nleaf = 0\n").validate()
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("[session.3]", "[session.0]")).validate()
    with pytest.raises(ConfigError):
        parse_config(BASE + "[pipeline]\ncentral = 9\n").validate()


def test_text_round_trip(tmp_path):
    cfg = parse_config(BASE, str(tmp_path))
    path = tmp_path / "c.ini"
    path.write_text(config_text(cfg, sessions_relative_to=str(tmp_path)))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.threads == cfg.threads
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_manifest_settings_exclude_threads():
    a = parse_config(BASE)
    b = parse_config(BASE.replace("threads = 2", "threads = 8"))
    assert a.to_dict() == b.to_dict()
