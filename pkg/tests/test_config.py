from pathlib import Path

import pytest

from imgconf.config import ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["pixel_width_sweep", "scene_width_sweep", "scene_noise_sweep", "tiny"])
def test_bundled_configs_parse(name):
    cfg = load_config(CONFIGS / f"{name}.toml", env={})
    spec = cfg.spec()
    assert spec.replications >= 1 and spec.sweep != "none"


def test_bundled_grids():
    assert load_config(CONFIGS / "pixel_width_sweep.toml", env={}).spec().grid == (2, 4, 8, 16)
    noise = load_config(CONFIGS / "scene_noise_sweep.toml", env={}).spec()
    assert noise.sweep == "noise_sigma" and noise.grid == (1, 3, 5, 7)


def test_defaults_and_seed_propagation():
    cfg = parse_config("seed = 42\n", env={})
    assert cfg.dgp.seed == 42 and cfg.train.seed == 42
    assert cfg.dgp.level == "pixel" and cfg.estimating_kernel_width == 8


def test_env_seed_override():
    cfg = parse_config("seed = 1\n", env={"IMGCONF_SEED": "99"})
    assert cfg.seed == 99 and cfg.dgp.seed == 99
    with pytest.raises(ConfigError, match="IMGCONF_SEED"):
        parse_config("", env={"IMGCONF_SEED": "abc"})


@pytest.mark.parametrize("text, key", [
    ("[dgp]\nbetta = 1.0\n", "betta"),
    ("[train]\nlr = 0.1\n", "lr"),
    ("[model]\nfilters = 2\n", "filters"),
    ("[experiment]\nreps = 2\n", "reps"),
    ("[dgp]\nseed = 3\n", "seed"),
    ("[plots]\nx = 1\n", "plots"),
    ("speed = 1\n", "speed"),
])
def test_unknown_keys_are_fatal_and_named(text, key):
    with pytest.raises(ConfigError, match=repr(key)):
        parse_config(text, env={})


@pytest.mark.parametrize("text, fragment", [
    ("[dgp]\nn_scenes = 2.5\n", "n_scenes"),
    ("[dgp]\nbeta = \"big\"\n", "beta"),
    ("[train]\ncosine_decay = 1\n", "cosine_decay"),
    ("[dgp]\nlevel = \"village\"\n", "level"),
    ("[model]\nestimating_kernel_width = \"8\"\n", "estimating_kernel_width"),
    ("[experiment]\nsweep = \"true_width\"\n", "grid"),
    ("seed = -1\n", "seed"),
    ("dgp = 3\n", "section"),
])
def test_bad_values_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text, env={})


def test_malformed_toml_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("seed = 1\n[dgp]\nbeta = = 2\n", env={})


def test_integers_accepted_for_float_fields():
    assert parse_config("[dgp]\nbeta = 2\n", env={}).dgp.beta == 2.0


def test_hash_is_stable_under_key_reordering():
    a = parse_config("seed = 3\n[dgp]\nbeta = 1.5\ngamma = 1.0\n[train]\nepochs = 4\n", env={})
    b = parse_config("[train]\nepochs = 4\n[dgp]\ngamma = 1.0\nbeta = 1.5\n", env={"IMGCONF_SEED": "3"})
    assert a.hash() == b.hash()
    assert a.hash() != parse_config("seed = 4\n[dgp]\nbeta = 1.5\ngamma = 1.0\n[train]\nepochs = 4\n", env={}).hash()


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.toml")
