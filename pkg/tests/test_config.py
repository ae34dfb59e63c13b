from pathlib import Path

import pytest

from fbmle.config import ConfigError, ExperimentConfig, from_mapping, load_config, parse_config_text

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_and_literals(tmp_path):
    f = tmp_path / "a.toml"
    f.write_text('experiment = "consistency"  # comment\nH = [0.3, 0.7]\nreps = 40\nscheme = quadrature\n')
    cfg = load_config(f)
    assert cfg.experiment == "consistency" and cfg.H == (0.3, 0.7) and cfg.reps == 40
    assert cfg.scheme == "quadrature" and cfg.dt == ExperimentConfig().dt


def test_bare_list_and_float_coercion(tmp_path):
    f = tmp_path / "a.toml"
    f.write_text("horizons = 10, 20, 40\ntheta = -1\ndrift = linear, prop2\n")
    cfg = load_config(f)
    assert cfg.horizons == (10.0, 20.0, 40.0) and all(type(x) is float for x in cfg.horizons)
    assert cfg.theta == (-1.0,) and cfg.drift == ("linear", "prop2")


def test_include_and_override(tmp_path):
    (tmp_path / "base.toml").write_text("seed = 5\nreps = 50\n")
    (tmp_path / "top.toml").write_text('include = "base.toml"\nreps = 60\ntol.slope = 0.3\n')
    cfg = load_config(tmp_path / "top.toml")
    assert cfg.seed == 5 and cfg.reps == 60 and cfg.tolerances == {"slope": 0.3}


def test_include_cycle(tmp_path):
    (tmp_path / "a.toml").write_text('include = "b.toml"\n')
    (tmp_path / "b.toml").write_text('include = "a.toml"\n')
    with pytest.raises(ConfigError, match="cycle"):
        load_config(tmp_path / "a.toml")


@pytest.mark.parametrize("text", ["colour = 3", "reps = many things", "reps = 0", "just words", "dt = -1"])
def test_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")


def test_text_round_trip():
    cfg = ExperimentConfig(H=(0.25, 0.75), horizons=(5.0, 8.0), tolerances={"rate": 0.4}, reps=33)
    assert parse_config_text(cfg.to_text()) == cfg


def test_from_mapping_rejects_tolerances_key():
    with pytest.raises(ConfigError):
        from_mapping({"tolerances": 1})


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.toml")))
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.reps >= 1
