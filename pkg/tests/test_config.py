import pytest

from lhtes.config import (ConfigError, RunConfig, config_hash, dump_ini,
                          load_config, set_override)


def test_defaults_match_standard_scenario():
    cfg = RunConfig().validate()
    assert (cfg.mesh.r_in, cfg.mesh.r_out) == (0.1, 1.0)
    assert cfg.mesh.n_r * cfg.mesh.n_theta == 5000
    assert cfg.transient.t_boundary == 273.0
    assert cfg.transient.t_initial == 400.0
    assert (cfg.transient.dt, cfg.transient.n_steps) == (8000.0, 60)
    assert cfg.transient.newton_tol == 1e-7
    assert cfg.design.filter_radius == 0.03
    assert cfg.design.gamma_init == 0.9
    assert cfg.optimizer.learning_rate == 0.05
    assert cfg.optimizer.max_iters == 400
    assert cfg.optimizer.budget == 600.0
    assert (cfg.schedules.p_start, cfg.schedules.p_rate, cfg.schedules.p_max) \
        == (1.0, 0.005, 3.0)
    assert (cfg.schedules.beta_start, cfg.schedules.beta_rate,
            cfg.schedules.beta_max) == (1.0, 0.04, 64.0)
    assert (cfg.schedules.eps_start, cfg.schedules.eps_rate,
            cfg.schedules.eps_min) == (4.0, 0.08, 0.02)
    assert (cfg.schedules.tau_start, cfg.schedules.tau_growth) == (3.0, 1.02)


def test_ini_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.mesh.n_r = 7
    cfg.optimizer.mode = "geometry-only"
    cfg.transient.ggls = False
    path = tmp_path / "cfg.ini"
    path.write_text(dump_ini(cfg))
    loaded = load_config(path)
    assert loaded.mesh.n_r == 7
    assert loaded.optimizer.mode == "geometry-only"
    assert loaded.transient.ggls is False


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text("[warp]\nspeed = 9\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text("[mesh]\nn_q = 9\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(path)


def test_bad_value_type_rejected(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text("[mesh]\nn_r = many\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_mode_and_constraint_validation():
    cfg = RunConfig()
    cfg.optimizer.mode = "psychic"
    with pytest.raises(ConfigError, match="mode"):
        cfg.validate()
    cfg = RunConfig()
    cfg.optimizer.objective = "vibes"
    with pytest.raises(ConfigError, match="objective"):
        cfg.validate()
    cfg = RunConfig()
    cfg.optimizer.budget = -1.0
    with pytest.raises(ConfigError, match="budget"):
        cfg.validate()


def test_set_override():
    cfg = RunConfig()
    set_override(cfg, "transient.n_steps", "12")
    assert cfg.transient.n_steps == 12
    with pytest.raises(ConfigError):
        set_override(cfg, "nosuch.key", "1")
    with pytest.raises(ConfigError):
        set_override(cfg, "plainkey", "1")


def test_config_hash_sensitivity():
    a, b = RunConfig(), RunConfig()
    assert config_hash(a) == config_hash(b)
    b.optimizer.budget = 601.0
    assert config_hash(a) != config_hash(b)


def test_annotated_dump_documents_every_key():
    text = dump_ini(RunConfig(), annotated=True)
    assert text.count("# ") >= 40
    for needle in ("filter radius", "learning rate", "barrier"):
        assert needle in text


def test_shipped_configs_parse():
    from pathlib import Path
    configs = Path(__file__).resolve().parents[1] / "configs"
    found = sorted(configs.glob("*.ini"))
    assert len(found) >= 10
    for path in found:
        load_config(path)
