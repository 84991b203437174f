import pytest

from dirlat.config import Config, ConfigError, apply_overrides, derive_seed, from_dict, load_config


def test_defaults_validate():
    cfg = from_dict({})
    assert cfg.train.epochs.recon == 5 and cfg.train.epochs.joint == 10
    assert cfg.train.vae_lr == 1e-4 and cfg.train.clf_lr == 1e-2 and cfg.train.batch_size == 64
    assert cfg.model.prior_concentration == 0.5


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"train": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        apply_overrides({}, ["model.widht=3"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["model.latent_dim"])


def test_overrides_parse_yaml_values():
    d = apply_overrides({}, ["train.kl_weight=0.01", "model.prior_kind=gaussian", "data.split_fractions=[0.5,0.25,0.25]"])
    cfg = from_dict(d)
    assert cfg.train.kl_weight == 0.01 and cfg.model.prior_kind == "gaussian"
    assert cfg.data.split_fractions == [0.5, 0.25, 0.25]


def test_invalid_values():
    for bad in ({"model": {"image_size": 50}}, {"train": {"batch_size": 0}}, {"eval": {"threshold_mode": "x"}},
                {"explain": {"steps": 1}}):
        with pytest.raises(ConfigError):
            from_dict(bad)


def test_hash_ignores_seed_only():
    a, b = from_dict({"seed": 1}), from_dict({"seed": 2})
    assert a.hash() == b.hash()
    assert a.hash() != from_dict({"train": {"kl_weight": 0.5}}).hash()


def test_load_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 4\nmodel:\n  latent_dim: 16\n")
    cfg = load_config(p, ["model.image_size=32"])
    assert (cfg.seed, cfg.model.latent_dim, cfg.model.image_size) == (4, 16, 32)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_derived_seeds_are_independent_streams():
    assert derive_seed(0, "split") == derive_seed(0, "split")
    assert derive_seed(0, "split") != derive_seed(0, "init")
    assert derive_seed(0, "split") != derive_seed(1, "split")
    assert derive_seed(0, "stage", "recon") != derive_seed(0, "stage", "joint")
    assert isinstance(Config().to_dict(), dict)
