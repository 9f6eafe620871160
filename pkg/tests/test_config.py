import json

import pytest

from gridflow.config import ConfigError, CorpusConfig, RunConfig, load_config, scenario_seeds, split_seeds


def test_round_trip_and_hash():
    cfg = RunConfig.from_dict({"seed": 4, "corpus": {"n_scenarios": 12}, "net": {"base_features": 8}})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.hash() == cfg.hash()
    assert RunConfig.from_dict({**cfg.to_dict(), "out_dir": "elsewhere"}).hash() == cfg.hash()
    assert cfg.with_seed(5).hash() != cfg.hash()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"net": {"n_layers": 3}})


def test_short_sequences_rejected():
    cfg = RunConfig.from_dict({"corpus": {"n_frames": 5}})
    with pytest.raises(ConfigError, match="too short"):
        cfg.validate()


def test_split_is_deterministic_80_20():
    seeds = scenario_seeds(0, 250)
    train, val = split_seeds(seeds, 0.2, 0)
    assert (len(train), len(val)) == (200, 50)
    assert not set(train) & set(val)
    assert (train, val) == split_seeds(seeds, 0.2, 0)
    assert len(set(seeds)) == 250


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"seed": 2}))
    assert load_config(good).seed == 2


def test_paper_scale_values_are_reachable():
    from gridflow.model import NetConfig
    from gridflow.training import OptimConfig
    assert OptimConfig.paper().lr == 3e-4 and OptimConfig.paper().batch_size == 18
    assert NetConfig.paper_scale().latent_dim == 32
    assert CorpusConfig().geometry.shape == (24, 24)
