import pytest
import yaml

from robustproxy.config import (ExperimentConfig, config_from_dict,
                                config_hash, config_to_dict, load_config)
from robustproxy.errors import ConfigError


def test_empty_dict_gives_defaults():
    cfg = config_from_dict({})
    assert cfg.seed == 0
    assert cfg.dataset.kind == "synthetic"
    assert cfg.distill.beta == 10.0
    assert cfg.training.method == "madry"


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="<root>"):
        config_from_dict({"optimiser": "adam"})


def test_unknown_section_key_includes_field_path():
    with pytest.raises(ConfigError, match="distill"):
        config_from_dict({"distill": {"beta": 1.0, "betta": 2.0}})
    with pytest.raises(ConfigError, match="betta"):
        config_from_dict({"distill": {"betta": 2.0}})


def test_section_must_be_mapping():
    with pytest.raises(ConfigError, match="training"):
        config_from_dict({"training": "madry"})


def test_invalid_enum_values_name_their_field():
    with pytest.raises(ConfigError, match="dataset.kind"):
        config_from_dict({"dataset": {"kind": "imagenet"}})
    with pytest.raises(ConfigError, match="training.method"):
        config_from_dict({"training": {"method": "free"}})
    with pytest.raises(ConfigError, match="training.refresh_period"):
        config_from_dict({"training": {"refresh_period": 0}})
    with pytest.raises(ConfigError, match="attacks.suite"):
        config_from_dict({"attacks": {"suite": ["pgd", "autoattack"]}})


def test_cifar10_requires_data_dir():
    with pytest.raises(ConfigError, match="dataset.data_dir"):
        config_from_dict({"dataset": {"kind": "cifar10"}})


def test_hash_stable_under_field_reordering():
    a = yaml.safe_load("""
seed: 3
distill: {beta: 2.0, steps: 50}
training: {method: trades, lr: 0.02}
""")
    b = yaml.safe_load("""
training: {lr: 0.02, method: trades}
distill: {steps: 50, beta: 2.0}
seed: 3
""")
    assert config_hash(config_from_dict(a)) == config_hash(config_from_dict(b))


def test_hash_changes_with_any_value():
    base = config_from_dict({})
    changed = config_from_dict({"distill": {"beta": 11.0}})
    assert config_hash(base) != config_hash(changed)


def test_hash_covers_subtrees():
    a = config_from_dict({})
    b = config_from_dict({"distill": {"beta": 11.0}})
    assert config_hash(a.distill) != config_hash(b.distill)
    assert config_hash(a.training) == config_hash(b.training)


def test_load_config_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=9)
    cfg.training.method = "trades"
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(cfg)))
    loaded = load_config(path)
    assert loaded == cfg
    assert config_hash(loaded) == config_hash(cfg)


def test_load_config_empty_file_is_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(path) == ExperimentConfig()
