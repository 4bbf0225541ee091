"""Declarative experiment configs.

Configs are YAML with a strict schema: unknown keys are errors, every field
has a default, and the canonical hash is taken over the fully-resolved
config serialized with sorted keys, so field order never matters.
"""

import dataclasses
import hashlib
import json

import yaml

from .errors import ConfigError


@dataclasses.dataclass
class DatasetSection:
    kind: str = "synthetic"            # "synthetic" | "cifar10"
    num_classes: int = 10
    examples_per_class: int = 64
    test_examples_per_class: int = 20
    image_size: int = 16
    channels: int = 3
    class_signal_strength: float = 1.0
    noise_std: float = 0.1
    data_dir: str | None = None        # cifar10 only
    max_per_class: int | None = None   # cifar10 desk-scale cap


@dataclasses.dataclass
class ModelSection:
    widths: list = dataclasses.field(default_factory=lambda: [16, 32, 32, 64])
    bias: bool = True


@dataclasses.dataclass
class DistillSection:
    beta: float = 10.0
    steps: int = 200
    lr: float = 0.05
    noise_draws: int = 4
    sample_size: int = 64
    profile_samples: int = 256


@dataclasses.dataclass
class CRPSection:
    steps: int = 100
    lr: float = 0.01
    c: float = 1.0
    batch_size: int = 64
    subset_size: int = 64
    use_class_mask: bool = True


@dataclasses.dataclass
class TrainingSection:
    method: str = "madry"
    trades_beta: float = 6.0
    mart_lambda: float = 5.0
    pretrain_epochs: int = 10
    finetune_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    margin: float = 1.0
    proxy_weight: float = 1.0
    refresh_period: int = 5
    attack_steps: int = 5
    attack_epsilon: float = 8 / 255


@dataclasses.dataclass
class AttackSection:
    suite: list = dataclasses.field(default_factory=lambda: [
        "clean", "fgsm", "pgd", "cw", "pgd_l2", "adaptive", "transfer"])
    epsilon: float = 8 / 255
    adaptive_epsilon: float = 0.03
    l2_epsilon: float = 0.25
    pgd_steps: int = 20
    cw_steps: int = 200
    eval_examples: int = 256


@dataclasses.dataclass
class AnalysisSection:
    similarity_pairs: int = 2000
    gradient_samples: int = 100
    beta_sweep: list = dataclasses.field(
        default_factory=lambda: [0.1, 1.0, 10.0, 100.0])
    export_features: bool = True


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    dataset: DatasetSection = dataclasses.field(default_factory=DatasetSection)
    model: ModelSection = dataclasses.field(default_factory=ModelSection)
    distill: DistillSection = dataclasses.field(default_factory=DistillSection)
    crp: CRPSection = dataclasses.field(default_factory=CRPSection)
    training: TrainingSection = dataclasses.field(default_factory=TrainingSection)
    attacks: AttackSection = dataclasses.field(default_factory=AttackSection)
    analysis: AnalysisSection = dataclasses.field(default_factory=AnalysisSection)


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "distill": DistillSection,
    "crp": CRPSection,
    "training": TrainingSection,
    "attacks": AttackSection,
    "analysis": AnalysisSection,
}


def _build_section(cls, raw: dict, path: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", field=path)
    return cls(**raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - top_fields
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", field="<root>")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError("section must be a mapping", field=key)
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    if cfg.dataset.kind not in ("synthetic", "cifar10"):
        raise ConfigError(f"unknown kind {cfg.dataset.kind!r}", field="dataset.kind")
    if cfg.dataset.kind == "cifar10" and not cfg.dataset.data_dir:
        raise ConfigError("data_dir required for cifar10", field="dataset.data_dir")
    if cfg.training.method not in ("madry", "trades", "mart"):
        raise ConfigError(f"unknown method {cfg.training.method!r}",
                          field="training.method")
    if cfg.training.refresh_period < 1:
        raise ConfigError("must be >= 1", field="training.refresh_period")
    known_attacks = {"clean", "fgsm", "pgd", "cw", "pgd_l2", "adaptive",
                     "transfer"}
    bad = set(cfg.attacks.suite) - known_attacks
    if bad:
        raise ConfigError(f"unknown attacks {sorted(bad)}", field="attacks.suite")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(obj) -> str:
    """Canonical hash of a config or any of its subtrees."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()
