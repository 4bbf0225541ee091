"""Shared fixtures: tiny deterministic models and datasets, plus
session-scoped trained artifacts used by the slower acceptance checks."""

import dataclasses

import pytest
import torch

from robustproxy.attacks import AttackConfig
from robustproxy.data import SyntheticSpec, make_synthetic
from robustproxy.distill import IBConfig
from robustproxy.models import make_toy_convnet
from robustproxy.perturb import PerturbOptConfig
from robustproxy.training import ATMethod, TrainConfig, finetune_with_proxy, pretrain_at

# Desk-scale synthetic problem shared across training-based tests.
SYN_SPEC = SyntheticSpec(num_classes=4, examples_per_class=64, image_size=12,
                         channels=3, class_signal_strength=0.9,
                         noise_std=0.25, seed=7)
EVAL_EPS = 8 / 255


def small_model(seed=0, num_classes=4, image_size=12, widths=(16, 32)):
    return make_toy_convnet(num_classes=num_classes, widths=widths,
                            image_size=image_size, seed=seed)


def fast_train_config(seed=0, epochs=40):
    return TrainConfig(
        epochs=epochs, batch_size=32, lr=0.05,
        attack=AttackConfig(epsilon=EVAL_EPS, steps=5, step_size=EVAL_EPS / 4,
                            seed=seed),
        eval_attack=AttackConfig(epsilon=EVAL_EPS, steps=20, seed=seed),
        margin=1.0, refresh_period=3,
        ib=IBConfig(beta=10.0, steps=25, lr=0.1, noise_draws=2, seed=seed),
        crp=PerturbOptConfig(steps=40, lr=0.05, batch_size=32,
                             subset_size=32, seed=seed),
        use_class_mask=True, profile_samples=128, seed=seed)


@pytest.fixture(scope="session")
def syn_train():
    return make_synthetic(SYN_SPEC, "train")


@pytest.fixture(scope="session")
def syn_test():
    return make_synthetic(dataclasses.replace(SYN_SPEC, examples_per_class=32),
                          "test")


@pytest.fixture(scope="session")
def at_model(syn_train, syn_test):
    """One adversarially trained toy baseline shared by the read-only tests."""
    torch.manual_seed(0)
    model = small_model(seed=0)
    pretrain_at(model, syn_train, ATMethod("madry"), fast_train_config(0),
                syn_test)
    model.eval()
    return model


@pytest.fixture(scope="session")
def strong_crps(at_model, syn_train):
    """Aggressive class perturbations: large margin scale and step size so
    even the small-logit toy model is pushed deep into its correct regions."""
    from robustproxy.data import sample_class_subset
    from robustproxy.distill import (class_majority_mask,
                                     estimate_channel_profile)
    from robustproxy.perturb import ceo_optimize_crp, compute_masks
    profile = estimate_channel_profile(at_model, [syn_train.images[:128]])
    ib = IBConfig(beta=10.0, steps=25, lr=0.1, noise_draws=2, seed=0)
    cfg = PerturbOptConfig(steps=200, lr=1.0, c=3000.0, batch_size=32,
                           subset_size=32, seed=0)
    crps = {}
    for k in range(syn_train.num_classes):
        xs, ys, _ = sample_class_subset(syn_train, k, 32, seed=1)
        mask = class_majority_mask(
            compute_masks(at_model, xs, ys, profile, ib))
        crps[k] = ceo_optimize_crp(at_model, syn_train, k, mask, cfg)
    return crps


@pytest.fixture(scope="session")
def trained_pairs(syn_train, syn_test):
    """(baseline, finetuned) pairs for three seeds; the expensive fixture."""
    pairs = []
    for seed in (0, 1, 2):
        torch.manual_seed(seed)
        baseline = small_model(seed=seed)
        cfg = fast_train_config(seed)
        pretrain_at(baseline, syn_train, ATMethod("madry"), cfg, syn_test)
        finetuned = small_model(seed=seed)
        finetuned.load_state_dict(baseline.state_dict())
        finetuned.param_version = baseline.param_version
        # small proxy weight: the toy net's pooled features are tiny, so the
        # cosine pull/push gradient is ~30x the AT gradient at weight 1.0
        ft_cfg = dataclasses.replace(cfg, epochs=15, lr=0.02,
                                     proxy_weight=1e-4)
        _, result = finetune_with_proxy(finetuned, syn_train,
                                        ATMethod("madry"), ft_cfg, syn_test)
        baseline.eval()
        finetuned.eval()
        pairs.append((baseline, finetuned, result))
    return pairs
