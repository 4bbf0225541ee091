import dataclasses
import math

import numpy as np
import pytest
import torch

from robustproxy.analysis import (AblationCurve, Distribution,
                                  bootstrap_mean_diff, export_features,
                                  gradient_norm_distribution, invert_feature,
                                  masked_accuracy,
                                  positive_similarity_distribution,
                                  read_features, write_ablation_curve,
                                  write_distribution)
from robustproxy.attacks import accuracy
from robustproxy.data import DatasetHandle, sample_class_subset
from robustproxy.distill import (ChannelMask, IBConfig, class_majority_mask,
                                 estimate_channel_profile)
from robustproxy.errors import ContractError, DivergenceError
from robustproxy.models import make_toy_convnet
from robustproxy.perturb import (ClassPerturbation, PerturbOptConfig,
                                 ceo_optimize_crp, compute_masks)
from robustproxy.proxy import pooled_feature

IB = IBConfig(beta=10.0, steps=25, lr=0.1, noise_draws=2, seed=0)


def _full_mask(channels, batch, robust=True):
    ones = torch.ones(batch, channels)
    zeros = torch.zeros(batch, channels)
    i_r = ones if robust else zeros
    return ChannelMask(i_r=i_r, i_nr=1 - i_r,
                       sigma_snapshot=torch.ones(batch, channels),
                       threshold_used=1.0)


@pytest.fixture(scope="module")
def test_masks(at_model, syn_train, syn_test):
    profile = estimate_channel_profile(at_model, [syn_train.images[:128]])
    return compute_masks(at_model, syn_test.images, syn_test.labels,
                         profile, IB)


def test_distribution_summary_recomputable():
    d = Distribution(values=[1.0, 2.0, 3.0, 4.0], label="x")
    s = d.summary
    assert s["mean"] == pytest.approx(2.5)
    assert s["std"] == pytest.approx(np.std([1.0, 2.0, 3.0, 4.0]))
    assert s["q50"] == pytest.approx(2.5)
    assert s["n"] == 4


def test_ablation_curve_length_validation():
    with pytest.raises(ContractError):
        AblationCurve(betas=[0.1, 1.0], robust_only_acc=[0.5],
                      nonrobust_only_acc=[0.5, 0.4])


def test_gradient_norms_zero_under_all_robust_mask(at_model, syn_test):
    x = syn_test.images[:16]
    y = syn_test.labels[:16]
    mask = _full_mask(at_model.tap_channels, 16, robust=True)
    d = gradient_norm_distribution(at_model, x, y, mask)
    assert d.values == [0.0] * 16


def test_gradient_norms_reproducible(at_model, syn_test, test_masks):
    x = syn_test.images
    y = syn_test.labels
    a = gradient_norm_distribution(at_model, x, y, test_masks)
    b = gradient_norm_distribution(at_model, x, y, test_masks)
    assert a.values == b.values
    assert a.label == "without_crp"


def test_crp_lowers_gradient_norms(at_model, syn_test, test_masks,
                                   strong_crps):
    x = syn_test.images
    y = syn_test.labels
    without = gradient_norm_distribution(at_model, x, y, test_masks)
    with_crp = gradient_norm_distribution(at_model, x, y, test_masks,
                                          crps=strong_crps)
    assert with_crp.label == "with_crp"
    diff, lo, hi = bootstrap_mean_diff(without.values, with_crp.values,
                                       seed=0)
    assert with_crp.summary["mean"] < without.summary["mean"]
    assert lo > 0  # 95% CI excludes zero


def test_similarity_identical_images_is_one(at_model):
    torch.manual_seed(0)
    base = torch.rand(2, 3, 12, 12)
    ds = DatasetHandle(images=base.repeat_interleave(2, dim=0),
                       labels=torch.tensor([0, 0, 1, 1]),
                       ids=[f"s{i}" for i in range(4)], split="test",
                       num_classes=2)
    d = positive_similarity_distribution(at_model, ds, pairs=20, seed=0)
    assert all(v == pytest.approx(1.0, abs=1e-6) for v in d.values)


def test_similarity_pair_sampling_deterministic(at_model, syn_test):
    a = positive_similarity_distribution(at_model, syn_test, pairs=100,
                                         seed=3)
    b = positive_similarity_distribution(at_model, syn_test, pairs=100,
                                         seed=3)
    c = positive_similarity_distribution(at_model, syn_test, pairs=100,
                                         seed=4)
    assert a.values == b.values
    assert a.values != c.values


def test_similarity_requires_pairable_class(at_model):
    ds = DatasetHandle(images=torch.rand(2, 3, 12, 12),
                       labels=torch.tensor([0, 1]), ids=["a", "b"],
                       split="test", num_classes=2)
    with pytest.raises(ContractError):
        positive_similarity_distribution(at_model, ds, pairs=10, seed=0)


def test_crp_raises_similarity_and_narrows_spread(at_model, syn_test,
                                                  strong_crps):
    without = positive_similarity_distribution(at_model, syn_test, pairs=500,
                                               seed=0)
    with_crp = positive_similarity_distribution(at_model, syn_test,
                                                crps=strong_crps, pairs=500,
                                                seed=0)
    diff, lo, hi = bootstrap_mean_diff(with_crp.values, without.values,
                                       seed=0)
    assert with_crp.summary["mean"] >= without.summary["mean"]
    assert with_crp.summary["std"] < without.summary["std"]
    assert lo > 0


def test_masked_accuracy_both_equals_plain(at_model, syn_test, test_masks):
    x = syn_test.images
    y = syn_test.labels
    both = masked_accuracy(at_model, x, y, test_masks, keep="both")
    assert both == accuracy(at_model, x, y)


def test_masked_accuracy_zero_mask_is_chance(at_model, syn_test):
    # zero features reach the head, so every image gets the bias argmax
    x = syn_test.images
    y = syn_test.labels
    mask = _full_mask(at_model.tap_channels, len(y), robust=False)
    acc = masked_accuracy(at_model, x, y, mask, keep="robust")
    assert acc == pytest.approx(1.0 / syn_test.num_classes)


def test_masked_accuracy_unknown_keep(at_model, syn_test, test_masks):
    with pytest.raises(ContractError):
        masked_accuracy(at_model, syn_test.images, syn_test.labels,
                        test_masks, keep="all")


def test_invert_fixed_point_zero_residual():
    model = make_toy_convnet(num_classes=4, widths=(6, 8), image_size=12,
                             seed=11)
    model.eval()
    mask = _full_mask(model.tap_channels, 2, robust=True)
    # target the features of the exact image the seeded start produces
    g = torch.Generator().manual_seed(9)
    start = torch.rand((2,) + model.input_shape, generator=g)
    with torch.no_grad():
        target = model.forward_to_tap(start)
    _, residuals = invert_feature(model, target, mask, keep="robust",
                                  steps=1, lr=0.05, seed=9)
    assert residuals[0] == 0.0


def test_invert_residual_decreases():
    model = make_toy_convnet(num_classes=4, widths=(6, 8), image_size=12,
                             seed=11)
    model.eval()
    mask = _full_mask(model.tap_channels, 2, robust=True)
    torch.manual_seed(4)
    x0 = torch.rand(2, 3, 12, 12)
    with torch.no_grad():
        target = model.forward_to_tap(x0)
    img, residuals = invert_feature(model, target, mask, keep="robust",
                                    steps=30, lr=0.05, seed=3)
    for i in range(10):
        assert residuals[i + 1] < residuals[i]
    assert img.min() >= 0 and img.max() <= 1


def test_invert_divergence_error():
    model = make_toy_convnet(num_classes=4, widths=(6, 8), image_size=12,
                             seed=11)
    mask = _full_mask(model.tap_channels, 1, robust=True)
    with torch.no_grad():
        shape = model.forward_to_tap(torch.zeros((1,) + model.input_shape)).shape
    bad = torch.full(shape, float("inf"))
    with pytest.raises(DivergenceError):
        invert_feature(model, bad, mask, keep="robust", steps=5, seed=0)


def test_export_features_roundtrip(at_model, syn_test, tmp_path):
    path = export_features(at_model, syn_test, tmp_path / "feat.bin")
    records = read_features(path)
    assert len(records) == len(syn_test)
    expected = pooled_feature(
        at_model, syn_test.images).detach().numpy().astype("<f4")
    for (ex_id, lab, vec), want, ref_id, ref_lab in zip(
            records, expected, syn_test.ids, syn_test.labels.tolist()):
        assert ex_id == ref_id
        assert lab == ref_lab
        assert np.array_equal(vec, want)


def test_export_features_crp_variant_differs(at_model, syn_test,
                                             strong_crps, tmp_path):
    plain = export_features(at_model, syn_test, tmp_path / "a.bin")
    shifted = export_features(at_model, syn_test, tmp_path / "b.bin",
                              crps=strong_crps)
    a = np.stack([v for _, _, v in read_features(plain)])
    b = np.stack([v for _, _, v in read_features(shifted)])
    assert a.shape == b.shape
    assert not np.array_equal(a, b)


def test_read_features_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTFEAT" + b"\x00" * 16)
    with pytest.raises(ContractError):
        read_features(p)


def test_write_distribution_tsv(tmp_path):
    a = Distribution(values=[1.0, 2.0, 3.0], label="with_crp")
    b = Distribution(values=[4.0, 5.0], label="without_crp")
    path = write_distribution(tmp_path / "dist.tsv", a, b)
    lines = path.read_text().splitlines()
    assert lines[0] == "with_crp\twithout_crp"
    assert lines[1] == "1\t4"
    assert lines[3] == "3\t"   # shorter column padded with blanks
    assert len(lines) == 4


def test_write_ablation_curve_tsv(tmp_path):
    curve = AblationCurve(betas=[0.1, 1.0, 10.0],
                          robust_only_acc=[0.8, 0.7, 0.6],
                          nonrobust_only_acc=[0.3, 0.4, 0.5])
    path = write_ablation_curve(tmp_path / "curve.tsv", curve)
    lines = path.read_text().splitlines()
    assert lines[0] == "beta\trobust_only_acc\tnonrobust_only_acc"
    assert lines[2] == "1\t0.7\t0.4"


def test_bootstrap_degenerate_shift_is_exact():
    a = [2.0] * 50
    b = [0.5] * 50
    diff, lo, hi = bootstrap_mean_diff(a, b, draws=200, seed=0)
    assert diff == pytest.approx(1.5)
    assert lo == pytest.approx(1.5)
    assert hi == pytest.approx(1.5)


def test_bootstrap_detects_clear_separation():
    rng = np.random.default_rng(0)
    a = rng.normal(1.0, 0.1, size=200)
    b = rng.normal(0.0, 0.1, size=200)
    diff, lo, hi = bootstrap_mean_diff(a, b, seed=1)
    assert lo > 0 and hi > lo
    assert lo <= diff <= hi


def test_bootstrap_overlapping_samples_straddle_zero():
    rng = np.random.default_rng(2)
    a = rng.normal(0.0, 1.0, size=200)
    b = rng.normal(0.0, 1.0, size=200)
    _, lo, hi = bootstrap_mean_diff(a, b, seed=3)
    assert lo < 0 < hi
