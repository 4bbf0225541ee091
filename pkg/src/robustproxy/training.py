"""Adversarial-training baselines and proxy fine-tuning.

``pretrain_at`` produces a desk-scale AT baseline; ``finetune_with_proxy``
continues from it, re-optimizing class perturbations and refreshing the
proxy bank on a fixed epoch schedule while training on adversarial
examples with the summed AT + proxy objective.
"""

import dataclasses
import math

import torch
import torch.nn.functional as F

from .attacks import AttackConfig, _pgd_ascent, accuracy, pgd
from .data import DatasetHandle, iter_batches, sample_class_subset
from .distill import IBConfig, class_majority_mask, estimate_channel_profile
from .errors import ContractError, DivergenceError
from .models import SplitClassifier, save_checkpoint
from .perturb import PerturbOptConfig, ceo_optimize_crp, compute_masks
from .proxy import ProxyBank, pooled_feature, proxy_loss, refresh_bank

AT_VARIANTS = ("madry", "trades", "mart")


@dataclasses.dataclass
class ATMethod:
    variant: str = "madry"
    trades_beta: float = 6.0
    mart_lambda: float = 5.0

    def __post_init__(self):
        if self.variant not in AT_VARIANTS:
            raise ContractError(f"unknown AT variant {self.variant!r}")
        if self.trades_beta < 0 or self.mart_lambda < 0:
            raise ContractError("AT hyperparameters must be nonnegative")


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    attack: AttackConfig = dataclasses.field(
        default_factory=lambda: AttackConfig(steps=5, step_size=2 / 255))
    eval_attack: AttackConfig = dataclasses.field(
        default_factory=lambda: AttackConfig(steps=20))
    margin: float = 1.0           # proxy-loss margin m
    refresh_period: int = 5       # proxy/CRP refresh every T epochs
    proxy_weight: float = 1.0
    proxy_on_clean: bool = False  # ablation: add the clean-feature proxy term
    ib: IBConfig = dataclasses.field(default_factory=IBConfig)
    crp: PerturbOptConfig = dataclasses.field(default_factory=PerturbOptConfig)
    use_class_mask: bool = True   # majority-vote mask inside CEO
    profile_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0 or self.refresh_period < 1:
            raise ContractError("margin must be >= 0 and refresh_period >= 1")


def _kl(adv_logits, clean_logits, reduction="batchmean"):
    return F.kl_div(F.log_softmax(clean_logits, dim=1),
                    F.log_softmax(adv_logits, dim=1),
                    reduction=reduction, log_target=True)


def make_adversarial(method: ATMethod, model, x, y, attack_cfg: AttackConfig):
    """Inner maximization: CE ascent for madry/mart, KL ascent for trades."""
    if method.variant == "trades":
        with torch.no_grad():
            clean_logits = model(x)

        def kl_loss(logits, _y):
            return _kl(logits, clean_logits)

        return _pgd_ascent(model, x, y, attack_cfg, kl_loss)
    return _pgd_ascent(model, x, y, attack_cfg, F.cross_entropy)


def at_loss(method: ATMethod, model: SplitClassifier, x, y,
            attack_cfg: AttackConfig, x_adv=None) -> torch.Tensor:
    """AT objective at the inner-maximization endpoint.

    madry:  CE(f(x_adv), y)
    trades: CE(f(x), y) + beta * KL(f(x_adv) || f(x))
    mart:   BCE(f(x_adv), y) + lambda * (1 - p_y(x)) * KL(f(x_adv) || f(x))
    """
    if x_adv is None:
        x_adv = make_adversarial(method, model, x, y, attack_cfg)
    adv_logits = model(x_adv)
    if method.variant == "madry":
        return F.cross_entropy(adv_logits, y)
    clean_logits = model(x)
    if method.variant == "trades":
        return (F.cross_entropy(clean_logits, y)
                + method.trades_beta * _kl(adv_logits, clean_logits))
    # mart
    p_adv = F.softmax(adv_logits, dim=1)
    p_true = p_adv.gather(1, y[:, None]).squeeze(1)
    masked = p_adv.masked_fill(F.one_hot(y, p_adv.shape[1]).bool(), -1.0)
    p_runner = masked.max(dim=1).values.clamp(min=0.0)
    bce = (-torch.log(p_true.clamp(min=1e-12))
           - torch.log((1 - p_runner).clamp(min=1e-12))).mean()
    with torch.no_grad():
        p_clean_true = F.softmax(clean_logits, dim=1).gather(
            1, y[:, None]).squeeze(1)
    kl = _kl(adv_logits, clean_logits, reduction="none").sum(dim=1)
    return bce + method.mart_lambda * ((1 - p_clean_true) * kl).mean()


def evaluate(model: SplitClassifier, ds: DatasetHandle,
             attack_cfg: AttackConfig | None = None,
             max_examples: int = 512) -> dict:
    """Clean accuracy and, when an attack config is given, PGD accuracy."""
    model.eval()
    x = ds.images[:max_examples]
    y = ds.labels[:max_examples]
    out = {"clean_acc": accuracy(model, x, y)}
    if attack_cfg is not None:
        out["pgd_acc"] = accuracy(model, pgd(model, x, y, attack_cfg).adv, y)
    return out


def _cosine_lr(base_lr, epoch, total_epochs):
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / max(total_epochs, 1)))


def pretrain_at(model: SplitClassifier, ds: DatasetHandle, method: ATMethod,
                cfg: TrainConfig, test_ds: DatasetHandle | None = None,
                checkpoint_path=None, adversarial: bool = True):
    """Train an AT baseline (or a standard model with ``adversarial=False``).

    Returns (model, per-epoch metric records).
    """
    torch.manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    history = []
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(cfg.lr, epoch, cfg.epochs)
        model.train()
        epoch_loss = 0.0
        nb = 0
        for xb, yb, _ in iter_batches(ds, cfg.batch_size, cfg.seed, epoch):
            if adversarial:
                loss = at_loss(method, model, xb, yb, cfg.attack)
            else:
                loss = F.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise DivergenceError("training loss became non-finite",
                                      step=epoch, value=float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.bump_param_version()
            epoch_loss += float(loss.detach())
            nb += 1
        record = {"epoch": epoch, "train_loss": epoch_loss / max(nb, 1)}
        if test_ds is not None:
            record.update(evaluate(model, test_ds, cfg.eval_attack))
        history.append(record)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, history


def _rebuild_crps(model, ds, cfg: TrainConfig, epoch: int):
    """Freeze the model, re-profile the tap, and re-run CEO for every class."""
    was_training = model.training
    model.eval()
    ref_x, _, _ = next(iter_batches(ds, min(cfg.profile_samples, len(ds)),
                                    cfg.seed, epoch))
    profile = estimate_channel_profile(model, [ref_x], source="train-sample")
    crps = {}
    masks_by_class = {}
    for k in range(ds.num_classes):
        n = min(cfg.crp.subset_size, len(ds.per_class_index[k]))
        xs, ys, _ = sample_class_subset(ds, k, n, seed=cfg.seed + epoch)
        mask = compute_masks(model, xs, ys, profile, cfg.ib)
        if cfg.use_class_mask:
            mask = class_majority_mask(mask)
        masks_by_class[k] = mask
        crp_cfg = dataclasses.replace(cfg.crp, subset_size=n,
                                      seed=cfg.seed + epoch)
        crps[k] = ceo_optimize_crp(model, ds, k, mask, crp_cfg)
    if was_training:
        model.train()
    return profile, masks_by_class, crps


def finetune_with_proxy(model: SplitClassifier, ds: DatasetHandle,
                        method: ATMethod, cfg: TrainConfig,
                        test_ds: DatasetHandle | None = None,
                        checkpoint_path=None):
    """Proxy fine-tuning loop.

    At epochs 0, T, 2T, ... the class perturbations are re-optimized on the
    current (frozen) model and the proxy bank is refreshed; every batch is
    replaced by its adversarial counterpart and trained with
    L_AT + proxy_weight * L_proxy on the adversarial pooled tap features.
    Nothing is added to inputs at evaluation time.
    """
    torch.manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    bank: ProxyBank | None = None
    state = {"profile": None, "masks_by_class": None, "crps": None}
    history = []
    for epoch in range(cfg.epochs):
        refreshed = False
        if epoch % cfg.refresh_period == 0:
            profile, masks_by_class, crps = _rebuild_crps(model, ds, cfg, epoch)
            state.update(profile=profile, masks_by_class=masks_by_class,
                         crps=crps)
            bank = refresh_bank(model, ds, crps, epoch=epoch,
                                seed=cfg.seed + epoch,
                                refresh_period=cfg.refresh_period)
            refreshed = True
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(cfg.lr, epoch, cfg.epochs)
        model.train()
        sums = {"at": 0.0, "proxy": 0.0}
        nb = 0
        for xb, yb, _ in iter_batches(ds, cfg.batch_size, cfg.seed, epoch):
            x_adv = make_adversarial(method, model, xb, yb, cfg.attack)
            l_at = at_loss(method, model, xb, yb, cfg.attack, x_adv=x_adv)
            feats = pooled_feature(model, x_adv)
            l_proxy = proxy_loss(feats, yb, bank, m=cfg.margin)
            if cfg.proxy_on_clean:
                l_proxy = l_proxy + proxy_loss(
                    pooled_feature(model, xb), yb, bank, m=cfg.margin)
            loss = l_at + cfg.proxy_weight * l_proxy
            if not torch.isfinite(loss):
                raise DivergenceError("fine-tune loss became non-finite",
                                      step=epoch, value=float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.bump_param_version()
            sums["at"] += float(l_at.detach())
            sums["proxy"] += float(l_proxy.detach())
            nb += 1
        record = {"epoch": epoch, "refreshed": refreshed,
                  "at_loss": sums["at"] / max(nb, 1),
                  "proxy_loss": sums["proxy"] / max(nb, 1),
                  "bank_built_at": bank.built_at}
        if test_ds is not None:
            record.update(evaluate(model, test_ds, cfg.eval_attack))
        history.append(record)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, {"history": history, "bank": bank, **state}
