"""Evaluation attacks: FGSM, PGD (L-inf / L2), margin-loss PGD ("CW"),
the adaptive attack that maximizes non-robust-channel gradients, and
black-box transfer evaluation. All attacks are pure given (model, batch,
seed) and every emitted example respects its norm budget and [0, 1] range.
"""

import dataclasses

import torch
import torch.nn.functional as F

from .distill import ChannelMask
from .errors import ContractError
from .models import SplitClassifier, margin_loss
from .perturb import nonrobust_gradient

NORM_SLACK = 1e-9


@dataclasses.dataclass
class AttackConfig:
    norm: str = "linf"            # "linf" | "l2"
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float = None       # defaults to epsilon / 10
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ContractError(f"unknown norm {self.norm!r}")
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")
        if self.step_size is None:
            self.step_size = self.epsilon / 10
        if self.step_size <= 0:
            raise ContractError("step_size must be positive")


@dataclasses.dataclass
class AdvBatch:
    adv: torch.Tensor
    orig: torch.Tensor
    success: torch.Tensor         # per-example misclassification flags
    norms: torch.Tensor           # achieved perturbation norms

    def __post_init__(self):
        if self.adv.min() < 0 or self.adv.max() > 1:
            raise ContractError("adversarial pixels left [0, 1]")


def accuracy(model, x, y) -> float:
    with torch.no_grad():
        return float((model(x).argmax(dim=1) == y).float().mean())


def _finish(model, x, y, adv):
    with torch.no_grad():
        success = model(adv).argmax(dim=1) != y
    delta = (adv - x).flatten(1)
    norms = delta.abs().max(dim=1).values
    return AdvBatch(adv=adv, orig=x, success=success, norms=norms)


def _project(adv, x, cfg):
    if cfg.norm == "linf":
        delta = (adv - x).clamp(-cfg.epsilon, cfg.epsilon)
    else:
        delta = adv - x
        n = delta.flatten(1).norm(dim=1).clamp(min=1e-12)
        factor = (cfg.epsilon / n).clamp(max=1.0)
        delta = delta * factor[:, None, None, None]
    out = (x + delta).clamp(0.0, 1.0)
    # x + delta re-rounds in float32 and can overshoot the ball by an ulp;
    # nudge offending entries back toward x until the bound holds exactly
    if cfg.norm == "linf":
        for _ in range(8):
            delta = out - x
            over = delta.abs().double() > cfg.epsilon
            if not over.any():
                break
            out = torch.where(over, x + delta * (1 - 1e-5), out)
    else:
        for _ in range(8):
            n = (out - x).double().flatten(1).norm(dim=1)
            over = n > cfg.epsilon
            n = n.to(out.dtype)
            if not over.any():
                break
            shrink = torch.where(over, (cfg.epsilon / n) * (1 - 1e-6),
                                 torch.ones_like(n))
            out = x + (out - x) * shrink[:, None, None, None]
            out = out.clamp(0.0, 1.0)
    return out


def fgsm(model: SplitClassifier, x, y, eps: float) -> AdvBatch:
    """Single signed-gradient step on cross-entropy."""
    if eps < 0:
        raise ContractError("eps must be nonnegative")
    x_req = x.clone().requires_grad_(True)
    loss = F.cross_entropy(model(x_req), y)
    grad = torch.autograd.grad(loss, x_req)[0]
    adv = (x + eps * grad.sign()).detach()
    if eps > 0:
        adv = _project(adv, x, AttackConfig(epsilon=eps))
    else:
        adv = adv.clamp(0.0, 1.0)
    return _finish(model, x, y, adv)


def _pgd_ascent(model, x, y, cfg, loss_fn):
    g = torch.Generator().manual_seed(cfg.seed)
    adv = x.clone()
    if cfg.random_start:
        if cfg.norm == "linf":
            adv = adv + (torch.rand(x.shape, generator=g, dtype=x.dtype) * 2 - 1) * cfg.epsilon
        else:
            noise = torch.randn(x.shape, generator=g, dtype=x.dtype)
            noise = noise / noise.flatten(1).norm(dim=1).clamp(min=1e-12)[:, None, None, None]
            scale = torch.rand(x.shape[0], generator=g, dtype=x.dtype) ** (1.0 / noise[0].numel())
            adv = adv + noise * (cfg.epsilon * scale)[:, None, None, None]
        adv = _project(adv, x, cfg)
    for _ in range(cfg.steps):
        adv = adv.detach().requires_grad_(True)
        loss = loss_fn(model(adv), y)
        grad = torch.autograd.grad(loss, adv)[0]
        if cfg.norm == "linf":
            step = cfg.step_size * grad.sign()
        else:
            n = grad.flatten(1).norm(dim=1).clamp(min=1e-12)
            step = cfg.step_size * grad / n[:, None, None, None]
        adv = _project(adv.detach() + step, x, cfg)
    return adv.detach()


def pgd(model: SplitClassifier, x, y, cfg: AttackConfig) -> AdvBatch:
    """Projected gradient ascent on cross-entropy."""
    adv = _pgd_ascent(model, x, y, cfg, F.cross_entropy)
    return _finish(model, x, y, adv)


def cw_linf(model: SplitClassifier, x, y,
            cfg: AttackConfig | None = None) -> AdvBatch:
    """L-inf bounded PGD on the CW margin (max_{i != y} f_i - f_y), 200 steps."""
    if cfg is None:
        cfg = AttackConfig(steps=200)
    if cfg.norm != "linf":
        raise ContractError("cw_linf is an L-inf attack")

    def neg_margin(logits, yy):
        true = logits.gather(1, yy[:, None]).squeeze(1)
        other = logits.masked_fill(
            F.one_hot(yy, logits.shape[1]).bool(), float("-inf")).max(dim=1).values
        return (other - true).mean()

    adv = _pgd_ascent(model, x, y, cfg, neg_margin)
    return _finish(model, x, y, adv)


def adaptive_nonrobust_attack(model: SplitClassifier, x, y,
                              masks: ChannelMask,
                              cfg: AttackConfig | None = None,
                              opt_lr: float = 0.01,
                              c: float = 1.0) -> AdvBatch:
    """Projected descent on -L_base - |G_nr|_2 + |p|_2: drive the model wrong
    while maximizing the non-robust-channel gradient.

    c rescales the margin term; raise it when the model's logit scale is
    small relative to the unit-scale |p|_2 penalty."""
    if cfg is None:
        cfg = AttackConfig(epsilon=0.03, steps=20)
    if masks is None:
        raise ContractError("adaptive attack requires channel masks")
    p = torch.zeros_like(x, requires_grad=True)
    opt = torch.optim.Adam([p], lr=opt_lr)
    for _ in range(cfg.steps):
        adv = _project(x + p, x, cfg)
        base = margin_loss(model(adv), y, c=c, reduction="mean")
        gnr = nonrobust_gradient(model, adv, y, masks, create_graph=True)
        gnr_norm = gnr.flatten(1).norm(dim=1).mean()
        loss = -base - gnr_norm + p.flatten(1).norm(dim=1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            p.copy_(_project(x + p, x, cfg) - x)
    adv = _project(x + p.detach(), x, cfg)
    return _finish(model, x, y, adv)


def transfer_attack(source_model: SplitClassifier,
                    target_model: SplitClassifier, x, y,
                    cfg: AttackConfig) -> float:
    """Craft on source, score on target; returns target accuracy."""
    if source_model.input_shape != target_model.input_shape:
        raise ContractError("source and target expect different input shapes")
    batch = pgd(source_model, x, y, cfg)
    return accuracy(target_model, batch.adv, y)


def check_norm_bounds(batch: AdvBatch, cfg: AttackConfig) -> bool:
    delta = (batch.adv - batch.orig).flatten(1)
    if cfg.norm == "linf":
        achieved = delta.abs().max(dim=1).values
    else:
        achieved = delta.norm(dim=1)
    return bool((achieved <= cfg.epsilon + NORM_SLACK).all())
