"""Robust perturbations.

Per-image perturbations are optimized to keep the prediction correct while
suppressing the gradient of the margin loss with respect to the non-robust
feature channels. The class-wise variant (one perturbation per class) is
found by minibatch empirical-risk minimization over a class subset.
"""

import dataclasses

import torch

from .data import DatasetHandle, sample_class_subset
from .distill import ChannelMask, ChannelProfile, IBConfig, build_mask, ib_optimize_sigma
from .errors import ContractError, DivergenceError
from .models import SplitClassifier, margin_loss

CRP_ARCHIVE_VERSION = 1


@dataclasses.dataclass
class PerturbOptConfig:
    steps: int = 100
    lr: float = 0.01
    c: float = 1.0
    clip_bounds: tuple = (0.0, 1.0)
    batch_size: int = 64          # CEO minibatch size
    subset_size: int = 500        # CEO class subset size N
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.lr <= 0:
            raise ContractError("steps must be >= 1 and lr > 0")


@dataclasses.dataclass
class RobustPerturbation:
    r: torch.Tensor               # (B, C, H, W)
    example_ids: list
    param_version: int
    trace: dict                   # final base loss, |G_nr|, |r|_2


@dataclasses.dataclass
class ClassPerturbation:
    r_k: torch.Tensor             # (1, C, H, W)
    class_id: int
    sample_size: int
    param_version: int


def nonrobust_gradient(model: SplitClassifier, x: torch.Tensor,
                       y: torch.Tensor, mask: ChannelMask,
                       c: float = 1.0, create_graph: bool = False) -> torch.Tensor:
    """G_nr = i_nr * dL_base/dz evaluated at z = f_l(x).

    The margin loss is summed over the batch so each row of the result is
    exactly that image's own gradient. With ``create_graph`` the result
    stays differentiable w.r.t. x (second-order path).
    """
    if mask.i_nr.shape[1] != model.tap_channels:
        raise ContractError("mask channel count does not match tap layer")
    z = model.forward_to_tap(x)
    if not z.requires_grad:
        raise ContractError("gradient tracking unavailable on tap feature")
    logits = model.forward_from_tap(z)
    loss = margin_loss(logits, y, c=c, reduction="sum")
    grad = torch.autograd.grad(loss, z, create_graph=create_graph)[0]
    return mask.i_nr.to(grad.dtype)[:, :, None, None] * grad


def _gnr_norms(model, x, y, mask, c, create_graph=False):
    g = nonrobust_gradient(model, x, y, mask, c=c, create_graph=create_graph)
    return g.flatten(1).norm(dim=1)


def optimize_rp(model: SplitClassifier, x: torch.Tensor, y: torch.Tensor,
                mask: ChannelMask, cfg: PerturbOptConfig = PerturbOptConfig()
                ) -> RobustPerturbation:
    """Per-image robust perturbation via plain gradient descent on
    L_base + |G_nr|_2 + |r|_2, re-clipping x+r to [0, 1] every step.

    The per-image objectives are separable, so the summed loss gives each
    image its own full-size descent step.
    """
    version_before = model.param_version
    lo, hi = cfg.clip_bounds
    r = torch.zeros_like(x, requires_grad=True)
    for step in range(cfg.steps):
        x_adv = (x + r).clamp(lo, hi)
        logits = model(x_adv)
        base = margin_loss(logits, y, c=cfg.c, reduction="none")
        gnr = _gnr_norms(model, x_adv, y, mask, cfg.c, create_graph=True)
        loss = (base + gnr + r.flatten(1).norm(dim=1)).sum()
        if not torch.isfinite(loss):
            raise DivergenceError("RP objective became non-finite",
                                  step=step, value=float(loss))
        grad = torch.autograd.grad(loss, r)[0]
        with torch.no_grad():
            r -= cfg.lr * grad
    with torch.no_grad():
        r_final = ((x + r).clamp(lo, hi) - x).detach()
        x_adv = x + r_final
        final_base = float(margin_loss(model(x_adv), y, c=cfg.c))
    final_gnr = float(_gnr_norms(model, x_adv, y, mask, cfg.c).mean())
    assert model.param_version == version_before, "model must stay frozen"
    return RobustPerturbation(
        r=r_final, example_ids=[], param_version=model.param_version,
        trace={"final_base_loss": final_base,
               "final_gnr_norm": final_gnr,
               "r_l2": float(r_final.flatten(1).norm(dim=1).mean())})


def compute_masks(model: SplitClassifier, x: torch.Tensor, y: torch.Tensor,
                  profile: ChannelProfile, ib_cfg: IBConfig = IBConfig()
                  ) -> ChannelMask:
    """Per-image masks: IB sigma optimization followed by thresholding."""
    sigma = ib_optimize_sigma(model, x, y, profile, ib_cfg)
    return build_mask(sigma, profile)


def ceo_optimize_crp(model: SplitClassifier, ds: DatasetHandle, k: int,
                     masks: ChannelMask,
                     cfg: PerturbOptConfig = PerturbOptConfig()
                     ) -> ClassPerturbation:
    """Class-wise ERM optimization of a single perturbation r_k.

    Minimizes the class-averaged margin loss plus the class-averaged
    non-robust gradient norm over a seeded class subset; only r_k is
    updated and the model stays frozen. The per-image |r| term of the
    per-image objective is deliberately absent here.
    """
    version_before = model.param_version
    n = min(cfg.subset_size, len(ds.per_class_index.get(k, [])))
    if n < 1:
        raise ContractError(f"class {k} has no examples")
    xs, ys, idx = sample_class_subset(ds, k, n, seed=cfg.seed)
    if masks.i_r.shape[0] not in (1, n):
        raise ContractError("masks must be class-level or aligned with the subset")
    lo, hi = cfg.clip_bounds
    r_k = torch.zeros((1,) + tuple(xs.shape[1:]), requires_grad=True)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    bs = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        sel = torch.randperm(n, generator=g)[:bs]
        xb, yb = xs[sel], ys[sel]
        mb = masks if masks.i_r.shape[0] == 1 else ChannelMask(
            i_r=masks.i_r[sel], i_nr=masks.i_nr[sel],
            sigma_snapshot=masks.sigma_snapshot[sel],
            threshold_used=masks.threshold_used)
        x_adv = (xb + r_k).clamp(lo, hi)
        base = margin_loss(model(x_adv), yb, c=cfg.c)
        gnr = _gnr_norms(model, x_adv, yb, mb, cfg.c, create_graph=True).mean()
        loss = base + gnr
        if not torch.isfinite(loss):
            raise DivergenceError("CEO objective became non-finite",
                                  step=step, value=float(loss))
        grad = torch.autograd.grad(loss, r_k)[0]
        with torch.no_grad():
            r_k -= cfg.lr * grad
    assert model.param_version == version_before, "model must stay frozen"
    return ClassPerturbation(r_k=r_k.detach(), class_id=k, sample_size=n,
                             param_version=model.param_version)


def apply_crp(x: torch.Tensor, y: torch.Tensor, crps: dict,
              clip_bounds=(0.0, 1.0)) -> torch.Tensor:
    """Add each image's class perturbation and clip; labels are untouched."""
    lo, hi = clip_bounds
    out = x.clone()
    for k in y.unique().tolist():
        if k not in crps:
            raise ContractError(f"no CRP for class {k}")
        sel = y == k
        out[sel] = (x[sel] + crps[k].r_k.to(x.dtype)).clamp(lo, hi)
    return out


def save_crp_archive(path, crps: dict, config_hash: str = ""):
    torch.save({
        "format_version": CRP_ARCHIVE_VERSION,
        "config_hash": config_hash,
        "records": {
            k: {"r_k": c.r_k, "class_id": c.class_id,
                "sample_size": c.sample_size,
                "param_version": c.param_version}
            for k, c in crps.items()
        },
    }, path)


def load_crp_archive(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CRP_ARCHIVE_VERSION:
        raise ContractError("unsupported CRP archive version")
    return {k: ClassPerturbation(r_k=rec["r_k"], class_id=rec["class_id"],
                                 sample_size=rec["sample_size"],
                                 param_version=rec["param_version"])
            for k, rec in payload["records"].items()}
