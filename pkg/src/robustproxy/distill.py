"""Robust / non-robust channel distillation.

Per-channel tolerable noise variances are found by optimizing a noisy
cross-entropy objective with a KL penalty toward the feature's empirical
per-channel Gaussian marginal. Channels whose tolerated variance exceeds
the profile threshold T = max(sigma_z^2) are marked robust.
"""

import dataclasses

import torch
import torch.nn.functional as F

from .errors import ContractError, DivergenceError
from .models import SplitClassifier

VARIANCE_FLOOR = 1e-4
ARCHIVE_FORMAT_VERSION = 1


@dataclasses.dataclass
class ChannelProfile:
    """Empirical per-channel statistics of the tap feature over a reference set."""

    mu_z: torch.Tensor       # (C,)
    sigma_z: torch.Tensor    # (C,) inherent per-channel std
    T: float                 # max(sigma_z^2), the robustness threshold
    source: str = ""

    def __post_init__(self):
        if (self.sigma_z < 0).any():
            raise ContractError("sigma_z must be nonnegative")


@dataclasses.dataclass
class NoiseVariance:
    """Optimized per-channel noise stds; one row per image in the batch."""

    sigma: torch.Tensor      # (B, C), strictly positive


@dataclasses.dataclass
class ChannelMask:
    """Complementary robust / non-robust indicators, one row per image."""

    i_r: torch.Tensor        # (B, C) in {0, 1}
    i_nr: torch.Tensor       # (B, C) in {0, 1}
    sigma_snapshot: torch.Tensor
    threshold_used: float

    def __post_init__(self):
        if not torch.equal(self.i_r + self.i_nr,
                           torch.ones_like(self.i_r)):
            raise ContractError("i_r and i_nr must be complementary")


@dataclasses.dataclass
class IBConfig:
    beta: float = 10.0
    steps: int = 200
    lr: float = 0.05
    noise_draws: int = 4
    seed: int = 0


def estimate_channel_profile(model: SplitClassifier, batches,
                             source: str = "") -> ChannelProfile:
    """Per-channel mean/std of tap activations pooled over samples and
    spatial positions. Accumulates in float64 with a fixed reduction order
    so the result is deterministic.
    """
    total = None
    total_sq = None
    count = 0
    with torch.no_grad():
        for x in batches:
            z = model.forward_to_tap(x).double()
            total = z.sum(dim=(0, 2, 3)) if total is None else total + z.sum(dim=(0, 2, 3))
            total_sq = z.pow(2).sum(dim=(0, 2, 3)) if total_sq is None \
                else total_sq + z.pow(2).sum(dim=(0, 2, 3))
            count += z.shape[0] * z.shape[2] * z.shape[3]
    if count == 0:
        raise ContractError("reference set is empty")
    mu = total / count
    var = (total_sq / count - mu.pow(2)).clamp(min=0.0)
    sigma = var.sqrt().float()
    mu = mu.float()
    return ChannelProfile(mu_z=mu, sigma_z=sigma,
                          T=float(sigma.pow(2).max()), source=source)


def kl_term(sigma: torch.Tensor, z: torch.Tensor,
            profile: ChannelProfile) -> torch.Tensor:
    """Closed-form diagonal-Gaussian KL between N(z, diag(sigma^2)) and the
    profile marginal N(mu_z, sigma_z^2), averaged over batch, channels and
    spatial positions. Both stds are floored to avoid dead-channel infinities.
    """
    if sigma.dim() == 1:
        sigma = sigma[None, :]
    if sigma.shape[1] != z.shape[1]:
        raise ContractError("sigma / feature channel mismatch")
    s = sigma.clamp(min=VARIANCE_FLOOR)[:, :, None, None]
    sz = profile.sigma_z.to(z.dtype).clamp(min=VARIANCE_FLOOR)[None, :, None, None]
    mz = profile.mu_z.to(z.dtype)[None, :, None, None]
    kl = (torch.log(sz / s)
          + (s.pow(2) + (z - mz).pow(2)) / (2 * sz.pow(2))
          - 0.5)
    return kl.mean()


def ib_optimize_sigma(model: SplitClassifier, x: torch.Tensor,
                      y: torch.Tensor, profile: ChannelProfile,
                      cfg: IBConfig = IBConfig()) -> NoiseVariance:
    """Optimize one noise-std vector per input image.

    Minimizes the expected cross-entropy under reparameterized channel noise
    plus beta times the KL penalty; sigma is parameterized through softplus
    so it stays positive. The model is read-only throughout.
    """
    if cfg.beta < 0:
        raise ContractError("beta must be nonnegative")
    g = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        z = model.forward_to_tap(x)
    B, C = z.shape[0], z.shape[1]
    # Start at the inherent variation so the KL term opens at ~0.
    init = profile.sigma_z.to(z.dtype).clamp(min=VARIANCE_FLOOR)
    rho = torch.log(torch.expm1(init)).expand(B, C).clone().requires_grad_(True)
    opt = torch.optim.Adam([rho], lr=cfg.lr)
    for step in range(cfg.steps):
        sigma = F.softplus(rho)
        ce = 0.0
        for _ in range(cfg.noise_draws):
            eps = torch.randn(z.shape, generator=g, dtype=z.dtype)
            logits = model.forward_from_tap(z + sigma[:, :, None, None] * eps)
            ce = ce + F.cross_entropy(logits, y)
        ce = ce / cfg.noise_draws
        loss = ce + cfg.beta * kl_term(sigma, z, profile)
        if not torch.isfinite(loss):
            raise DivergenceError("IB objective became non-finite",
                                  step=step, value=float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return NoiseVariance(sigma=F.softplus(rho).detach())


def build_mask(sigma: NoiseVariance, profile: ChannelProfile) -> ChannelMask:
    """Robust iff the tolerated variance strictly exceeds T."""
    s = sigma.sigma
    if s.dim() == 1:
        s = s[None, :]
    i_r = (s.pow(2) > profile.T).to(s.dtype)
    return ChannelMask(i_r=i_r, i_nr=1.0 - i_r,
                       sigma_snapshot=s.clone(),
                       threshold_used=profile.T)


def split_feature(z: torch.Tensor, mask: ChannelMask):
    """z_r = z * i_r, z_nr = z * i_nr (broadcast over spatial dims); the two
    parts sum back to z exactly."""
    i_r = mask.i_r.to(z.dtype)
    if i_r.shape[0] not in (1, z.shape[0]):
        raise ContractError("mask batch dimension mismatch")
    i_r = i_r[:, :, None, None]
    i_nr = mask.i_nr.to(z.dtype)[:, :, None, None]
    return z * i_r, z * i_nr


def class_majority_mask(mask: ChannelMask) -> ChannelMask:
    """Collapse per-image masks to a single majority-vote mask (CEO speed option)."""
    i_r = (mask.i_r.mean(dim=0, keepdim=True) > 0.5).to(mask.i_r.dtype)
    return ChannelMask(i_r=i_r, i_nr=1.0 - i_r,
                       sigma_snapshot=mask.sigma_snapshot.mean(dim=0, keepdim=True),
                       threshold_used=mask.threshold_used)


def save_mask_archive(path, *, example_ids, mask: ChannelMask, beta: float,
                      param_version: int):
    """Per-image sigma / mask records in a versioned container."""
    torch.save({
        "format_version": ARCHIVE_FORMAT_VERSION,
        "example_ids": list(example_ids),
        "i_r": mask.i_r,
        "sigma": mask.sigma_snapshot,
        "threshold": mask.threshold_used,
        "beta": beta,
        "param_version": param_version,
    }, path)


def load_mask_archive(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != ARCHIVE_FORMAT_VERSION:
        raise ContractError("unsupported mask archive version")
    mask = ChannelMask(i_r=payload["i_r"], i_nr=1.0 - payload["i_r"],
                       sigma_snapshot=payload["sigma"],
                       threshold_used=payload["threshold"])
    return payload["example_ids"], mask, payload["beta"], payload["param_version"]
