"""Robust proxies and the pull/push proxy loss.

A proxy is the unit-normalized pooled tap feature of one randomly chosen
CRP-augmented training image per class. The loss pulls same-class features
toward their proxy and pushes every feature away from the other proxies;
proxies are constants for gradient purposes.
"""

import dataclasses

import torch

from .data import DatasetHandle, sample_class_subset
from .errors import ContractError
from .models import SplitClassifier

BANK_FORMAT_VERSION = 1


class DistanceCounter:
    """Counts pairwise distance evaluations made by proxy_loss."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


distance_counter = DistanceCounter()


@dataclasses.dataclass
class Proxy:
    class_id: int
    vector: torch.Tensor          # (C,), unit L2 norm
    source_example_id: str
    crp_version: int
    epoch_built: int

    def __post_init__(self):
        if abs(float(self.vector.norm()) - 1.0) > 1e-5:
            raise ContractError("proxy vector must be unit-normalized")


@dataclasses.dataclass
class ProxyBank:
    proxies: dict                 # class id -> Proxy
    refresh_period: int
    built_at: int                 # model param_version at build time
    epoch_built: int = 0

    def matrix(self, dtype=torch.float32) -> torch.Tensor:
        """(K, C) proxy matrix in class-id order."""
        keys = sorted(self.proxies)
        return torch.stack([self.proxies[k].vector.to(dtype) for k in keys])

    def class_order(self):
        return sorted(self.proxies)


def pooled_feature(model: SplitClassifier, x: torch.Tensor) -> torch.Tensor:
    """Spatial-average-pooled tap feature, (B, C)."""
    return model.forward_to_tap(x).mean(dim=(2, 3))


def build_proxy(model: SplitClassifier, ds: DatasetHandle, crps: dict,
                k: int, seed: int, epoch: int = 0) -> Proxy:
    """One seeded random class-k training image, CRP added, pooled, normalized."""
    if k not in crps:
        raise ContractError(f"no CRP available for class {k}")
    x, _, idx = sample_class_subset(ds, k, 1, seed=seed)
    x_aug = (x + crps[k].r_k.to(x.dtype)).clamp(0.0, 1.0)
    with torch.no_grad():
        vec = pooled_feature(model, x_aug)[0]
    norm = vec.norm()
    if norm == 0:
        raise ContractError(f"class {k} proxy feature is the zero vector")
    return Proxy(class_id=k, vector=vec / norm,
                 source_example_id=ds.ids[idx[0]],
                 crp_version=crps[k].param_version, epoch_built=epoch)


def refresh_bank(model: SplitClassifier, ds: DatasetHandle, crps: dict,
                 epoch: int, seed: int, refresh_period: int = 5) -> ProxyBank:
    missing = [k for k in range(ds.num_classes) if k not in crps]
    if missing:
        raise ContractError(f"classes missing a CRP: {missing}")
    proxies = {
        k: build_proxy(model, ds, crps, k, seed=seed * 1009 + k, epoch=epoch)
        for k in range(ds.num_classes)
    }
    return ProxyBank(proxies=proxies, refresh_period=refresh_period,
                     built_at=model.param_version, epoch_built=epoch)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """d = 1 - cos(a, b), in [0, 2]."""
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ContractError("cosine distance undefined for the zero vector")
    return 1.0 - (a @ b) / (na * nb)


def proxy_loss(features: torch.Tensor, labels: torch.Tensor, bank: ProxyBank,
               m: float = 1.0) -> torch.Tensor:
    """Pull/push loss over the full feature-by-proxy distance matrix.

    Pull: mean over proxies of classes present in the batch of the summed
    (d - m) to their own-class features. Push: mean over all proxies of the
    summed (d + m) to other-class features, subtracted. Exactly B x K
    distance evaluations are performed (instrumented).
    """
    if features.shape[0] == 0:
        raise ContractError("empty batch")
    order = bank.class_order()
    missing = set(labels.tolist()) - set(order)
    if missing:
        raise ContractError(f"labels without a proxy: {sorted(missing)}")
    P = bank.matrix(dtype=features.dtype)        # (K, C), constants
    fn = features.norm(dim=1, keepdim=True)
    if (fn == 0).any():
        raise ContractError("zero feature vector in batch")
    D = 1.0 - (features / fn) @ P.t()            # (B, K)
    distance_counter.count += D.numel()
    col_of = {k: j for j, k in enumerate(order)}
    cols = torch.tensor([col_of[int(l)] for l in labels])
    same = torch.zeros_like(D, dtype=torch.bool)
    same[torch.arange(len(labels)), cols] = True
    present = same.any(dim=0)                    # proxies with positives
    pull = (D - m)[same].sum() / present.sum()
    push = (D + m)[~same].sum() / len(order)
    return pull - push


def distance_evaluation_count(batch_size: int, num_classes: int) -> int:
    """Exact number of distance evaluations proxy_loss performs per batch."""
    return batch_size * num_classes


def save_bank(path, bank: ProxyBank):
    torch.save({
        "format_version": BANK_FORMAT_VERSION,
        "refresh_period": bank.refresh_period,
        "built_at": bank.built_at,
        "epoch_built": bank.epoch_built,
        "proxies": {
            k: {"vector": p.vector, "source_example_id": p.source_example_id,
                "crp_version": p.crp_version, "epoch_built": p.epoch_built}
            for k, p in bank.proxies.items()
        },
    }, path)


def load_bank(path) -> ProxyBank:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != BANK_FORMAT_VERSION:
        raise ContractError("unsupported proxy bank version")
    proxies = {
        k: Proxy(class_id=k, vector=rec["vector"],
                 source_example_id=rec["source_example_id"],
                 crp_version=rec["crp_version"],
                 epoch_built=rec["epoch_built"])
        for k, rec in payload["proxies"].items()
    }
    return ProxyBank(proxies=proxies,
                     refresh_period=payload["refresh_period"],
                     built_at=payload["built_at"],
                     epoch_built=payload["epoch_built"])
