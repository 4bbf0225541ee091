"""Measurement battery: non-robust gradient-norm distributions, same-class
feature-similarity distributions, masked-channel accuracy sweeps, feature
inversion, and feature export for external embedding tools.
"""

import dataclasses
import struct

import numpy as np
import torch

from .data import DatasetHandle
from .distill import ChannelMask
from .errors import ContractError, DivergenceError
from .models import SplitClassifier
from .perturb import apply_crp, nonrobust_gradient
from .proxy import pooled_feature

FEATURE_MAGIC = b"RPFEAT"
FEATURE_VERSION = 1


@dataclasses.dataclass
class Distribution:
    values: list
    label: str

    @property
    def summary(self) -> dict:
        arr = np.asarray(self.values, dtype=np.float64)
        qs = np.quantile(arr, [0.05, 0.25, 0.5, 0.75, 0.95])
        return {"mean": float(arr.mean()), "std": float(arr.std()),
                "q05": float(qs[0]), "q25": float(qs[1]), "q50": float(qs[2]),
                "q75": float(qs[3]), "q95": float(qs[4]),
                "n": int(arr.size)}


@dataclasses.dataclass
class AblationCurve:
    betas: list
    robust_only_acc: list
    nonrobust_only_acc: list

    def __post_init__(self):
        if not (len(self.betas) == len(self.robust_only_acc)
                == len(self.nonrobust_only_acc)):
            raise ContractError("ablation series must have equal length")


def gradient_norm_distribution(model: SplitClassifier, x, y,
                               masks: ChannelMask, crps: dict | None = None,
                               label: str = "") -> Distribution:
    """Per-image |G_nr|_2; with ``crps`` the class perturbations are applied
    to the inputs first."""
    if crps is not None:
        x = apply_crp(x, y, crps)
    g = nonrobust_gradient(model, x, y, masks)
    norms = g.flatten(1).norm(dim=1).detach()
    return Distribution(values=norms.tolist(),
                        label=label or ("with_crp" if crps else "without_crp"))


def positive_similarity_distribution(model: SplitClassifier,
                                     ds: DatasetHandle,
                                     crps: dict | None = None,
                                     pairs: int = 2000, seed: int = 0,
                                     label: str = "") -> Distribution:
    """Cosine similarities of pooled features over seeded same-class pairs."""
    g = torch.Generator().manual_seed(seed)
    sims = []
    classes = [k for k, idx in ds.per_class_index.items() if len(idx) >= 2]
    if not classes:
        raise ContractError("no class has two or more examples")
    with torch.no_grad():
        ks = torch.randint(len(classes), (pairs,), generator=g)
        for chunk in torch.split(ks, 256):
            xa, xb, ya = [], [], []
            for kk in chunk.tolist():
                k = classes[kk]
                pool = ds.per_class_index[k]
                i, j = torch.randperm(len(pool), generator=g)[:2].tolist()
                xa.append(ds.images[pool[i]])
                xb.append(ds.images[pool[j]])
                ya.append(k)
            xa = torch.stack(xa)
            xb = torch.stack(xb)
            yy = torch.tensor(ya)
            if crps is not None:
                xa = apply_crp(xa, yy, crps)
                xb = apply_crp(xb, yy, crps)
            fa = pooled_feature(model, xa)
            fb = pooled_feature(model, xb)
            cos = (fa * fb).sum(dim=1) / (
                fa.norm(dim=1) * fb.norm(dim=1)).clamp(min=1e-12)
            sims.extend(cos.tolist())
    return Distribution(values=sims,
                        label=label or ("with_crp" if crps else "without_crp"))


def masked_accuracy(model: SplitClassifier, x, y, masks: ChannelMask,
                    keep: str = "robust") -> float:
    """Accuracy when the head only sees the kept channel subset."""
    if keep == "robust":
        m = masks.i_r
    elif keep == "nonrobust":
        m = masks.i_nr
    elif keep == "both":
        m = torch.ones_like(masks.i_r)
    else:
        raise ContractError(f"unknown keep mode {keep!r}")
    with torch.no_grad():
        z = model.forward_to_tap(x)
        logits = model.forward_from_tap(z * m.to(z.dtype)[:, :, None, None])
        return float((logits.argmax(dim=1) == y).float().mean())


def invert_feature(model: SplitClassifier, target: torch.Tensor,
                   masks: ChannelMask, keep: str = "robust",
                   steps: int = 200, lr: float = 0.05, seed: int = 0):
    """Gradient-descend a seeded uniform-random image so its kept-channel
    feature matches ``target``. Returns (image, per-step residuals)."""
    m = masks.i_r if keep == "robust" else masks.i_nr
    g = torch.Generator().manual_seed(seed)
    shape = (target.shape[0],) + model.input_shape
    img = torch.rand(shape, generator=g, dtype=target.dtype).requires_grad_(True)
    opt = torch.optim.Adam([img], lr=lr)
    residuals = []
    for step in range(steps):
        z = model.forward_to_tap(img.clamp(0.0, 1.0))
        res = ((z - target) * m.to(z.dtype)[:, :, None, None]).flatten(1).norm(dim=1).mean()
        if not torch.isfinite(res):
            raise DivergenceError("inversion residual became non-finite",
                                  step=step, value=float(res.detach()))
        residuals.append(float(res.detach()))
        opt.zero_grad()
        res.backward()
        opt.step()
    return img.detach().clamp(0.0, 1.0), residuals


def export_features(model: SplitClassifier, ds: DatasetHandle, out_path,
                    crps: dict | None = None, batch_size: int = 256):
    """Write (id, label, pooled feature) records as length-prefixed binary."""
    with open(out_path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(bytes([FEATURE_VERSION]))
        with torch.no_grad():
            for start in range(0, len(ds), batch_size):
                x = ds.images[start:start + batch_size]
                y = ds.labels[start:start + batch_size]
                if crps is not None:
                    x = apply_crp(x, y, crps)
                feats = pooled_feature(model, x).numpy().astype("<f4")
                for row, lab, ex_id in zip(
                        feats, y.tolist(),
                        ds.ids[start:start + batch_size]):
                    id_bytes = ex_id.encode()
                    payload = (struct.pack("<H", len(id_bytes)) + id_bytes
                               + struct.pack("<iI", lab, row.size)
                               + row.tobytes())
                    fh.write(struct.pack("<I", len(payload)))
                    fh.write(payload)
    return out_path


def read_features(path):
    """Round-trip reader for export_features output."""
    records = []
    with open(path, "rb") as fh:
        if fh.read(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
            raise ContractError("not a feature export file")
        version = fh.read(1)
        if version != bytes([FEATURE_VERSION]):
            raise ContractError("unsupported feature export version")
        while True:
            head = fh.read(4)
            if not head:
                break
            (length,) = struct.unpack("<I", head)
            payload = fh.read(length)
            if len(payload) != length:
                raise ContractError("truncated feature record")
            (id_len,) = struct.unpack("<H", payload[:2])
            ex_id = payload[2:2 + id_len].decode()
            lab, dim = struct.unpack("<iI", payload[2 + id_len:10 + id_len])
            vec = np.frombuffer(payload[10 + id_len:], dtype="<f4")
            if vec.size != dim:
                raise ContractError("feature record dimension mismatch")
            records.append((ex_id, lab, vec))
    return records


def write_distribution(path, *dists: Distribution):
    """Delimited text with a header row; one column per condition."""
    with open(path, "w") as fh:
        fh.write("\t".join(d.label for d in dists) + "\n")
        n = max(len(d.values) for d in dists)
        for i in range(n):
            row = [f"{d.values[i]:.8g}" if i < len(d.values) else ""
                   for d in dists]
            fh.write("\t".join(row) + "\n")
    return path


def write_ablation_curve(path, curve: AblationCurve):
    with open(path, "w") as fh:
        fh.write("beta\trobust_only_acc\tnonrobust_only_acc\n")
        for b, ra, na in zip(curve.betas, curve.robust_only_acc,
                             curve.nonrobust_only_acc):
            fh.write(f"{b:.8g}\t{ra:.8g}\t{na:.8g}\n")
    return path


def bootstrap_mean_diff(a, b, draws: int = 2000, seed: int = 0,
                        alpha: float = 0.05):
    """Percentile bootstrap CI for mean(a) - mean(b)."""
    rng = np.random.default_rng(seed)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diffs = np.empty(draws)
    for i in range(draws):
        diffs[i] = (rng.choice(a, a.size).mean()
                    - rng.choice(b, b.size).mean())
    lo, hi = np.quantile(diffs, [alpha / 2, 1 - alpha / 2])
    return float(a.mean() - b.mean()), float(lo), float(hi)
