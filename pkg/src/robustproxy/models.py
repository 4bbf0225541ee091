"""Split classifier: a conv feature extractor tapped at the last conv layer,
followed by a global-average-pool head. The tap exposes the feature map that
the distillation and perturbation machinery works on.
"""

import hashlib
import json

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ContractError

CHECKPOINT_FORMAT_VERSION = 1


class SplitClassifier(nn.Module):
    """Classifier split into ``features`` (up to and including the tap layer)
    and ``head`` (global average pooling + linear).

    ``forward(x)`` and ``forward_from_tap(forward_to_tap(x))`` follow the exact
    same computation path, so they agree bit for bit.
    """

    def __init__(self, features: nn.Module, head: nn.Module, *,
                 num_classes: int, input_shape: tuple,
                 arch_descriptor: dict, tap_index: int):
        super().__init__()
        self.features = features
        self.head = head
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.arch_descriptor = dict(arch_descriptor)
        self.tap_index = tap_index
        self.param_version = 0

    @property
    def tap_channels(self) -> int:
        return self.arch_descriptor["widths"][-1]

    def bump_param_version(self):
        """Call after every optimizer step that touches parameters."""
        self.param_version += 1

    def _check_input(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ContractError(
                f"expected input shape (N, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(x.shape)}")

    def forward_to_tap(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.features(x)

    def forward_from_tap(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.tap_channels:
            raise ContractError(
                f"expected feature map with {self.tap_channels} channels, "
                f"got shape {tuple(z.shape)}")
        return self.head(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_from_tap(self.forward_to_tap(x))


def make_toy_convnet(num_classes: int = 10, in_channels: int = 3,
                     widths=(16, 32, 32, 64), image_size: int = 32,
                     bias: bool = True, seed=None) -> SplitClassifier:
    """Four 3x3 conv blocks with stride-2 downsampling at blocks 2 and 4,
    tapped after the last conv, then GAP + linear head.
    """
    if len(widths) < 1:
        raise ContractError("widths must be nonempty")
    if seed is not None:
        torch.manual_seed(seed)
    strides = [2 if (i % 2 == 1) else 1 for i in range(len(widths))]
    layers = []
    prev = in_channels
    for w, s in zip(widths, strides):
        layers += [nn.Conv2d(prev, w, 3, stride=s, padding=1, bias=bias),
                   nn.ReLU(inplace=False)]
        prev = w
    features = nn.Sequential(*layers)
    head = nn.Sequential(
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(widths[-1], num_classes, bias=bias),
    )
    descriptor = {
        "family": "toy_convnet",
        "num_classes": num_classes,
        "in_channels": in_channels,
        "widths": list(widths),
        "image_size": image_size,
        "bias": bias,
    }
    return SplitClassifier(
        features, head,
        num_classes=num_classes,
        input_shape=(in_channels, image_size, image_size),
        arch_descriptor=descriptor,
        tap_index=len(layers) - 1,
    )


def margin_loss(logits: torch.Tensor, y: torch.Tensor, c: float = 1.0,
                reduction: str = "mean") -> torch.Tensor:
    """Hinged CW-style margin loss: c * max(max_{i != y} logit_i - logit_y, 0).

    Zero exactly when the true class (weakly) achieves the max logit;
    minimizing it drives correct classification.
    """
    if c <= 0:
        raise ContractError(f"c must be positive, got {c}")
    if logits.dim() != 2 or y.dim() != 1 or logits.shape[0] != y.shape[0]:
        raise ContractError("logits must be (N, K) and y must be (N,)")
    true = logits.gather(1, y[:, None]).squeeze(1)
    masked = logits.masked_fill(
        F.one_hot(y, logits.shape[1]).bool(), float("-inf"))
    other = masked.max(dim=1).values
    per_sample = c * torch.clamp(other - true, min=0.0)
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "none":
        return per_sample
    raise ContractError(f"unknown reduction {reduction!r}")


def arch_hash(descriptor: dict) -> str:
    return hashlib.sha256(
        json.dumps(descriptor, sort_keys=True).encode()).hexdigest()


def save_checkpoint(model: SplitClassifier, path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch_descriptor": model.arch_descriptor,
        "arch_hash": arch_hash(model.arch_descriptor),
        "tap_index": model.tap_index,
        "param_version": model.param_version,
        "state_dict": model.state_dict(),
        "rng_state": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_arch: dict | None = None,
                    restore_rng: bool = False) -> SplitClassifier:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {payload['format_version']}")
    descriptor = payload["arch_descriptor"]
    if payload.get("arch_hash") != arch_hash(descriptor):
        raise CheckpointError("architecture hash mismatch: checkpoint corrupt")
    if expected_arch is not None and arch_hash(expected_arch) != payload["arch_hash"]:
        raise CheckpointError("checkpoint architecture differs from expectation")
    if descriptor.get("family") != "toy_convnet":
        raise CheckpointError(f"unknown architecture family {descriptor.get('family')!r}")
    model = make_toy_convnet(
        num_classes=descriptor["num_classes"],
        in_channels=descriptor["in_channels"],
        widths=descriptor["widths"],
        image_size=descriptor["image_size"],
        bias=descriptor["bias"],
    )
    model.load_state_dict(payload["state_dict"])
    model.param_version = payload["param_version"]
    if restore_rng:
        torch.set_rng_state(payload["rng_state"])
    return model
