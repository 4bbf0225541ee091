"""Dataset ingestion and batching.

CIFAR-10 is read from the standard binary batches (3073-byte records: one
label byte followed by 3072 pixel bytes in row-major RGB planes). A seeded
synthetic generator provides fast, fully deterministic data for tests.
Pixels are always scaled to [0, 1]; any normalization belongs inside the
model so that epsilon-ball budgets stay in pixel space.
"""

import dataclasses
import os

import numpy as np
import torch

from .errors import ContractError, IngestionError

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_RECORD = 3073


@dataclasses.dataclass
class DatasetHandle:
    """In-memory dataset with stable example ids and a per-class index."""

    images: torch.Tensor          # (N, C, H, W) float32 in [0, 1]
    labels: torch.Tensor          # (N,) int64
    ids: list                     # stable per-example identifiers
    split: str                    # "train" | "test"
    num_classes: int

    def __post_init__(self):
        if self.images.min() < 0 or self.images.max() > 1:
            raise ContractError("pixels must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ContractError("labels out of range")
        self.per_class_index = {k: [] for k in range(self.num_classes)}
        for i, lab in enumerate(self.labels.tolist()):
            self.per_class_index[lab].append(i)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices, split=None):
        return DatasetHandle(
            images=self.images[indices],
            labels=self.labels[indices],
            ids=[self.ids[i] for i in indices],
            split=split or self.split,
            num_classes=self.num_classes,
        )


@dataclasses.dataclass
class SyntheticSpec:
    num_classes: int = 10
    examples_per_class: int = 200
    image_size: int = 16
    channels: int = 3
    class_signal_strength: float = 1.0
    noise_std: float = 0.1
    seed: int = 0


def load_cifar10(data_dir, split: str = "train",
                 files=None, max_per_class=None) -> DatasetHandle:
    """Load a CIFAR-10 split from the binary batch files.

    ``files`` narrows ingestion to a subset of batch files (e.g. a single
    training batch); ``max_per_class`` caps the per-class count for
    desk-scale runs.
    """
    if split not in ("train", "test"):
        raise ContractError(f"unknown split {split!r}")
    names = files if files is not None else (
        CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES)
    images, labels, ids = [], [], []
    for name in names:
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            raise IngestionError(f"missing CIFAR-10 batch file: {name}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
            raise IngestionError(f"truncated CIFAR-10 batch file: {name}")
        raw = raw.reshape(-1, CIFAR_RECORD)
        labels.append(raw[:, 0].astype(np.int64))
        images.append(raw[:, 1:].reshape(-1, 3, 32, 32))
        ids.extend(f"{name}:{i}" for i in range(raw.shape[0]))
    pixels = torch.from_numpy(
        np.concatenate(images).astype(np.float32) / 255.0)
    labs = torch.from_numpy(np.concatenate(labels))
    handle = DatasetHandle(pixels, labs, ids, split, num_classes=10)
    if max_per_class is not None:
        keep = []
        for k in range(handle.num_classes):
            keep.extend(handle.per_class_index[k][:max_per_class])
        keep.sort()
        handle = handle.subset(keep)
    return handle


def make_synthetic(spec: SyntheticSpec, split: str = "train") -> DatasetHandle:
    """Seeded synthetic classes: a fixed smooth template per class scaled by
    ``class_signal_strength`` plus Gaussian pixel noise, clipped to [0, 1].
    The same (spec, seed) always regenerates bit-identical data; the train
    and test splits use disjoint noise streams.
    """
    g = torch.Generator().manual_seed(spec.seed)
    shape = (spec.channels, spec.image_size, spec.image_size)
    # Templates are drawn once, before any split-dependent noise.
    templates = 0.5 + 0.5 * torch.rand(
        (spec.num_classes,) + shape, generator=g)
    noise_gen = torch.Generator().manual_seed(
        spec.seed * 2 + (1 if split == "test" else 0) + 1000)
    images, labels, ids = [], [], []
    for k in range(spec.num_classes):
        noise = torch.randn((spec.examples_per_class,) + shape,
                            generator=noise_gen)
        imgs = templates[k] * spec.class_signal_strength + noise * spec.noise_std
        images.append(imgs.clamp(0.0, 1.0))
        labels.append(torch.full((spec.examples_per_class,), k,
                                 dtype=torch.int64))
        ids.extend(f"syn-{split}-{k}-{i}"
                   for i in range(spec.examples_per_class))
    return DatasetHandle(torch.cat(images), torch.cat(labels), ids, split,
                         num_classes=spec.num_classes)


def sample_class_subset(ds: DatasetHandle, k: int, n: int, seed: int):
    """Draw ``n`` distinct class-``k`` examples, order seeded.

    Returns (images, labels, indices).
    """
    if k not in ds.per_class_index:
        raise ContractError(f"class {k} not in dataset")
    pool = ds.per_class_index[k]
    if n > len(pool):
        raise ContractError(
            f"requested {n} examples but class {k} has only {len(pool)}")
    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(pool), generator=g)[:n]
    idx = [pool[i] for i in order.tolist()]
    return ds.images[idx], ds.labels[idx], idx


def iter_batches(ds: DatasetHandle, batch_size: int, seed: int, epoch: int = 0,
                 drop_last: bool = False):
    """Deterministic shuffled batch iterator; order is a pure function of
    (dataset length, seed, epoch)."""
    g = torch.Generator().manual_seed(seed * 100003 + epoch)
    order = torch.randperm(len(ds), generator=g)
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield ds.images[idx], ds.labels[idx], idx.tolist()
