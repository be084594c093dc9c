"""Dataset ingestion: CIFAR-10 batch files and a synthetic stand-in.

Both datasets come out as ``ArrayDataset`` (ids, images, labels held in
memory -- fine at desk scale).  ``Loader`` is a deterministic seeded
batcher that applies train-time augmentation (random crop + horizontal
flip) on the fly.

The synthetic dataset renders each class as a smooth random pattern and
perturbs samples with shifts, amplitude jitter, and pixel noise; it
exists so experiments can run where the CIFAR-10 archive is not
available.
"""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import IngestionError, UsageError

CIFAR_DIR = "cifar-10-batches-py"
CIFAR_TRAIN_FILES = [f"data_batch_{i}" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch"
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class DatasetHandle:
    """Everything needed to materialize one train/test dataset pair."""

    name: str                      # "cifar10" | "synthetic"
    root: str = "data"
    num_classes: int = 10
    subset_fraction: float = 1.0
    augment: bool = True
    seed: int = 0
    # synthetic-only knobs
    image_size: int = 16
    train_per_class: int = 128
    test_per_class: int = 100
    noise: float = 0.35


class ArrayDataset:
    """In-memory dataset: ids (N,), images (N,C,H,W) float32, labels (N,)."""

    def __init__(self, ids: np.ndarray, images: torch.Tensor, labels: torch.Tensor):
        if not (len(ids) == images.shape[0] == labels.shape[0]):
            raise UsageError("ids / images / labels length mismatch")
        self.ids = np.asarray(ids, dtype=np.int64)
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, indices: np.ndarray) -> "ArrayDataset":
        return ArrayDataset(self.ids[indices], self.images[indices], self.labels[indices])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise IngestionError(f"missing dataset file {path}")
    try:
        with open(path, "rb") as fh:
            raw = pickle.load(fh, encoding="bytes")
        data = np.asarray(raw[b"data"], dtype=np.uint8)
        labels = np.asarray(raw[b"labels"], dtype=np.int64)
        if data.ndim != 2 or data.shape[1] != 3072 or len(labels) != data.shape[0]:
            raise ValueError(f"unexpected shapes {data.shape} / {labels.shape}")
    except (KeyError, ValueError, pickle.UnpicklingError, EOFError) as err:
        raise IngestionError(
            f"corrupt dataset file {path} (sha256 {_sha256(path)}): {err}"
        ) from err
    return data, labels


def _to_image_tensor(data: np.ndarray, mean, std) -> torch.Tensor:
    images = torch.from_numpy(data.reshape(-1, 3, 32, 32)).float() / 255.0
    mean_t = torch.tensor(mean).view(1, 3, 1, 1)
    std_t = torch.tensor(std).view(1, 3, 1, 1)
    return (images - mean_t) / std_t


def load_cifar10(root: str | Path) -> tuple[ArrayDataset, ArrayDataset]:
    """Read the standard python batch files from ``root/cifar-10-batches-py``."""
    base = Path(root) / CIFAR_DIR
    train_chunks, label_chunks = [], []
    for name in CIFAR_TRAIN_FILES:
        data, labels = _read_cifar_batch(base / name)
        train_chunks.append(data)
        label_chunks.append(labels)
    train_data = np.concatenate(train_chunks)
    train_labels = np.concatenate(label_chunks)
    test_data, test_labels = _read_cifar_batch(base / CIFAR_TEST_FILE)
    train = ArrayDataset(np.arange(len(train_labels)),
                         _to_image_tensor(train_data, CIFAR_MEAN, CIFAR_STD),
                         torch.from_numpy(train_labels))
    test = ArrayDataset(np.arange(len(test_labels)) + len(train_labels),
                        _to_image_tensor(test_data, CIFAR_MEAN, CIFAR_STD),
                        torch.from_numpy(test_labels))
    return train, test


def _smooth_patterns(rng: np.random.Generator, count: int, size: int) -> torch.Tensor:
    grid = max(4, size // 3 + 2)
    coarse = torch.from_numpy(rng.standard_normal((count, 3, grid, grid))).float()
    patterns = F.interpolate(coarse, size=(size, size), mode="bicubic",
                             align_corners=False)
    return patterns / patterns.flatten(1).std(dim=1).view(-1, 1, 1, 1)


def _class_prototypes(rng: np.random.Generator, num_classes: int,
                      size: int) -> tuple[torch.Tensor, np.ndarray]:
    """Prototypes built on a shared basis, so classes have real geometry.

    Classes with the same group index lean on the same dominant basis
    pattern and differ in their secondary mixture; they are genuinely
    similar, which gives both soft-label structure and inter-class
    relations worth transferring.
    """
    n_basis = max(3, num_classes // 3)
    basis = _smooth_patterns(rng, n_basis, size)
    groups = np.arange(num_classes) % n_basis
    protos = []
    for cls in range(num_classes):
        mix = rng.standard_normal(n_basis)
        mix /= np.linalg.norm(mix)
        proto = basis[groups[cls]].clone()
        for b in range(n_basis):
            proto = proto + 0.6 * float(mix[b]) * basis[b]
        protos.append(proto)
    stacked = torch.stack(protos)
    stacked = stacked / stacked.flatten(1).std(dim=1).view(-1, 1, 1, 1)
    return stacked, groups


def make_synthetic(handle: DatasetHandle) -> tuple[ArrayDataset, ArrayDataset]:
    """Deterministic synthetic image classification set.

    Each sample mixes its (randomly shifted, amplitude-jittered) class
    prototype with a second class prototype of random strength, a smooth
    per-sample clutter pattern, and iid pixel noise.  The class mixing
    gives samples genuine soft class structure; the clutter shares the
    prototypes' frequency band, so it cannot be filtered out trivially.
    """
    rng = np.random.default_rng(handle.seed)
    size, k = handle.image_size, handle.num_classes
    protos, groups = _class_prototypes(rng, k, size)
    per_class = handle.train_per_class + handle.test_per_class
    max_shift = max(1, size // 3)
    images, labels = [], []
    for cls in range(k):
        siblings = [c for c in range(k) if groups[c] == groups[cls] and c != cls]
        for _ in range(per_class):
            img = protos[cls].clone()
            # distractors prefer sibling classes: confusions carry structure
            if siblings and rng.uniform() < 0.7:
                distractor = int(rng.choice(siblings))
            else:
                distractor = int(rng.integers(k))
            img = img + 0.9 * float(rng.uniform()) * protos[distractor]
            dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
            img = torch.roll(img, shifts=(int(dx), int(dy)), dims=(1, 2))
            img = img * float(rng.uniform(0.7, 1.3))
            clutter = _smooth_patterns(rng, 1, size)[0]
            img = img + 0.7 * clutter
            img = img + handle.noise * torch.from_numpy(
                rng.standard_normal(img.shape)).float()
            images.append(img)
            labels.append(cls)
    images = torch.stack(images)
    labels = torch.tensor(labels)
    # interleave classes before the split so both splits stay balanced
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train_total = handle.train_per_class * k
    train_idx, test_idx = _stratified_head_split(labels.numpy(), n_train_total)
    ids = np.arange(len(labels))
    train = ArrayDataset(ids[train_idx], images[train_idx], labels[train_idx])
    test = ArrayDataset(ids[test_idx], images[test_idx], labels[test_idx])
    return train, test


def _stratified_head_split(labels: np.ndarray, n_train: int):
    per_class = n_train // len(np.unique(labels))
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        cls_idx = np.nonzero(labels == cls)[0]
        train_idx.append(cls_idx[:per_class])
        test_idx.append(cls_idx[per_class:])
    return np.concatenate(train_idx), np.concatenate(test_idx)


def stratified_subset_indices(labels: np.ndarray, fraction: float,
                              seed: int) -> np.ndarray:
    """Class-stratified sample of ``fraction`` of the indices.

    Per-class counts stay within one sample of the proportional count:
    floors first, then the largest fractional remainders win the leftover
    slots (ties broken by class id).
    """
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    targets = {c: fraction * np.sum(labels == c) for c in classes}
    counts = {c: int(np.floor(t)) for c, t in targets.items()}
    leftover = int(round(sum(targets.values()))) - sum(counts.values())
    by_remainder = sorted(classes, key=lambda c: (-(targets[c] - counts[c]), c))
    for c in by_remainder[:leftover]:
        counts[c] += 1
    chosen = []
    for c in classes:
        cls_idx = np.nonzero(labels == c)[0]
        chosen.append(rng.choice(cls_idx, size=counts[c], replace=False))
    return np.sort(np.concatenate(chosen))


def load_dataset(handle: DatasetHandle) -> tuple[ArrayDataset, ArrayDataset]:
    """Materialize the train/test pair and apply the stratified subset."""
    if handle.name == "cifar10":
        train, test = load_cifar10(handle.root)
    elif handle.name == "synthetic":
        train, test = make_synthetic(handle)
    else:
        raise UsageError(f"unknown dataset {handle.name!r}")
    if handle.subset_fraction < 1.0:
        idx = stratified_subset_indices(
            train.labels.numpy(), handle.subset_fraction, handle.seed
        )
        train = train.subset(idx)
    return train, test


def augment_batch(images: torch.Tensor, rng: np.random.Generator,
                  pad: int | None = None) -> torch.Tensor:
    """Random crop (after reflection padding) and horizontal flip."""
    n, _, h, w = images.shape
    pad = max(2, h // 8) if pad is None else pad
    padded = F.pad(images, (pad, pad, pad, pad), mode="reflect")
    out = torch.empty_like(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.uniform(size=n) < 0.5
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = torch.flip(crop, dims=(2,)) if flips[i] else crop
    return out


class Loader:
    """Seeded mini-batch iterator yielding (ids, inputs, labels).

    Shuffling and augmentation draw from a generator reseeded per epoch
    from (seed, epoch), so runs replay exactly.
    """

    def __init__(self, dataset: ArrayDataset, batch_size: int, shuffle: bool,
                 seed: int = 0, augment: bool = False, drop_last: bool = False):
        if len(dataset) == 0:
            raise UsageError("empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.augment = augment
        self.drop_last = drop_last
        self.epoch = 0

    def __len__(self) -> int:
        n = len(self.dataset)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)

    def __iter__(self):
        rng = np.random.default_rng((self.seed, self.epoch))
        order = rng.permutation(len(self.dataset)) if self.shuffle \
            else np.arange(len(self.dataset))
        self.epoch += 1
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            if self.drop_last and len(idx) < self.batch_size:
                return
            inputs = self.dataset.images[idx]
            if self.augment:
                inputs = augment_batch(inputs, rng)
            yield self.dataset.ids[idx], inputs, self.dataset.labels[idx]
