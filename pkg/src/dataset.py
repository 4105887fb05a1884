import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pytorch_lightning as pl
import torch
from sklearn.model_selection import train_test_split
from torch import Tensor
from torch.utils.data import DataLoader
from torch.utils.data import Dataset as TorchDataset

from .data import Dataset
from .errors import ConfigError, ConsistencyError, DegenerateTaskError, EmptyDatasetError
from .utils import make_rng, torch_generator

logger = logging.getLogger(__name__)

AUGMENTATION_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")
SIGNAL_OPS = ("hflip",)


def restrict_ops(ops, allowed, what: str) -> Tuple[str, ...]:
    """The requested ops that are in `allowed`, or all of `allowed` when none are."""
    ops, allowed = tuple(ops), tuple(allowed)
    kept = tuple(op for op in ops if op in allowed) or allowed
    if kept != ops:
        logger.info("%s: augmentation restricted to %s", what, list(kept))
    return kept


def ops_for_samples(ops, is_image: bool) -> Tuple[str, ...]:
    """The requested ops that apply to the samples; 1-D signals keep hflip (time reversal) only."""
    return tuple(ops) if is_image else restrict_ops(ops, SIGNAL_OPS, "1-D samples")


@dataclass(frozen=True)
class SplitSpec:
    n_labeled: int
    n_test: int
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.n_labeled < 1:
            raise ConfigError("n_labeled must be positive", "split.n_labeled")
        if self.n_test < 1:
            raise ConfigError("n_test must be positive", "split.n_test")


@dataclass(frozen=True)
class AugmentationSpec:
    ops: Tuple[str, ...] = ("hflip", "vflip", "rot90", "rot180", "rot270")
    k: int = 0
    include_original: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.k < 0:
            raise ConfigError("k must be non-negative", "augmentation.k")
        if self.k > 0 and not self.ops:
            raise ConfigError("ops must be non-empty when k > 0", "augmentation.ops")
        unknown = [op for op in self.ops if op not in AUGMENTATION_OPS]
        if unknown:
            raise ConfigError(f"unknown augmentation ops {unknown}", "augmentation.ops")


@dataclass(frozen=True)
class NoiseSpec:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError("noise rate must be in [0, 1]", "noise.rate")


class HiddenTruth:
    """
    Ground-truth labels of the unlabeled pool. Only evaluation code holds one of these;
    nothing that trains a model accepts it.
    """

    def __init__(self, ids: Sequence[str], labels: Sequence[int]):
        self._labels = {str(i): int(l) for i, l in zip(ids, labels)}

    def __len__(self):
        return len(self._labels)

    def __contains__(self, sample_id):
        return str(sample_id) in self._labels

    def labels_for(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self._labels[str(i)] for i in ids], dtype=np.int64)


@dataclass
class Split:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    hidden_truth: HiddenTruth

    def __iter__(self):
        return iter((self.labeled, self.unlabeled, self.test))


def _sk_seed(seed: int) -> int:
    return int(seed) % (2**32)


def make_split(dataset: Dataset, spec: SplitSpec) -> Split:
    """
    Partition a labelled dataset into labeled / unlabeled / test pools. The unlabeled
    pool loses its labels; they survive only inside the returned HiddenTruth.
    """
    if dataset.labels is None:
        raise ConfigError("make_split needs a fully labelled dataset", "dataset")
    n = len(dataset)
    if spec.n_labeled + spec.n_test >= n:
        raise ConfigError(f"n_labeled + n_test must be < {n}", "split")
    labels = dataset.labels.numpy()
    indices = np.arange(n)
    rng = make_rng(spec.seed)

    if spec.stratified:
        if spec.n_labeled % dataset.num_classes:
            raise ConfigError(
                f"stratified split needs n_labeled divisible by num_classes={dataset.num_classes}", "split.n_labeled"
            )
        rest, test_idx = train_test_split(
            indices, test_size=spec.n_test, stratify=labels, random_state=_sk_seed(spec.seed)
        )
        per_class = spec.n_labeled // dataset.num_classes
        labeled_idx = []
        for c in range(dataset.num_classes):
            candidates = rest[labels[rest] == c]
            if len(candidates) < per_class:
                raise ConfigError(f"class {c} has {len(candidates)} samples, {per_class} needed", "split.n_labeled")
            labeled_idx.append(rng.choice(candidates, size=per_class, replace=False))
        labeled_idx = np.sort(np.concatenate(labeled_idx))
    else:
        perm = rng.permutation(n)
        test_idx = perm[: spec.n_test]
        labeled_idx = np.sort(perm[spec.n_test : spec.n_test + spec.n_labeled])
    taken = np.zeros(n, dtype=bool)
    taken[labeled_idx] = True
    taken[test_idx] = True
    unlabeled_idx = indices[~taken]
    test_idx = np.sort(test_idx)

    unlabeled = dataset.take(unlabeled_idx)
    hidden = HiddenTruth(unlabeled.ids, unlabeled.labels.numpy())
    return Split(
        labeled=replace(dataset.take(labeled_idx), name=f"{dataset.name}-labeled"),
        unlabeled=replace(unlabeled.without_labels(), name=f"{dataset.name}-unlabeled"),
        test=replace(dataset.take(test_idx), name=f"{dataset.name}-test"),
        hidden_truth=hidden,
    )


def carve_validation(labeled: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Hold out `fraction` of a labelled pool, stratified when every class allows it."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("validation fraction must be in (0, 1)", "early_stop.validation_fraction")
    n = len(labeled)
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise ConfigError("validation split leaves no training data", "early_stop.validation_fraction")
    labels = labeled.labels.numpy()
    counts = np.bincount(labels, minlength=labeled.num_classes)
    present = counts[counts > 0]
    stratify = labels if present.min() >= 2 and n_val >= len(present) and n - n_val >= len(present) else None
    train_idx, val_idx = train_test_split(
        np.arange(n), test_size=n_val, stratify=stratify, random_state=_sk_seed(seed)
    )
    return labeled.take(np.sort(train_idx)), labeled.take(np.sort(val_idx))


def holdout_split(dataset: Dataset, n_test: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified (train, test) split of a labelled dataset."""
    if not 0 < n_test < len(dataset):
        raise ConfigError(f"n_test must be in (0, {len(dataset)})", "split.n_test")
    train_idx, test_idx = train_test_split(
        np.arange(len(dataset)), test_size=n_test, stratify=dataset.labels.numpy(), random_state=_sk_seed(seed)
    )
    return dataset.take(np.sort(train_idx)), dataset.take(np.sort(test_idx))


def subset(dataset: Dataset, fraction: float, seed: int, stratified: bool = True) -> Dataset:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must be in (0, 1]", "fraction")
    if fraction == 1.0:
        return dataset
    n_keep = max(1, int(round(len(dataset) * fraction)))
    stratify = dataset.labels.numpy() if stratified and dataset.labels is not None else None
    keep, _ = train_test_split(
        np.arange(len(dataset)), train_size=n_keep, stratify=stratify, random_state=_sk_seed(seed)
    )
    return dataset.take(np.sort(keep))


################################
# augmentation

def apply_op(samples: Tensor, op: str) -> Tensor:
    """Geometric op on a (n, C, H, W) or (n, D) batch; 1-D data only supports hflip."""
    if samples.dim() == 2:
        if op != "hflip":
            raise ConfigError(f"{op} is not defined on 1-D signals", "augmentation.ops")
        return torch.flip(samples, dims=(-1,))
    if op == "hflip":
        return torch.flip(samples, dims=(-1,))
    if op == "vflip":
        return torch.flip(samples, dims=(-2,))
    if op == "rot90":
        return torch.rot90(samples, 1, dims=(-2, -1))
    if op == "rot180":
        return torch.rot90(samples, 2, dims=(-2, -1))
    if op == "rot270":
        return torch.rot90(samples, 3, dims=(-2, -1))
    raise ConfigError(f"unknown augmentation op {op!r}", "augmentation.ops")


def augment(dataset: Dataset, spec: AugmentationSpec) -> Dataset:
    """
    k augmented copies of every sample (plus the originals when include_original),
    each copy made by one op drawn uniformly from spec.ops. Copies keep their
    parent's label and record the parent id.
    """
    if not dataset.is_image:
        bad = [op for op in spec.ops if op != "hflip"]
        if bad and spec.k > 0:
            raise ConfigError(f"{bad} are not defined on 1-D signals", "augmentation.ops")
    elif spec.k > 0 and dataset.samples.shape[-1] != dataset.samples.shape[-2]:
        if any(op in ("rot90", "rot270") for op in spec.ops):
            raise ConfigError("quarter-turn rotations need square images", "augmentation.ops")

    rng = make_rng(spec.seed)
    parts = [dataset] if spec.include_original else []
    roots = dataset.root_ids()
    for j in range(1, spec.k + 1):
        choice = rng.integers(0, len(spec.ops), len(dataset))
        samples = dataset.samples.clone()
        for o, op in enumerate(spec.ops):
            mask = torch.as_tensor(choice == o)
            if mask.any():
                samples[mask] = apply_op(dataset.samples[mask], op)
        parts.append(
            Dataset(
                samples=samples,
                labels=dataset.labels,
                ids=np.array([f"{i}~aug{j}" for i in dataset.ids]),
                num_classes=dataset.num_classes,
                parents=roots,
                name=dataset.name,
            )
        )
    if not parts:
        raise EmptyDatasetError("augmentation with k=0 and include_original=False yields nothing", "augmentation")
    out = Dataset.concat(parts, name=dataset.name)
    if out.parents is None:
        out = replace(out, parents=out.ids.copy())
    return out


################################
# label noise

def inject_label_noise(labels, num_classes: int, spec: NoiseSpec):
    """
    Replace each label, with probability spec.rate, by a uniform draw over the other
    num_classes - 1 classes. Returns the same container type it was given.
    """
    if num_classes < 2:
        raise ConfigError("label noise needs at least 2 classes", "num_classes")
    is_tensor = isinstance(labels, Tensor)
    y = labels.cpu().numpy() if is_tensor else np.asarray(labels)
    y = y.astype(np.int64)
    rng = make_rng(spec.seed)
    flip = rng.random(len(y)) < spec.rate
    offsets = rng.integers(1, num_classes, len(y))
    noisy = np.where(flip, (y + offsets) % num_classes, y)
    return torch.as_tensor(noisy, dtype=torch.long) if is_tensor else noisy


################################
# lightning data module

class ArrayDataset4Loader(TorchDataset):
    def __init__(self, samples: Tensor, targets: Tensor = None):
        self.samples = samples
        self.targets = targets

    def __getitem__(self, index):
        item = {"x": self.samples[index]}
        if self.targets is not None:
            item["y"] = self.targets[index]
        return item

    def __len__(self):
        return len(self.samples)


def calculate_batchsize(ds_size: int, batchsize_hint: int = -1) -> int:
    """-1 -> entire dataset, N >= 1 -> min(N, dataset size)"""
    if batchsize_hint == -1 or batchsize_hint >= ds_size:
        return max(ds_size, 1)
    if batchsize_hint < 1:
        raise ConfigError("batch_size must be -1 or positive", "training.batch_size")
    return int(batchsize_hint)


class DataModule(pl.LightningDataModule):
    """
    Wraps samples and targets (hard labels, soft labels, or none for
    reconstruction models) with seeded shuffling.
    """

    def __init__(self, samples: Tensor, targets: Optional[Tensor], batch_size: int, seed: int):
        super(DataModule, self).__init__()
        if len(samples) == 0:
            raise EmptyDatasetError("cannot train on an empty dataset", "data")
        self.train_dataset = ArrayDataset4Loader(samples, targets)
        self.batch_size = batch_size
        self.seed = seed
        self.train_batchsize = calculate_batchsize(len(self.train_dataset), batch_size)

    def train_dataloader(self) -> DataLoader:
        iterator = DataLoader(
            self.train_dataset,
            batch_size=self.train_batchsize,
            shuffle=True,
            drop_last=False,
            generator=torch_generator(self.seed),
        )
        self.batches_per_epoch_train = len(iterator)
        return iterator
