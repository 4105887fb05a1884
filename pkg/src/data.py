import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import cv2
import numpy as np
import torch
from torch import Tensor

from .errors import (
    ConfigError,
    ConsistencyError,
    EmptyDatasetError,
    FormatError,
    NonFiniteError,
)
from .utils import make_rng, read_json, sha256_arrays, write_json

logger = logging.getLogger(__name__)

DEFAULT_DATA_DIR = "data"

# IDX dtype codes -> (numpy big-endian dtype)
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_DTYPES.items()}

WAFER_PATTERNS = ["center", "edge_ring", "scratch", "random", "donut", "edge_loc", "loc"]
BEAT_MORPHOLOGIES = ["normal", "supraventricular", "ventricular", "fusion", "unknown"]

SAMPLES_FILE = "samples.idx"
LABELS_FILE = "labels.idx"
SIGNALS_FILE = "signals.csv"
IDS_FILE = "ids.json"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class Dataset:
    """
    Samples of shape (n, C, H, W) or (n, D), optional integer labels, and one unique
    id per sample. `parents` maps augmented copies back to the sample they came from.
    """

    samples: Tensor
    labels: Optional[Tensor]
    ids: np.ndarray
    num_classes: int
    parents: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        samples = torch.as_tensor(self.samples, dtype=torch.float32)
        object.__setattr__(self, "samples", samples)
        ids = np.asarray(self.ids).astype(str)
        object.__setattr__(self, "ids", ids)
        n = samples.shape[0]
        if samples.dim() not in (2, 4):
            raise FormatError(f"samples must be (n, D) or (n, C, H, W), got {tuple(samples.shape)}", "samples")
        if len(ids) != n:
            raise ConsistencyError(f"{len(ids)} ids for {n} samples", "ids")
        if len(np.unique(ids)) != n:
            raise ConsistencyError("ids are not unique", "ids")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive", "num_classes")
        if self.labels is not None:
            labels = torch.as_tensor(self.labels, dtype=torch.long)
            object.__setattr__(self, "labels", labels)
            if labels.shape != (n,):
                raise ConsistencyError(f"labels shape {tuple(labels.shape)} does not match {n} samples", "labels")
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ConfigError(f"labels must lie in [0, {self.num_classes})", "labels")
        if self.parents is not None:
            parents = np.asarray(self.parents).astype(str)
            object.__setattr__(self, "parents", parents)
            if len(parents) != n:
                raise ConsistencyError("parents length does not match samples", "parents")
        if n and not torch.isfinite(samples).all():
            raise NonFiniteError("samples contain non-finite values", "samples")
        if n and self.is_image and (samples.min() < 0 or samples.max() > 1):
            raise FormatError("image samples must lie in [0, 1]", "samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def is_image(self) -> bool:
        return self.samples.dim() == 4

    @property
    def sample_shape(self):
        return tuple(self.samples.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def root_ids(self) -> np.ndarray:
        return self.ids.copy() if self.parents is None else self.parents.copy()

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        t = torch.as_tensor(idx, dtype=torch.long)
        return replace(
            self,
            samples=self.samples[t],
            labels=None if self.labels is None else self.labels[t],
            ids=self.ids[idx],
            parents=None if self.parents is None else self.parents[idx],
        )

    def index_of(self, ids: Sequence[str]) -> np.ndarray:
        position = {s: i for i, s in enumerate(self.ids)}
        missing = [s for s in ids if s not in position]
        if missing:
            raise ConsistencyError(f"{len(missing)} ids not found, e.g. {missing[0]!r}", "ids")
        return np.array([position[s] for s in ids], dtype=np.int64)

    def with_labels(self, labels) -> "Dataset":
        return replace(self, labels=labels)

    def without_labels(self) -> "Dataset":
        return replace(self, labels=None)

    def class_counts(self) -> List[int]:
        if self.labels is None:
            return []
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "n": len(self),
            "shape": list(self.sample_shape),
            "num_classes": self.num_classes,
            "counts": self.class_counts(),
        }

    @staticmethod
    def concat(datasets: Sequence["Dataset"], name: str = None) -> "Dataset":
        datasets = [d for d in datasets if d is not None]
        if not datasets:
            raise EmptyDatasetError("nothing to concatenate")
        first = datasets[0]
        if any(d.sample_shape != first.sample_shape for d in datasets):
            raise ConsistencyError("sample shapes differ", "samples")
        labelled = [d.labels is not None for d in datasets]
        if any(labelled) and not all(labelled):
            raise ConsistencyError("cannot concatenate labelled with unlabelled datasets", "labels")
        has_parents = any(d.parents is not None for d in datasets)
        return Dataset(
            samples=torch.cat([d.samples for d in datasets]),
            labels=torch.cat([d.labels for d in datasets]) if all(labelled) else None,
            ids=np.concatenate([d.ids for d in datasets]),
            num_classes=max(d.num_classes for d in datasets),
            parents=np.concatenate([d.root_ids() for d in datasets]) if has_parents else None,
            name=name or first.name,
        )


def dataset_hash(dataset: Dataset) -> str:
    labels = None if dataset.labels is None else dataset.labels.numpy()
    return sha256_arrays(dataset.samples.numpy(), labels, dataset.ids.astype("U"))


def make_ids(prefix: str, n: int) -> np.ndarray:
    return np.array([f"{prefix}-{i:06d}" for i in range(n)])


################################
# IDX

def _read_idx_array(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic bytes", "path")
    code, ndim = raw[2], raw[3]
    if code not in IDX_DTYPES:
        raise FormatError(f"{path}: unknown IDX dtype code 0x{code:02X}", "path")
    if ndim == 0 or len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header", "path")
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    dtype = IDX_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[4 + 4 * ndim :]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}", "path")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path: str, array) -> None:
    """Write a tensor or array in IDX format; dtype code follows the array dtype."""
    if isinstance(array, Tensor):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if array.dtype == np.int64:
        array = array.astype(np.uint8) if array.size and array.min() >= 0 and array.max() < 256 else array.astype(np.int32)
    if array.dtype not in IDX_CODES:
        raise FormatError(f"dtype {array.dtype} is not representable in IDX", "array")
    code = IDX_CODES[array.dtype]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.astype(IDX_DTYPES[code]).tobytes())


def _sibling_label_path(path: str) -> Optional[str]:
    folder, fname = os.path.split(path)
    if "images" in fname:
        candidate = os.path.join(folder, fname.replace("images", "labels"))
    elif fname == SAMPLES_FILE:
        candidate = os.path.join(folder, LABELS_FILE)
    else:
        stem, ext = os.path.splitext(fname)
        candidate = os.path.join(folder, f"{stem}-labels{ext}")
    return candidate if os.path.isfile(candidate) else None


def load_idx(path: str, label_path: Optional[str] = None, num_classes: Optional[int] = None) -> Dataset:
    """
    Load an IDX image (or signal) tensor. Unsigned-byte payloads are scaled to [0, 1].
    `label_path=None` looks for a sibling label file; an empty string means unlabeled.
    """
    if not os.path.isfile(path):
        raise FormatError(f"{path}: no such file", "path")
    array = _read_idx_array(path)
    scaled = array.dtype == np.uint8
    samples = array.astype(np.float32) / 255.0 if scaled else array.astype(np.float32)
    if samples.ndim == 3:
        samples = samples[:, None, :, :]
    if samples.ndim not in (2, 4):
        raise FormatError(f"{path}: expected 2, 3 or 4 dims, got {array.ndim}", "path")

    if label_path is None:
        label_path = _sibling_label_path(path)
    labels = None
    if label_path:
        label_array = _read_idx_array(label_path)
        if label_array.ndim != 1 or label_array.shape[0] != samples.shape[0]:
            raise ConsistencyError(
                f"{label_path}: {label_array.shape} labels for {samples.shape[0]} samples", "label_path"
            )
        labels = torch.as_tensor(label_array.astype(np.int64))

    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels is not None and len(labels) else 1
    stem = os.path.splitext(os.path.basename(path))[0]
    ids_file = os.path.join(os.path.dirname(path), IDS_FILE)
    ids = np.array(read_json(ids_file)) if os.path.isfile(ids_file) else make_ids(stem, samples.shape[0])
    return Dataset(torch.from_numpy(samples), labels, ids, num_classes, name=stem)


################################
# CSV signals

def load_signal_csv(path: str, signal_len: int, num_classes: Optional[int] = None) -> Dataset:
    """
    Rows of `signal_len` floats followed by one integer label column, no header
    (the layout of the Kaggle MIT-BIH heartbeat CSVs).
    """
    if signal_len < 1:
        raise ConfigError("signal_len must be positive", "signal_len")
    signals, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != signal_len + 1:
                raise FormatError(f"{path}:{lineno}: expected {signal_len + 1} columns, got {len(row)}", "path")
            try:
                values = [float(c) for c in row[:-1]]
                label = float(row[-1])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}", "path") from e
            if not math.isfinite(label) or not label.is_integer() or label < 0:
                raise FormatError(f"{path}:{lineno}: label {row[-1]!r} is not a non-negative integer", "path")
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteError(f"{path}:{lineno}: non-finite signal value", "path")
            signals.append(values)
            labels.append(int(label))
    if not signals:
        raise EmptyDatasetError(f"{path}: no rows", "path")
    labels = torch.tensor(labels, dtype=torch.long)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    stem = os.path.splitext(os.path.basename(path))[0]
    return Dataset(torch.tensor(signals, dtype=torch.float32), labels, make_ids(stem, len(signals)), num_classes, name=stem)


def write_signal_csv(path: str, dataset: Dataset) -> None:
    if dataset.is_image or dataset.labels is None:
        raise ConfigError("signal CSV needs a labelled (n, D) dataset", "dataset")
    table = np.concatenate(
        [dataset.samples.numpy().astype(np.float64), dataset.labels.numpy()[:, None].astype(np.float64)], axis=1
    )
    fmt = ["%.9g"] * dataset.samples.shape[1] + ["%d"]
    np.savetxt(path, table, delimiter=",", fmt=fmt)


################################
# synthetic generators

def _check_generator_args(n_per_class, size, seed):
    if n_per_class < 1:
        raise ConfigError("n_per_class must be positive", "n_per_class")
    if size < 1:
        raise ConfigError("size must be positive", "size")


def _draw_crack(img: np.ndarray, x_lo: int, x_hi: int, rng, intensity: int, thickness: int) -> None:
    """A top-to-bottom polyline with horizontal jitter confined to columns [x_lo, x_hi]."""
    size = img.shape[0]
    n_points = max(3, size // 4)
    ys = np.linspace(0, size - 1, n_points)
    x = rng.uniform(x_lo, x_hi)
    points = []
    for y in ys:
        x = float(np.clip(x + rng.normal(0, max(1.0, (x_hi - x_lo) / 4)), x_lo, x_hi))
        points.append((int(round(x)), int(round(y))))
    cv2.polylines(img, [np.array(points, dtype=np.int32)], False, int(intensity), thickness)


def gen_crack_dataset(n_per_class: int, size: int, seed: int) -> Dataset:
    """
    Three classes of crack images: 0 = crack in the left half, 1 = right half,
    2 = both halves. A pixel-mean of a class-0 and a class-1 image looks like class 2.
    """
    _check_generator_args(n_per_class, size, seed)
    if size < 8:
        raise ConfigError("crack images need size >= 8", "size")
    rng = make_rng(seed)
    half = size // 2
    thickness = 1 if size < 16 else 2
    margin = thickness
    left = (margin, half - 1 - margin)
    right = (half + margin, size - 1 - margin)
    samples, labels = [], []
    for label in range(3):
        for _ in range(n_per_class):
            img = np.zeros((size, size), dtype=np.uint8)
            intensity = int(rng.uniform(0.3, 1.0) * 255)
            if label in (0, 2):
                _draw_crack(img, *left, rng, intensity, thickness)
            if label in (1, 2):
                _draw_crack(img, *right, rng, intensity, thickness)
            samples.append(img)
            labels.append(label)
    samples = torch.from_numpy(np.stack(samples)[:, None].astype(np.float32) / 255.0)
    return Dataset(samples, torch.tensor(labels), make_ids("crack", len(labels)), 3, name="crack")


def _wafer_pattern(pattern: str, size: int, rng, difficulty: float) -> np.ndarray:
    """One wafer map: 0 off-wafer, 0.5 good die, 1.0 failing die."""
    img = np.zeros((size, size), dtype=np.uint8)
    c = (size - 1) / 2.0
    radius = size / 2.0 - 1
    center = (int(round(c)), int(round(c)))
    cv2.circle(img, center, int(radius), 128, -1)
    wafer = img > 0

    jitter = difficulty * size / 6.0
    defect = np.zeros_like(img)
    scale = lambda v: max(1, int(round(v)))
    if pattern == "center":
        off = rng.normal(0, jitter, 2)
        cv2.circle(defect, (int(c + off[0]), int(c + off[1])), scale(radius / 4 * rng.uniform(0.8, 1.2)), 255, -1)
    elif pattern == "edge_ring":
        cv2.circle(defect, center, scale(radius - 1 - abs(rng.normal(0, jitter / 2))), 255, scale(size / 16))
    elif pattern == "scratch":
        a = rng.uniform(0, np.pi)
        length = radius * rng.uniform(0.8, 1.4)
        off = rng.normal(0, radius / 3, 2)
        p1 = (int(c + off[0] - length / 2 * np.cos(a)), int(c + off[1] - length / 2 * np.sin(a)))
        p2 = (int(c + off[0] + length / 2 * np.cos(a)), int(c + off[1] + length / 2 * np.sin(a)))
        cv2.line(defect, p1, p2, 255, 1)
    elif pattern == "random":
        k = int(size * size * rng.uniform(0.08, 0.15))
        ys, xs = rng.integers(0, size, k), rng.integers(0, size, k)
        defect[ys, xs] = 255
    elif pattern == "donut":
        cv2.circle(defect, center, scale(radius / 2 * rng.uniform(0.85, 1.15)), 255, scale(size / 10))
    elif pattern == "edge_loc":
        a = rng.uniform(0, 2 * np.pi)
        r = radius - 2
        cv2.circle(defect, (int(c + r * np.cos(a)), int(c + r * np.sin(a))), scale(size / 7), 255, -1)
    elif pattern == "loc":
        a = rng.uniform(0, 2 * np.pi)
        r = radius * rng.uniform(0.3, 0.55)
        cv2.circle(defect, (int(c + r * np.cos(a)), int(c + r * np.sin(a))), scale(size / 9), 255, -1)
    else:
        raise ConfigError(f"unknown wafer pattern {pattern!r}", "pattern")

    # drop part of the pattern and sprinkle random failing dies, both scaled by difficulty
    keep = rng.random(defect.shape) >= 0.5 * difficulty
    sprinkle = rng.random(defect.shape) < 0.25 * difficulty
    defect_mask = ((defect > 0) & keep) | sprinkle
    img[defect_mask & wafer] = 255
    return img


def gen_synthetic_classes(
    num_classes: int, n_per_class: int, size: int, difficulty: float, seed: int
) -> Dataset:
    """
    Wafer-map style defect patterns (center, edge ring, scratch, random, donut,
    edge-loc, loc), one per class; `difficulty` in (0, 1] controls pattern jitter,
    pattern dropout and random failing dies.
    """
    _check_generator_args(n_per_class, size, seed)
    if not 1 <= num_classes <= len(WAFER_PATTERNS):
        raise ConfigError(f"num_classes must be in [1, {len(WAFER_PATTERNS)}]", "num_classes")
    if not 0 < difficulty <= 1:
        raise ConfigError("difficulty must be in (0, 1]", "difficulty")
    if size < 8:
        raise ConfigError("wafer maps need size >= 8", "size")
    rng = make_rng(seed)
    samples, labels = [], []
    for label in range(num_classes):
        for _ in range(n_per_class):
            samples.append(_wafer_pattern(WAFER_PATTERNS[label], size, rng, difficulty))
            labels.append(label)
    samples = torch.from_numpy(np.stack(samples)[:, None].astype(np.float32) / 255.0)
    return Dataset(samples, torch.tensor(labels), make_ids("wafer", len(labels)), num_classes, name="wafer")


def _beat(morphology: str, t: np.ndarray, rng, difficulty: float) -> np.ndarray:
    g = lambda mu, sigma, amp: amp * np.exp(-0.5 * ((t - mu) / sigma) ** 2)
    shift = rng.normal(0, 0.01 + 0.03 * difficulty)
    if morphology == "normal":
        x = g(0.15 + shift, 0.025, 0.15) + g(0.30 + shift, 0.012, 1.0) - g(0.33 + shift, 0.01, 0.2) + g(0.55 + shift, 0.05, 0.3)
    elif morphology == "supraventricular":
        x = g(0.20 + shift, 0.012, 1.0) - g(0.23 + shift, 0.01, 0.2) + g(0.42 + shift, 0.05, 0.3)
    elif morphology == "ventricular":
        x = g(0.30 + shift, 0.045, 1.1) - g(0.42 + shift, 0.06, 0.5)
    elif morphology == "fusion":
        x = g(0.15 + shift, 0.025, 0.1) + g(0.30 + shift, 0.028, 1.0) - g(0.40 + shift, 0.05, 0.25)
    elif morphology == "unknown":
        x = g(0.25 + shift, 0.006, 1.0) + g(0.33 + shift, 0.06, 0.45) + g(0.65 + shift, 0.05, 0.2)
    else:
        raise ConfigError(f"unknown beat morphology {morphology!r}", "morphology")
    return x


def gen_signal_classes(
    num_classes: int, n_per_class: int, signal_len: int, difficulty: float, seed: int
) -> Dataset:
    """Heartbeat-like 1-D signals, min-max scaled to [0, 1] per beat."""
    _check_generator_args(n_per_class, signal_len, seed)
    if not 1 <= num_classes <= len(BEAT_MORPHOLOGIES):
        raise ConfigError(f"num_classes must be in [1, {len(BEAT_MORPHOLOGIES)}]", "num_classes")
    if not 0 < difficulty <= 1:
        raise ConfigError("difficulty must be in (0, 1]", "difficulty")
    rng = make_rng(seed)
    t = np.linspace(0, 1, signal_len)
    samples, labels = [], []
    for label in range(num_classes):
        for _ in range(n_per_class):
            x = _beat(BEAT_MORPHOLOGIES[label], t, rng, difficulty)
            x = x + rng.normal(0, 0.02 + 0.15 * difficulty, signal_len)
            x = (x - x.min()) / max(x.max() - x.min(), 1e-8)
            samples.append(x.astype(np.float32))
            labels.append(label)
    return Dataset(
        torch.from_numpy(np.stack(samples)), torch.tensor(labels), make_ids("beat", len(labels)), num_classes, name="beat"
    )


GENERATORS = {
    "crack": gen_crack_dataset,
    "wafer": gen_synthetic_classes,
    "signal": gen_signal_classes,
}


################################
# dataset directories

def save_dataset(dataset: Dataset, out_dir: str, generator: str = None, seed: int = None, params: Dict = None) -> Dict:
    """Write payload + ids + manifest; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    if dataset.is_image:
        write_idx(os.path.join(out_dir, SAMPLES_FILE), dataset.samples.numpy().astype(np.float32))
        if dataset.labels is not None:
            write_idx(os.path.join(out_dir, LABELS_FILE), dataset.labels.numpy())
    else:
        write_signal_csv(os.path.join(out_dir, SIGNALS_FILE), dataset)
    write_json(os.path.join(out_dir, IDS_FILE), dataset.ids.tolist())
    manifest = {
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "shape": [len(dataset)] + list(dataset.sample_shape),
        "seed": seed,
        "generator": generator,
        "params": params or {},
        "counts": dataset.class_counts(),
        "hash": dataset_hash(dataset),
    }
    write_json(os.path.join(out_dir, MANIFEST_FILE), manifest)
    return manifest


def load_dataset_dir(data_dir: str) -> Dataset:
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    manifest = read_json(manifest_path) if os.path.isfile(manifest_path) else {}
    num_classes = manifest.get("num_classes")
    if os.path.isfile(os.path.join(data_dir, SAMPLES_FILE)):
        dataset = load_idx(os.path.join(data_dir, SAMPLES_FILE), num_classes=num_classes)
    elif os.path.isfile(os.path.join(data_dir, SIGNALS_FILE)):
        shape = manifest.get("shape")
        if not shape:
            raise FormatError(f"{data_dir}: signal datasets need a manifest with the shape", "data_dir")
        dataset = load_signal_csv(os.path.join(data_dir, SIGNALS_FILE), shape[-1], num_classes=num_classes)
        ids_file = os.path.join(data_dir, IDS_FILE)
        if os.path.isfile(ids_file):
            dataset = replace(dataset, ids=np.array(read_json(ids_file)))
    else:
        raise FormatError(f"{data_dir}: no {SAMPLES_FILE} or {SIGNALS_FILE}", "data_dir")
    return replace(dataset, name=manifest.get("name", dataset.name))
