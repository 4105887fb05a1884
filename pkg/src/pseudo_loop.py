"""
The pseudo-labeling engine: pool bookkeeping, per-class confidence selection, one
iteration of (classifier, representation, fused head, select), and the outer loop
with validation-based early stopping.
"""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import wandb
from pytorch_lightning.loggers import CSVLogger
from tqdm import tqdm

from .data import Dataset, dataset_hash
from .dataset import AUGMENTATION_OPS, AugmentationSpec, HiddenTruth, Split, augment, carve_validation
from .errors import ConfigError, ConsistencyError, EmptyDatasetError
from .mixup import MixupSpec, vae_mixup_augment
from .modeling import (
    CONFIDENCE_METRICS,
    TrainableClassifier,
    TrainableRepresentation,
    TrainingConfig,
    concat_embeddings,
    embed,
    predict_proba,
    save_checkpoint,
    score_confidence,
    train_classifier,
    train_head,
    train_representation,
)
from .utils import state_fingerprint, to_jsonable, write_json, write_jsonl, read_jsonl

logger = logging.getLogger(__name__)

REPRESENTATIONS = ("autoencoder", "vae", "none")
SCORING = ("fused", "classifier")
HISTORY_FILE = "history.jsonl"
MANIFEST_FILE = "run_manifest.json"


def _floor(x: float) -> int:
    # alpha * n can land a hair under an integer (0.29 * 100)
    return int(math.floor(x + 1e-9))


@dataclass(frozen=True)
class EarlyStopSpec:
    enabled: bool = True
    patience: int = 2
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be positive", "early_stop.patience")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in (0, 1)", "early_stop.validation_fraction")


@dataclass(frozen=True)
class LoopConfig:
    alpha: float
    n_per_class: int
    k: int = 5
    max_iterations: int = 10
    confidence_metric: str = "max_prob"
    early_stop: EarlyStopSpec = field(default_factory=EarlyStopSpec)
    classifier: TrainingConfig = field(default_factory=TrainingConfig)
    representation: TrainingConfig = field(default_factory=TrainingConfig)
    head: TrainingConfig = field(default_factory=TrainingConfig)
    mixup: MixupSpec = field(default_factory=MixupSpec)
    use_representation: str = "autoencoder"
    latent_dim: int = 32
    embedding_layer: str = "flatten"
    augmentation_ops: Tuple[str, ...] = AUGMENTATION_OPS
    reaugment_pseudo: bool = False
    scoring: str = "fused"
    vae_augment: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "augmentation_ops", tuple(self.augmentation_ops))
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", "alpha")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be positive", "n_per_class")
        if self.q < 1:
            raise ConfigError(
                f"floor(alpha * n_per_class) = floor({self.alpha} * {self.n_per_class}) selects nothing", "alpha"
            )
        if self.k < 0:
            raise ConfigError("k must be non-negative", "k")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be non-negative", "max_iterations")
        if self.confidence_metric not in CONFIDENCE_METRICS:
            raise ConfigError(f"confidence_metric must be one of {CONFIDENCE_METRICS}", "confidence_metric")
        if self.use_representation not in REPRESENTATIONS:
            raise ConfigError(f"use_representation must be one of {REPRESENTATIONS}", "use_representation")
        if self.scoring not in SCORING:
            raise ConfigError(f"scoring must be one of {SCORING}", "scoring")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive", "latent_dim")
        if self.mixup.mode == "vae_latent" and self.use_representation != "vae":
            raise ConfigError("vae_latent mixup needs use_representation=vae", "mixup.mode")
        if self.vae_augment < 0:
            raise ConfigError("vae_augment must be non-negative", "vae_augment")
        if self.vae_augment and self.use_representation != "vae":
            raise ConfigError("vae_augment needs use_representation=vae", "vae_augment")
        # raises on unknown ops
        AugmentationSpec(ops=self.augmentation_ops, k=self.k)

    @property
    def q(self) -> int:
        return _floor(self.alpha * self.n_per_class)

    def classifier_config(self) -> TrainingConfig:
        return replace(self.classifier, mixup=self.mixup)

    def to_dict(self) -> Dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["early_stop"] = vars(self.early_stop).copy()
        for k in ("classifier", "representation", "head"):
            d[k] = getattr(self, k).to_dict()
        d["mixup"] = self.mixup.to_dict()
        d["augmentation_ops"] = list(self.augmentation_ops)
        return d


################################
# pools

@dataclass(frozen=True)
class Provenance:
    origin: str
    iteration_added: int
    confidence: Optional[float] = None


@dataclass
class PoolState:
    """
    Root samples only: the labelled pool (seed labels plus pseudo labels) and the
    unlabelled pool. Augmented copies are derived from it, never stored in it.
    """

    labeled: Dataset
    unlabeled: Dataset
    provenance: Dict[str, Provenance]
    hidden_truth: Optional[HiddenTruth] = None
    iteration: int = 0
    total_roots: int = -1

    def __post_init__(self):
        if self.total_roots < 0:
            self.total_roots = len(self.labeled) + len(self.unlabeled)

    @classmethod
    def initial(cls, labeled: Dataset, unlabeled: Dataset, hidden_truth: HiddenTruth = None) -> "PoolState":
        if labeled.labels is None:
            raise ConfigError("the seed pool needs labels", "labeled")
        provenance = {i: Provenance("seed", 0) for i in labeled.ids}
        state = cls(labeled, unlabeled.without_labels(), provenance, hidden_truth)
        state.check_invariants()
        return state

    def seed_pool(self) -> Dataset:
        return self.labeled.take(np.flatnonzero([self.provenance[i].origin == "seed" for i in self.labeled.ids]))

    def pseudo_pool(self) -> Dataset:
        return self.labeled.take(np.flatnonzero([self.provenance[i].origin == "pseudo" for i in self.labeled.ids]))

    @property
    def n_pseudo(self) -> int:
        return sum(p.origin == "pseudo" for p in self.provenance.values())

    def check_invariants(self) -> None:
        labeled, unlabeled = set(self.labeled.ids), set(self.unlabeled.ids)
        overlap = labeled & unlabeled
        if overlap:
            raise ConsistencyError(f"{len(overlap)} ids are in both pools, e.g. {sorted(overlap)[0]!r}", "pools")
        if len(self.labeled) + len(self.unlabeled) != self.total_roots:
            raise ConsistencyError(
                f"pools hold {len(self.labeled) + len(self.unlabeled)} samples, expected {self.total_roots}", "pools"
            )
        if set(self.provenance) != labeled:
            raise ConsistencyError("provenance does not cover exactly the labelled pool", "provenance")
        for sample_id, p in self.provenance.items():
            if p.origin == "pseudo" and (p.confidence is None or p.iteration_added < 1):
                raise ConsistencyError(f"pseudo sample {sample_id!r} lacks confidence or iteration", "provenance")

    def to_dict(self) -> Dict:
        return {
            "iteration": self.iteration,
            "labeled": len(self.labeled),
            "unlabeled": len(self.unlabeled),
            "pseudo": self.n_pseudo,
            "total_roots": self.total_roots,
        }


################################
# selection

@dataclass
class SelectionRecord:
    """Per predicted class: (id, pseudo label, confidence), highest confidence first."""

    iteration: int
    per_class: Dict[int, List[Tuple[str, int, float]]]
    requested: int
    shortfall: Dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.per_class.values())

    def ids(self) -> List[str]:
        return [i for c in sorted(self.per_class) for i, _, _ in self.per_class[c]]

    def entries(self) -> List[Tuple[str, int, float]]:
        return [e for c in sorted(self.per_class) for e in self.per_class[c]]

    @property
    def total_shortfall(self) -> int:
        return sum(self.shortfall.values())

    def to_dict(self) -> Dict:
        return {
            "iteration": self.iteration,
            "requested": self.requested,
            "per_class": {c: [list(e) for e in v] for c, v in self.per_class.items()},
            "shortfall": self.shortfall,
        }


def select_per_class(proba, ids, alpha: float, n_per_class: int, metric: str = "max_prob",
                     iteration: int = 0) -> SelectionRecord:
    """
    Assign each sample to its argmax class and keep the q = floor(alpha * n_per_class)
    most confident per class. Equal confidences go in ascending id order.
    """
    q = _floor(alpha * n_per_class)
    if q < 1:
        raise ConfigError(f"floor({alpha} * {n_per_class}) = {q} selects nothing", "alpha")
    ids = np.asarray(ids).astype(str)
    scores = score_confidence(proba, metric).numpy()
    if len(ids) != len(scores):
        raise ConsistencyError(f"{len(ids)} ids for {len(scores)} probability rows", "ids")
    if len(np.unique(ids)) != len(ids):
        raise ConsistencyError("ids are not unique", "ids")
    pred = torch.as_tensor(proba).argmax(dim=1).numpy() if len(ids) else np.zeros(0, dtype=np.int64)
    num_classes = torch.as_tensor(proba).shape[1]

    per_class, shortfall = {}, {}
    for c in range(num_classes):
        members = np.flatnonzero(pred == c)
        # lexsort: last key is primary
        order = members[np.lexsort((ids[members], -scores[members]))]
        chosen = order[:q]
        per_class[c] = [(str(ids[i]), c, float(scores[i])) for i in chosen]
        if len(members) < q:
            shortfall[c] = q - len(members)
    return SelectionRecord(iteration, per_class, q, shortfall)


def apply_selection(state: PoolState, selection: SelectionRecord) -> PoolState:
    """Move the selected samples, with their pseudo labels, to the labelled pool."""
    entries = selection.entries()
    if not entries:
        return replace(state, provenance=dict(state.provenance))
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise ConsistencyError("a sample is selected for more than one class", "selection")
    pool = set(state.unlabeled.ids)
    missing = [i for i in ids if i not in pool]
    if missing:
        raise ConsistencyError(f"{len(missing)} selected ids are not in the unlabelled pool, e.g. {missing[0]!r}",
                               "selection")
    idx = state.unlabeled.index_of(ids)
    moved = state.unlabeled.take(idx).with_labels(torch.tensor([e[1] for e in entries], dtype=torch.long))
    keep = np.setdiff1d(np.arange(len(state.unlabeled)), idx)
    provenance = dict(state.provenance)
    for sample_id, _, confidence in entries:
        provenance[sample_id] = Provenance("pseudo", selection.iteration, confidence)
    new_state = replace(
        state,
        labeled=Dataset.concat([state.labeled, moved], name=state.labeled.name),
        unlabeled=state.unlabeled.take(keep),
        provenance=provenance,
    )
    new_state.check_invariants()
    return new_state


################################
# one iteration

@dataclass
class IterationModels:
    m_l: TrainableClassifier
    m_u: Optional[TrainableRepresentation] = None
    m_w: Optional[TrainableClassifier] = None
    layer: str = "flatten"

    def fused_embedding(self, dataset: Dataset):
        return concat_embeddings(embed(self.m_l, dataset, self.layer), embed(self.m_u, dataset))

    def predict_proba(self, dataset: Dataset, scoring: str = "fused") -> torch.Tensor:
        if self.m_w is None or scoring == "classifier":
            return predict_proba(self.m_l, dataset)
        return predict_proba(self.m_w, self.fused_embedding(dataset))

    def accuracy(self, dataset: Optional[Dataset], scoring: str = "fused") -> Optional[float]:
        """Accuracy of the model that `scoring` selects with."""
        if dataset is None or len(dataset) == 0:
            return None
        pred = self.predict_proba(dataset, scoring).argmax(dim=1)
        return float((pred == dataset.labels).double().mean())


@dataclass
class IterationMetrics:
    iteration: int
    arm: str
    test_accuracy: Optional[float]
    val_accuracy: Optional[float]
    labeled_size: int
    unlabeled_size: int
    train_size: int
    selected: int = 0
    cumulative_added: int = 0
    shortfall: int = 0
    mean_confidence: Optional[float] = None
    precision: Optional[float] = None
    precision_per_class: Dict[int, float] = field(default_factory=dict)
    unlabeled_accuracy: Optional[float] = None
    m_u_fingerprint: Optional[str] = None

    @property
    def test_error(self) -> Optional[float]:
        return None if self.test_accuracy is None else 1.0 - self.test_accuracy

    def to_dict(self) -> Dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["test_error"] = self.test_error
        return to_jsonable(d)

    @classmethod
    def from_dict(cls, d: Dict) -> "IterationMetrics":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        d["precision_per_class"] = {int(c): v for c, v in d.get("precision_per_class", {}).items()}
        return cls(**d)


def training_set(state: PoolState, config: LoopConfig, seed_train: Dataset = None) -> Dataset:
    """Augmented seed pool plus the pseudo-labelled samples (augmented only with reaugment_pseudo)."""
    if seed_train is None:
        seed_train = augment(state.seed_pool(), AugmentationSpec(config.augmentation_ops, config.k, seed=config.seed))
    pseudo = state.pseudo_pool()
    if len(pseudo) == 0:
        return seed_train
    if config.reaugment_pseudo:
        pseudo = augment(pseudo, AugmentationSpec(config.augmentation_ops, config.k, seed=config.seed + state.iteration))
    return Dataset.concat([seed_train, pseudo], name="train")


def _precision(selection: SelectionRecord, hidden_truth: Optional[HiddenTruth]):
    if hidden_truth is None or len(selection) == 0:
        return None, {}
    per_class = {}
    hits = 0
    for c, entries in selection.per_class.items():
        if not entries:
            continue
        truth = hidden_truth.labels_for([e[0] for e in entries])
        per_class[c] = float((truth == c).mean())
        hits += int((truth == c).sum())
    return hits / len(selection), per_class


def run_iteration(
    state: PoolState,
    config: LoopConfig,
    m_u: TrainableRepresentation,
    seed_train: Dataset = None,
    val: Dataset = None,
    test: Dataset = None,
    m_l: TrainableClassifier = None,
) -> Tuple[PoolState, IterationMetrics, IterationModels]:
    """
    Train M_l on the current pool, fuse its embedding with M_u's, train M_w on the
    fused features, score the unlabelled pool through that same path, then move the
    per-class top-q samples over. `m_l` reuses a classifier already trained on the
    current pool.
    """
    if len(state.unlabeled) == 0:
        raise EmptyDatasetError("the unlabelled pool is empty", "unlabeled")
    iteration = state.iteration + 1
    train = training_set(state, config, seed_train)
    if m_l is None:
        m_l = train_classifier(train, config.classifier_config(), vae=m_u if config.mixup.mode == "vae_latent" else None,
                               name=f"classifier-{iteration}")
    models = IterationModels(m_l, m_u, layer=config.embedding_layer)
    w = models.fused_embedding(train)
    models.m_w = train_head(w, train.labels, config.head, num_classes=train.num_classes, name=f"head-{iteration}")

    proba = models.predict_proba(state.unlabeled, config.scoring)
    selection = select_per_class(
        proba, state.unlabeled.ids, config.alpha, config.n_per_class, config.confidence_metric, iteration
    )
    precision, per_class = _precision(selection, state.hidden_truth)
    unlabeled_accuracy = None
    if state.hidden_truth is not None:
        truth = state.hidden_truth.labels_for(state.unlabeled.ids)
        unlabeled_accuracy = float((proba.argmax(dim=1).numpy() == truth).mean())

    new_state = apply_selection(state, selection)
    new_state.iteration = iteration
    confidences = [e[2] for e in selection.entries()]
    metrics = IterationMetrics(
        iteration=iteration,
        arm="framework",
        test_accuracy=models.accuracy(test, config.scoring),
        val_accuracy=models.accuracy(val, config.scoring),
        labeled_size=len(new_state.labeled),
        unlabeled_size=len(new_state.unlabeled),
        train_size=len(train),
        selected=len(selection),
        cumulative_added=new_state.n_pseudo,
        shortfall=selection.total_shortfall,
        mean_confidence=float(np.mean(confidences)) if confidences else None,
        precision=precision,
        precision_per_class=per_class,
        unlabeled_accuracy=unlabeled_accuracy,
        m_u_fingerprint=state_fingerprint(m_u.net),
    )
    logger.info(
        "iteration %d: selected %d (shortfall %d), labeled %d, unlabeled %d, test acc %s, val acc %s",
        iteration, metrics.selected, metrics.shortfall, metrics.labeled_size, metrics.unlabeled_size,
        metrics.test_accuracy, metrics.val_accuracy,
    )
    return new_state, metrics, models


################################
# the loop

@dataclass
class RunHistory:
    entries: List[IterationMetrics]
    config: Dict = field(default_factory=dict)
    best_iteration: int = 0
    stop_reason: str = ""
    best_models: Optional[IterationModels] = None
    final_state: Optional[PoolState] = None

    @property
    def baseline(self) -> IterationMetrics:
        return self.entries[0]

    @property
    def best(self) -> IterationMetrics:
        return next(e for e in self.entries if e.iteration == self.best_iteration)

    def to_jsonl(self, path: str) -> None:
        write_jsonl(path, [e.to_dict() for e in self.entries])

    @classmethod
    def from_jsonl(cls, path: str, best_iteration: int = None) -> "RunHistory":
        entries = [IterationMetrics.from_dict(r) for r in read_jsonl(path)]
        if best_iteration is None:
            best_iteration = entries[-1].iteration if entries else 0
        return cls(entries, best_iteration=best_iteration)

    def to_dict(self) -> Dict:
        return {
            "best_iteration": self.best_iteration,
            "stop_reason": self.stop_reason,
            "baseline_test_accuracy": self.baseline.test_accuracy,
            "best_test_accuracy": self.best.test_accuracy,
            "iterations": len(self.entries) - 1,
        }


def _log_entry(metrics: IterationMetrics, csv_logger, use_wandb: bool) -> None:
    flat = {k: v for k, v in metrics.to_dict().items() if isinstance(v, (int, float)) and v is not None}
    if csv_logger is not None:
        csv_logger.log_metrics(flat, step=metrics.iteration)
    if use_wandb:
        wandb.log(flat)


def run_loop(split: Split, config: LoopConfig, out_dir: str = None, use_wandb: bool = False,
             progress: bool = False) -> RunHistory:
    """
    Augment the seed pool, train M_u once on the unlabelled pool, record the supervised
    baseline, then iterate until the unlabelled pool is exhausted, max_iterations is
    reached, or validation accuracy has not improved for `patience` iterations.
    """
    labeled, unlabeled = split.labeled, split.unlabeled
    if labeled.labels is None:
        raise ConfigError("the seed pool needs labels", "labeled")
    val = None
    if config.early_stop.enabled:
        labeled, val = carve_validation(labeled, config.early_stop.validation_fraction, config.seed)
    seed_train = augment(labeled, AugmentationSpec(config.augmentation_ops, config.k, seed=config.seed))

    m_u = train_representation(config.use_representation, unlabeled, config.latent_dim, config.representation)
    fingerprint = state_fingerprint(m_u.net)
    if config.vae_augment:
        extra = vae_mixup_augment(m_u, labeled, config.vae_augment, MixupSpec("vae_latent", seed=config.seed))
        seed_train = Dataset.concat([seed_train, extra], name=seed_train.name)

    state = PoolState.initial(labeled, unlabeled, split.hidden_truth)
    csv_logger = CSVLogger(out_dir, name="loop", version=0) if out_dir else None

    m_l = train_classifier(seed_train, config.classifier_config(), vae=m_u if config.mixup.mode == "vae_latent" else None,
                           name="classifier-0")
    best_models = IterationModels(m_l, m_u, layer=config.embedding_layer)
    baseline = IterationMetrics(
        iteration=0,
        arm="supervised",
        test_accuracy=best_models.accuracy(split.test),
        val_accuracy=best_models.accuracy(val),
        labeled_size=len(state.labeled),
        unlabeled_size=len(state.unlabeled),
        train_size=len(seed_train),
        m_u_fingerprint=fingerprint,
    )
    entries = [baseline]
    _log_entry(baseline, csv_logger, use_wandb)
    logger.info("baseline: test acc %s, val acc %s", baseline.test_accuracy, baseline.val_accuracy)

    best_iteration, best_val, waited = 0, baseline.val_accuracy, 0
    stop_reason = "max_iterations"
    reuse = m_l
    for _ in tqdm(range(config.max_iterations), desc="pseudo-labeling", disable=not progress):
        if len(state.unlabeled) == 0:
            stop_reason = "exhausted"
            break
        state, metrics, models = run_iteration(state, config, m_u, seed_train, val, split.test, m_l=reuse)
        reuse = None
        state.check_invariants()
        if metrics.m_u_fingerprint != fingerprint:
            raise ConsistencyError("the representation model changed during the run", "m_u")
        entries.append(metrics)
        _log_entry(metrics, csv_logger, use_wandb)

        if not config.early_stop.enabled:
            best_iteration, best_models = metrics.iteration, models
            continue
        if metrics.val_accuracy > best_val:
            best_iteration, best_val, best_models, waited = metrics.iteration, metrics.val_accuracy, models, 0
        else:
            waited += 1
            if waited >= config.early_stop.patience:
                stop_reason = "patience"
                break
    else:
        if len(state.unlabeled) == 0 and config.max_iterations:
            stop_reason = "exhausted"

    history = RunHistory(entries, config.to_dict(), best_iteration, stop_reason, best_models, state)
    logger.info("stopped (%s) after %d iterations; best iteration %d", stop_reason, len(entries) - 1, best_iteration)
    if out_dir:
        write_run(history, split, out_dir, csv_logger)
    return history


def write_run(history: RunHistory, split: Split, out_dir: str, csv_logger=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    history.to_jsonl(os.path.join(out_dir, HISTORY_FILE))
    if csv_logger is not None:
        csv_logger.save()
    models = history.best_models
    if models is not None:
        save_checkpoint(models.m_l, os.path.join(out_dir, "best", "m_l.pt"), {"iteration": history.best_iteration})
        if models.m_w is not None:
            save_checkpoint(models.m_w, os.path.join(out_dir, "best", "m_w.pt"), {"iteration": history.best_iteration})
            save_checkpoint(models.m_u, os.path.join(out_dir, "best", "m_u.pt"))
    config = history.config
    manifest = {
        "config": config,
        "seed": config.get("seed"),
        "datasets": {name: dataset_hash(d) for name, d in zip(("labeled", "unlabeled", "test"), split)},
        "interpretation": {
            "n_per_class": "initial labelled count / num_classes",
            "q": "floor(alpha * n_per_class)",
            "selection_source": config.get("scoring"),
            "tie_break": "ascending sample id",
            "pseudo_augmented": config.get("reaugment_pseudo"),
            "validation_from": "seed labels",
        },
        "summary": history.to_dict(),
    }
    write_json(os.path.join(out_dir, MANIFEST_FILE), manifest)
