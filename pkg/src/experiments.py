"""
The experiment suite: label-noise curves, confidence/accuracy buckets, alpha sweeps,
the self-supervision ablation, the Mixup-layer ablation, the supervised-vs-framework
benchmark, and the crack-mixing probe. Every experiment is a grid of
(seed, grid value) points whose rows are gathered into one long-format table.
"""
import csv
import logging
import multiprocessing
import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import stats
from sklearn.linear_model import LogisticRegression

from .data import GENERATORS, Dataset, dataset_hash, load_dataset_dir
from .dataset import (
    AugmentationSpec,
    NoiseSpec,
    Split,
    SplitSpec,
    augment,
    holdout_split,
    inject_label_noise,
    make_split,
    ops_for_samples,
    restrict_ops,
    subset,
)
from .errors import ConfigError, ConsistencyError
from .mixup import MixupSpec, mixup_pair, one_hot, vae_latent_mixup
from .modeling import TrainingConfig, accuracy, predict_proba, train_classifier, train_vae
from .pseudo_loop import LoopConfig, run_loop
from .utils import make_rng, read_json, write_json

logger = logging.getLogger(__name__)

COLUMNS = ["seed", "grid_value", "arm", "iteration", "metric", "value"]
RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.json"
PARTIAL_MARKER = "PARTIAL"

DEFAULT_SEEDS = [0, 1, 2, 3, 4]
DEFAULT_GRIDS = {
    "noise_curve": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
    "confidence_curve": [10],
    "alpha_sweep": [0.1, 0.25, 0.5, 1.0],
    "ssl_ablation": [0.1, 0.25, 0.5, 1.0],
    "mixup_layer_ablation": ["off", "input", "conv1", "conv2", "conv3", "flatten"],
    "benchmark": [0.25],
    "crack_probe": [0.5],
}
SIGNAL_MIXUP_GRID = ["off", "input", "fc1", "fc2", "flatten"]

# error rates (%) reported for the published wafer / ECG benchmarks; annotations only
REFERENCE_ERRORS = {
    "Supervised": {"wafer": 19.5, "ecg": 23.2},
    "Pseudo-Representation": {"wafer": 15.1, "ecg": 18.8},
}
REFERENCE_INITIAL_ACCURACY = {"wafer (315 labels)": 75.3}

GENERATOR_DEFAULTS = {
    "wafer": {"num_classes": 7, "n_per_class": 450, "size": 32, "difficulty": 0.3},
    "signal": {"num_classes": 5, "n_per_class": 400, "signal_len": 128, "difficulty": 0.3},
    "crack": {"n_per_class": 100, "size": 32},
}
DEFAULT_SPLIT = (315, 500)
# the default crack set has 3 x 100 images
GENERATOR_SPLITS = {"crack": (30, 90)}
# crack classes are told apart by which half holds a crack
GENERATOR_OPS = {"crack": ("vflip",)}


@dataclass(frozen=True)
class DatasetSpec:
    generator: Optional[str] = "wafer"
    params: Optional[Dict[str, Any]] = None
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.path is None and self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; expected one of {list(GENERATORS)}",
                              "dataset.generator")
        if self.params is None:
            object.__setattr__(self, "params", dict(GENERATOR_DEFAULTS.get(self.generator, {})))

    def build(self) -> Dataset:
        if self.path:
            return load_dataset_dir(self.path)
        try:
            return GENERATORS[self.generator](seed=self.seed, **self.params)
        except TypeError as e:
            raise ConfigError(f"bad parameters for {self.generator}: {e}", "dataset.params") from e

    def is_image(self) -> bool:
        """Generated sets are known by their generator; a directory is loaded and looked at."""
        if self.path:
            return load_dataset_dir(self.path).is_image
        return self.generator != "signal"

    def augmentation_ops(self, ops) -> Tuple[str, ...]:
        """The requested ops that keep labels on this data."""
        ops = ops_for_samples(ops, self.is_image())
        if self.path or self.generator not in GENERATOR_OPS:
            return ops
        return restrict_ops(ops, GENERATOR_OPS[self.generator], f"{self.generator} labels")

    @property
    def label(self) -> str:
        return os.path.basename(os.path.normpath(self.path)) if self.path else self.generator

    def default_split(self) -> Tuple[int, int]:
        return DEFAULT_SPLIT if self.path else GENERATOR_SPLITS.get(self.generator, DEFAULT_SPLIT)

    def to_dict(self):
        return {"generator": self.generator, "params": dict(self.params), "seed": self.seed, "path": self.path}


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    grid: Tuple = ()
    seeds: Tuple[int, ...] = tuple(DEFAULT_SEEDS)
    loop: LoopConfig = field(default_factory=lambda: LoopConfig(alpha=0.25, n_per_class=45))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    n_labeled: Optional[int] = None
    n_test: Optional[int] = None
    subset_fraction: float = 0.1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {list(EXPERIMENTS)}",
                              "experiment")
        is_image = self.dataset.is_image()
        grid = tuple(self.grid) if self.grid else tuple(DEFAULT_GRIDS[self.experiment])
        if not self.grid and self.experiment == "mixup_layer_ablation" and not is_image:
            grid = tuple(SIGNAL_MIXUP_GRID)
        ops = self.dataset.augmentation_ops(self.loop.augmentation_ops)
        if ops != self.loop.augmentation_ops:
            object.__setattr__(self, "loop", replace(self.loop, augmentation_ops=ops))
        n_labeled, n_test = self.dataset.default_split()
        if self.n_labeled is None:
            object.__setattr__(self, "n_labeled", n_labeled)
        if self.n_test is None:
            object.__setattr__(self, "n_test", n_test)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.grid:
            raise ConfigError("grid must be non-empty", "grid")
        if not self.seeds:
            raise ConfigError("at least one seed is needed", "seeds")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigError("subset_fraction must be in (0, 1]", "subset_fraction")

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "dataset": self.dataset.to_dict(),
            "grid": list(self.grid),
            "seeds": list(self.seeds),
            "loop": self.loop.to_dict(),
            "training": self.training.to_dict(),
            "n_labeled": self.n_labeled,
            "n_test": self.n_test,
            "subset_fraction": self.subset_fraction,
        }


@dataclass
class ExperimentResult:
    experiment: str
    rows: List[Dict]
    summary: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=_row_key)

    def validate(self) -> None:
        for i, row in enumerate(self.rows):
            missing = [c for c in COLUMNS if row.get(c) is None or row.get(c) == ""]
            if missing:
                raise ConsistencyError(f"row {i} is missing {missing}", "rows")
            if not np.isfinite(float(row["value"])):
                raise ConsistencyError(f"row {i} has a non-finite value", "rows")

    def select(self, metric: str, arm: str = None, grid_value=None, iteration=None) -> List[Dict]:
        return [
            r for r in self.rows
            if r["metric"] == metric
            and (arm is None or r["arm"] == arm)
            and (grid_value is None or r["grid_value"] == grid_value)
            and (iteration is None or r["iteration"] == iteration)
        ]

    def write(self, out_dir: str) -> None:
        self.validate()
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, RESULTS_FILE), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row[c] for c in COLUMNS})
        write_json(os.path.join(out_dir, SUMMARY_FILE), {"experiment": self.experiment, **self.summary})


def _row_key(row):
    return (row["seed"], str(row["grid_value"]), row["arm"], row["iteration"], row["metric"])


def row(seed, grid_value, arm, iteration, metric, value) -> Dict:
    return {"seed": int(seed), "grid_value": grid_value, "arm": arm, "iteration": int(iteration),
            "metric": metric, "value": float(value)}


def read_results(path: str) -> List[Dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({**r, "seed": int(r["seed"]), "iteration": int(r["iteration"]), "value": float(r["value"])})
        return out


################################
# grid execution

def _point_file(out_dir: str, key: str, suffix: str) -> str:
    return os.path.join(out_dir, "points", f"point-{re.sub(r'[^A-Za-z0-9_.=-]', '_', key)}.{suffix}")


def _call(args):
    fn, payload = args
    return fn(payload)


def run_grid(points: Sequence[Tuple[str, Any]], fn: Callable, out_dir: str = None, jobs: int = 1,
             resume: bool = False) -> List[Dict]:
    """
    Evaluate `fn(payload)` for every (key, payload) point; each call returns a list of rows.
    With an out_dir, finished points leave a `.done` marker and their rows on disk, and a
    PARTIAL marker stays until the whole grid is done; `resume` skips finished points.
    """
    if jobs < 1:
        raise ConfigError("jobs must be positive", "jobs")
    results: Dict[str, List[Dict]] = {}
    todo = []
    if out_dir:
        os.makedirs(os.path.join(out_dir, "points"), exist_ok=True)
        open(os.path.join(out_dir, PARTIAL_MARKER), "w").close()
    for key, payload in points:
        if out_dir and resume and os.path.isfile(_point_file(out_dir, key, "done")):
            results[key] = read_json(_point_file(out_dir, key, "json"))
            logger.info("resume: skipping finished point %s", key)
        else:
            todo.append((key, payload))

    def finish(key, rows):
        results[key] = rows
        if out_dir:
            write_json(_point_file(out_dir, key, "json"), rows)
            open(_point_file(out_dir, key, "done"), "w").close()

    if jobs == 1 or len(todo) <= 1:
        for key, payload in todo:
            finish(key, fn(payload))
    else:
        with multiprocessing.get_context("spawn").Pool(min(jobs, len(todo))) as pool:
            for (key, _), rows in zip(todo, pool.imap(_call, [(fn, p) for _, p in todo])):
                finish(key, rows)

    if out_dir:
        os.remove(os.path.join(out_dir, PARTIAL_MARKER))
    return [r for key, _ in points for r in results[key]]


def _points(spec: ExperimentSpec, make_payload: Callable) -> List[Tuple[str, Any]]:
    return [(f"{seed}-{value}", make_payload(seed, value)) for seed in spec.seeds for value in spec.grid]


def seeded_training(config: TrainingConfig, seed: int) -> TrainingConfig:
    return replace(config, seed=seed, mixup=replace(config.mixup, seed=seed))


def seeded_loop(config: LoopConfig, seed: int) -> LoopConfig:
    return replace(
        config,
        seed=seed,
        classifier=seeded_training(config.classifier, seed),
        representation=seeded_training(config.representation, seed),
        head=seeded_training(config.head, seed),
        mixup=replace(config.mixup, seed=seed),
    )


def _split(dataset: Dataset, spec: ExperimentSpec, seed: int) -> Split:
    return make_split(dataset, SplitSpec(spec.n_labeled, spec.n_test, seed=seed))


def _supervised_train(labeled: Dataset, config: TrainingConfig, loop: LoopConfig, seed: int):
    train = augment(labeled, AugmentationSpec(loop.augmentation_ops, loop.k, seed=seed))
    return train_classifier(train, seeded_training(config, seed))


def _mean_std(values) -> Dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()), "std": float(values.std(ddof=0)), "n": int(len(values))}


def _by(rows, *keys) -> Dict:
    out: Dict = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(r["value"])
    return out


def sign_test(wins: int, losses: int) -> Optional[float]:
    """Two-sided sign test p-value, ties dropped."""
    if wins + losses == 0:
        return None
    return float(stats.binomtest(wins, wins + losses, 0.5).pvalue)


################################
# noise curve

def _noise_point(payload) -> List[Dict]:
    dataset, spec, seed, rate = payload
    train, test = holdout_split(dataset, spec.n_test, seed)
    rows = []
    for arm, fraction in (("subset", spec.subset_fraction), ("full", 1.0)):
        part = subset(train, fraction, seed)
        noisy = part.with_labels(inject_label_noise(part.labels, part.num_classes, NoiseSpec(rate, seed=seed)))
        model = _supervised_train(noisy, spec.training, spec.loop, seed)
        rows.append(row(seed, rate, arm, 0, "test_accuracy", accuracy(model, test)))
    return rows


def noise_curve(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1, resume: bool = False) -> ExperimentResult:
    """Clean-test accuracy against label-noise rate, on a small subset and on all training data."""
    dataset = spec.dataset.build()
    rows = run_grid(_points(spec, lambda s, v: (dataset, spec, s, float(v))), _noise_point, out_dir, jobs, resume)
    curves = {arm: [] for arm in ("subset", "full")}
    summary = {"curves": {}}
    for (arm, rate), values in sorted(_by(rows, "arm", "grid_value").items()):
        summary["curves"].setdefault(arm, {})[str(rate)] = _mean_std(values)
        curves[arm].append(np.mean(values))
    rho = stats.spearmanr(curves["subset"], curves["full"]).correlation if len(spec.grid) > 2 else None
    summary["spearman_subset_vs_full"] = None if rho is None or np.isnan(rho) else float(rho)
    rates = sorted(float(v) for v in spec.grid)
    for arm in curves:
        lo = summary["curves"][arm][str(rates[0])]["mean"]
        hi = summary["curves"][arm][str(rates[-1])]["mean"]
        summary[f"{arm}_drop"] = lo - hi
    return ExperimentResult("noise_curve", rows, summary)


################################
# confidence curve

def confidence_buckets(confidence, correct, n_buckets: int = 10) -> List[Dict]:
    """
    Bucket b holds confidences in [b / n, (b + 1) / n) (the last bucket includes 1).
    Empty buckets are left out.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    bucket = np.minimum((confidence * n_buckets).astype(np.int64), n_buckets - 1)
    out = []
    for b in range(n_buckets):
        mask = bucket == b
        if not mask.any():
            continue
        out.append({
            "bucket": b,
            "lo": b / n_buckets,
            "hi": (b + 1) / n_buckets,
            "count": int(mask.sum()),
            "accuracy": float(correct[mask].mean()),
            "mean_confidence": float(confidence[mask].mean()),
        })
    return out


def _confidence_point(payload) -> List[Dict]:
    dataset, spec, seed, n_buckets = payload
    split = _split(dataset, spec, seed)
    model = _supervised_train(split.labeled, spec.training, spec.loop, seed)
    proba = predict_proba(model, split.test)
    conf, pred = proba.max(dim=1)
    correct = (pred == split.test.labels).numpy()
    rows = []
    for b in confidence_buckets(conf.numpy(), correct, int(n_buckets)):
        for metric in ("accuracy", "count", "mean_confidence"):
            rows.append(row(seed, b["bucket"], "supervised", 0, metric, b[metric]))
    return rows


def confidence_curve(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1, resume: bool = False) -> ExperimentResult:
    """Test accuracy per confidence bucket of a supervised model."""
    dataset = spec.dataset.build()
    points = [(f"{seed}", (dataset, spec, seed, spec.grid[0])) for seed in spec.seeds]
    rows = run_grid(points, _confidence_point, out_dir, jobs, resume)
    ordered = 0
    for seed in spec.seeds:
        acc = {r["grid_value"]: r["value"] for r in rows if r["seed"] == seed and r["metric"] == "accuracy"}
        if acc and acc[max(acc)] >= acc[min(acc)]:
            ordered += 1
    buckets = {str(b): _mean_std(v) for (b,), v in sorted(_by([r for r in rows if r["metric"] == "accuracy"],
                                                                 "grid_value").items())}
    return ExperimentResult("confidence_curve", rows, {"buckets": buckets, "top_ge_bottom_seeds": ordered,
                                                       "seeds": len(spec.seeds)})


################################
# loop experiments

def _history_rows(history, seed, grid_value, arm) -> List[Dict]:
    rows = []
    for e in history.entries:
        for metric in ("test_accuracy", "val_accuracy", "precision", "mean_confidence", "unlabeled_accuracy"):
            value = getattr(e, metric)
            if value is not None:
                rows.append(row(seed, grid_value, arm, e.iteration, metric, value))
        rows.append(row(seed, grid_value, arm, e.iteration, "cumulative_added", e.cumulative_added))
        rows.append(row(seed, grid_value, arm, e.iteration, "labeled_size", e.labeled_size))
    best = history.best
    if best.test_accuracy is not None:
        rows.append(row(seed, grid_value, arm, best.iteration, "best_test_accuracy", best.test_accuracy))
    return rows


def _loop_point(payload) -> List[Dict]:
    dataset, spec, seed, alpha, arms = payload
    split = _split(dataset, spec, seed)
    rows = []
    for arm, representation in arms:
        config = seeded_loop(replace(spec.loop, alpha=float(alpha)), seed)
        if representation is not None:
            config = replace(config, use_representation=representation)
        history = run_loop(split, config)
        rows += _history_rows(history, seed, alpha, arm)
    return rows


def _trajectory_summary(rows, arm) -> Dict:
    summary = {}
    for (alpha,), _ in sorted(_by([r for r in rows if r["arm"] == arm], "grid_value").items()):
        best, base, peak_late, final_below_peak = [], [], 0, 0
        seeds = sorted({r["seed"] for r in rows if r["grid_value"] == alpha and r["arm"] == arm})
        for seed in seeds:
            traj = {r["iteration"]: r["value"] for r in rows
                    if r["seed"] == seed and r["grid_value"] == alpha and r["arm"] == arm and r["metric"] == "test_accuracy"}
            b = [r["value"] for r in rows if r["seed"] == seed and r["grid_value"] == alpha and r["arm"] == arm
                 and r["metric"] == "best_test_accuracy"]
            best.append(b[0])
            base.append(traj[0])
            peak = max(traj, key=lambda i: (traj[i], -i))
            peak_late += peak >= 2
            final_below_peak += traj[max(traj)] < traj[peak]
        summary[str(alpha)] = {
            "best_test_accuracy": _mean_std(best),
            "baseline_test_accuracy": _mean_std(base),
            "best_ge_baseline_seeds": int(sum(x >= y for x, y in zip(best, base))),
            "peak_at_iteration_ge_2_seeds": int(peak_late),
            "final_below_peak_seeds": int(final_below_peak),
            "seeds": len(seeds),
        }
    return summary


def alpha_sweep(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1, resume: bool = False) -> ExperimentResult:
    """Iteration-by-iteration test accuracy of the loop for every alpha in the grid."""
    dataset = spec.dataset.build()
    arms = (("framework", None),)
    rows = run_grid(_points(spec, lambda s, v: (dataset, spec, s, v, arms)), _loop_point, out_dir, jobs, resume)
    return ExperimentResult("alpha_sweep", rows, {"alphas": _trajectory_summary(rows, "framework")})


def ssl_ablation(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1, resume: bool = False) -> ExperimentResult:
    """The loop with the representation tower against the same loop with a zero-width stub."""
    dataset = spec.dataset.build()
    tower = spec.loop.use_representation if spec.loop.use_representation != "none" else "autoencoder"
    arms = (("tower", tower), ("stub", "none"))
    rows = run_grid(_points(spec, lambda s, v: (dataset, spec, s, v, arms)), _loop_point, out_dir, jobs, resume)
    on, off = _trajectory_summary(rows, "tower"), _trajectory_summary(rows, "stub")
    deltas = {a: on[a]["best_test_accuracy"]["mean"] - off[a]["best_test_accuracy"]["mean"] for a in on}
    return ExperimentResult("ssl_ablation", rows, {"tower": on, "stub": off, "delta_best_test_accuracy": deltas})


################################
# mixup layers

def mixup_for_layer(layer: str, seed: int) -> MixupSpec:
    if layer == "off":
        return MixupSpec(seed=seed)
    if layer == "input":
        return MixupSpec("input", seed=seed)
    return MixupSpec("feature", layer=layer, seed=seed)


def _mixup_point(payload) -> List[Dict]:
    dataset, spec, seed, layer = payload
    split = _split(dataset, spec, seed)
    config = replace(spec.training, mixup=mixup_for_layer(layer, seed))
    train = augment(split.labeled, AugmentationSpec(spec.loop.augmentation_ops, spec.loop.k, seed=seed))
    model = train_classifier(train, replace(config, seed=seed))
    return [
        row(seed, layer, "supervised", 0, "test_accuracy", accuracy(model, split.test)),
        row(seed, layer, "supervised", 0, "train_accuracy", accuracy(model, train)),
    ]


def mixup_layer_ablation(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1,
                         resume: bool = False) -> ExperimentResult:
    """Supervised accuracy with Mixup off, on the inputs, or at each hidden layer."""
    dataset = spec.dataset.build()
    rows = run_grid(_points(spec, lambda s, v: (dataset, spec, s, v)), _mixup_point, out_dir, jobs, resume)
    table = {str(layer): _mean_std(v) for (layer,), v in
             sorted(_by([r for r in rows if r["metric"] == "test_accuracy"], "grid_value").items())}
    return ExperimentResult("mixup_layer_ablation", rows, {"test_accuracy": table})


################################
# benchmark

def reference_table() -> Dict[str, Dict[str, float]]:
    return {k: dict(v) for k, v in REFERENCE_ERRORS.items()}


def format_reference_table() -> str:
    lines = ["reference error rates (%), published wafer / ECG runs:"]
    for method, errors in REFERENCE_ERRORS.items():
        lines.append(f"  {method:<24} wafer {errors['wafer']:>5.1f}   ecg {errors['ecg']:>5.1f}")
    return "\n".join(lines)


def _benchmark_point(payload) -> List[Dict]:
    dataset, spec, seed, alpha = payload
    split = _split(dataset, spec, seed)
    history = run_loop(split, seeded_loop(replace(spec.loop, alpha=float(alpha)), seed))
    return [
        row(seed, alpha, "supervised", 0, "test_error", history.baseline.test_error),
        row(seed, alpha, "framework", history.best.iteration, "test_error", history.best.test_error),
    ]


def benchmark(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1, resume: bool = False) -> ExperimentResult:
    """Supervised baseline against pseudo-representation labeling, error rate mean and std over seeds."""
    dataset = spec.dataset.build()
    rows = run_grid(_points(spec, lambda s, v: (dataset, spec, s, v)), _benchmark_point, out_dir, jobs, resume)
    name = spec.dataset.label
    sup = {(r["seed"], r["grid_value"]): r["value"] for r in rows if r["arm"] == "supervised"}
    fw = {(r["seed"], r["grid_value"]): r["value"] for r in rows if r["arm"] == "framework"}
    wins = sum(fw[k] < sup[k] for k in sup)
    losses = sum(fw[k] > sup[k] for k in sup)
    summary = {
        "table": {
            "Supervised": {name: _mean_std(list(sup.values()))},
            "Pseudo-Representation": {name: _mean_std(list(fw.values()))},
        },
        "framework_wins": int(wins),
        "framework_losses": int(losses),
        "sign_test_p": sign_test(wins, losses),
        "reference_errors_percent": reference_table(),
        "reference_initial_accuracy_percent": dict(REFERENCE_INITIAL_ACCURACY),
    }
    logger.info("\n%s", format_reference_table())
    return ExperimentResult("benchmark", rows, summary)


################################
# crack mixing probe

def fit_probe(dataset: Dataset, seed: int = 0) -> LogisticRegression:
    """Linear probe on flattened pixels."""
    probe = LogisticRegression(max_iter=2000, random_state=seed)
    probe.fit(dataset.samples.flatten(1).numpy(), dataset.labels.numpy())
    return probe


def probe_votes(probe: LogisticRegression, samples: torch.Tensor, num_classes: int) -> np.ndarray:
    pred = probe.predict(samples.flatten(1).numpy())
    return np.bincount(pred, minlength=num_classes)


def cross_class_pairs(dataset: Dataset, class_a: int, class_b: int, n_pairs: int, seed: int):
    rng = make_rng(seed)
    labels = dataset.labels.numpy()
    a = rng.choice(np.flatnonzero(labels == class_a), n_pairs, replace=True)
    b = rng.choice(np.flatnonzero(labels == class_b), n_pairs, replace=True)
    return torch.as_tensor(a), torch.as_tensor(b)


def _crack_point(payload) -> List[Dict]:
    spec, seed, lam, n_pairs, latent_dim = payload
    dataset = replace(spec.dataset, seed=seed).build()
    probe = fit_probe(dataset, seed)
    a, b = cross_class_pairs(dataset, 0, 1, n_pairs, seed)
    x1, x2 = dataset.samples[a], dataset.samples[b]
    y1, y2 = one_hot(dataset.labels[a], 3), one_hot(dataset.labels[b], 3)
    pixel, _ = mixup_pair(x1, y1, x2, y2, float(lam))
    vae = train_vae(dataset, latent_dim, seeded_training(spec.training, seed))
    latent = vae_latent_mixup(vae, x1, x2, float(lam))
    rows = []
    for arm, mixes in (("pixel", pixel), ("vae_latent", latent)):
        votes = probe_votes(probe, mixes, 3)
        for c in range(3):
            rows.append(row(seed, lam, arm, 0, f"votes_class_{c}", votes[c]))
    return rows


def crack_probe(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1, resume: bool = False,
                n_pairs: int = 50, latent_dim: int = 16) -> ExperimentResult:
    """
    How a 3-class linear probe labels mixes of a left-crack and a right-crack image,
    mixed in pixel space and in VAE latent space.
    """
    if spec.dataset.generator != "crack":
        raise ConfigError("crack_probe needs the crack generator", "dataset.generator")
    points = _points(spec, lambda s, v: (spec, s, v, n_pairs, latent_dim))
    rows = run_grid(points, _crack_point, out_dir, jobs, resume)
    summary = {}
    for arm in ("pixel", "vae_latent"):
        votes = {c: float(np.sum([r["value"] for r in rows if r["arm"] == arm and r["metric"] == f"votes_class_{c}"]))
                 for c in range(3)}
        summary[arm] = {"votes": votes, "majority_class": int(max(votes, key=votes.get))}
    return ExperimentResult("crack_probe", rows, summary)


EXPERIMENTS = {
    "noise_curve": noise_curve,
    "confidence_curve": confidence_curve,
    "alpha_sweep": alpha_sweep,
    "ssl_ablation": ssl_ablation,
    "mixup_layer_ablation": mixup_layer_ablation,
    "benchmark": benchmark,
    "crack_probe": crack_probe,
}


def run_experiment(spec: ExperimentSpec, out_dir: str = None, jobs: int = 1, resume: bool = False) -> ExperimentResult:
    logger.info("experiment %s: grid %s, seeds %s", spec.experiment, list(spec.grid), list(spec.seeds))
    result = EXPERIMENTS[spec.experiment](spec, out_dir=out_dir, jobs=jobs, resume=resume)
    if out_dir:
        result.write(out_dir)
    return result
