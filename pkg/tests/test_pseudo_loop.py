import os

import numpy as np
import pytest
import torch

from src.data import Dataset, gen_synthetic_classes, make_ids
from src.dataset import AugmentationSpec, SplitSpec, augment, make_split
from src.errors import ConfigError, ConsistencyError, EmptyDatasetError
from src.mixup import MixupSpec
from src.modeling import TrainingConfig, accuracy, score_confidence, train_classifier
from src.pseudo_loop import (
    HISTORY_FILE,
    MANIFEST_FILE,
    EarlyStopSpec,
    LoopConfig,
    PoolState,
    Provenance,
    RunHistory,
    SelectionRecord,
    apply_selection,
    run_iteration,
    run_loop,
    select_per_class,
    training_set,
)
from src.utils import read_json


def brute_force_selection(proba, ids, q, metric="max_prob"):
    scores = score_confidence(proba, metric).numpy()
    pred = proba.argmax(axis=1)
    out = {}
    for c in range(proba.shape[1]):
        members = [i for i in range(len(ids)) if pred[i] == c]
        members.sort(key=lambda i: (-scores[i], ids[i]))
        out[c] = [(ids[i], c, float(scores[i])) for i in members[:q]]
    return out


def random_proba(rng, n, num_classes):
    """Rows drawn from a handful of prototypes, so confidences tie across rows."""
    prototypes = rng.dirichlet(np.ones(num_classes), size=rng.integers(1, 6))
    return prototypes[rng.integers(0, len(prototypes), n)]


def pools(n_labeled=4, n_unlabeled=6, num_classes=2):
    labeled = Dataset(torch.rand(n_labeled, 3), torch.arange(n_labeled) % num_classes, make_ids("l", n_labeled),
                      num_classes)
    unlabeled = Dataset(torch.rand(n_unlabeled, 3), None, make_ids("u", n_unlabeled), num_classes)
    return labeled, unlabeled


class TestSelectPerClass:
    @pytest.mark.parametrize("metric", ["max_prob", "neg_entropy"])
    def test_matches_brute_force(self, rng, metric):
        for trial in range(1000):
            n, num_classes = int(rng.integers(0, 30 if trial % 10 else 500)), int(rng.integers(2, 8))
            proba = random_proba(rng, n, num_classes)
            ids = [f"u{j}" for j in rng.permutation(n)]
            alpha = float(rng.choice([0.1, 0.25, 0.5, 1.0]))
            n_per_class = int(rng.integers(1, 20))
            q = int(np.floor(alpha * n_per_class + 1e-9))
            if q < 1:
                with pytest.raises(ConfigError):
                    select_per_class(proba, ids, alpha, n_per_class, metric)
                continue
            record = select_per_class(proba, ids, alpha, n_per_class, metric)
            assert record.per_class == brute_force_selection(proba, ids, q, metric)
            assert len(set(record.ids())) == len(record)
            for c, entries in record.per_class.items():
                assert record.shortfall.get(c, 0) == q - len(entries)

    def test_floor_of_inexact_product(self):
        proba = np.tile([[0.9, 0.1]], (40, 1))
        record = select_per_class(proba, make_ids("u", 40), 0.29, 100)
        assert record.requested == 29
        assert len(record.per_class[0]) == 29
        assert record.shortfall == {1: 29}

    def test_regime_bound(self, rng):
        proba = rng.dirichlet(np.ones(7), size=2000)
        record = select_per_class(proba, make_ids("u", 2000), 0.5, 45)
        assert record.requested == 22
        assert all(len(v) <= 22 for v in record.per_class.values())
        assert len(record) <= 154

    def test_equal_confidence_goes_by_id(self):
        proba = np.full((4, 2), 0.5)
        proba[:, 0] += 1e-3
        proba[:, 1] -= 1e-3
        record = select_per_class(proba, ["d", "b", "c", "a"], 0.5, 4)
        assert [e[0] for e in record.per_class[0]] == ["a", "b"]

    def test_rejects(self):
        proba = np.array([[0.6, 0.4]])
        with pytest.raises(ConfigError):
            select_per_class(proba, ["x"], 0.0, 10)
        with pytest.raises(ConsistencyError):
            select_per_class(proba, ["x", "y"], 1.0, 1)
        with pytest.raises(ConsistencyError):
            select_per_class(np.array([[0.6, 0.4], [0.3, 0.7]]), ["x", "x"], 1.0, 1)


class TestPools:
    def test_apply_selection(self):
        labeled, unlabeled = pools()
        state = PoolState.initial(labeled, unlabeled)
        record = SelectionRecord(1, {0: [("u-000001", 0, 0.9)], 1: [("u-000003", 1, 0.8)]}, 1)
        new = apply_selection(state, record)
        assert len(new.labeled) == 6 and len(new.unlabeled) == 4
        assert new.provenance["u-000003"] == Provenance("pseudo", 1, 0.8)
        assert new.labeled.labels[-2:].tolist() == [0, 1]
        assert "u-000001" not in set(new.unlabeled.ids)
        assert new.n_pseudo == 2 and len(new.seed_pool()) == 4
        # the original state is not modified
        assert len(state.unlabeled) == 6 and state.n_pseudo == 0

    def test_empty_selection(self):
        state = PoolState.initial(*pools())
        new = apply_selection(state, SelectionRecord(1, {0: [], 1: []}, 1))
        assert list(new.unlabeled.ids) == list(state.unlabeled.ids)

    def test_rejects_bad_selections(self):
        state = PoolState.initial(*pools())
        with pytest.raises(ConsistencyError):
            apply_selection(state, SelectionRecord(1, {0: [("l-000000", 0, 0.9)]}, 1))
        with pytest.raises(ConsistencyError):
            apply_selection(state, SelectionRecord(1, {0: [("u-000002", 0, 0.9)], 1: [("u-000002", 1, 0.9)]}, 1))

    def test_invariants(self):
        labeled, unlabeled = pools()
        with pytest.raises(ConfigError):
            PoolState.initial(labeled.without_labels(), unlabeled)
        overlap = Dataset(unlabeled.samples, None, np.array(["l-000000"] + list(unlabeled.ids[1:])), 2)
        with pytest.raises(ConsistencyError):
            PoolState.initial(labeled, overlap)
        state = PoolState.initial(labeled, unlabeled)
        state.provenance["l-000000"] = Provenance("pseudo", 0, None)
        with pytest.raises(ConsistencyError):
            state.check_invariants()

    def test_training_set(self):
        labeled, unlabeled = pools()
        state = PoolState.initial(labeled, unlabeled)
        state = apply_selection(state, SelectionRecord(1, {0: [("u-000001", 0, 0.9)]}, 1))
        config = LoopConfig(alpha=1.0, n_per_class=2, k=2, augmentation_ops=("hflip",))
        assert len(training_set(state, config)) == 3 * 4 + 1
        reaugmented = LoopConfig(alpha=1.0, n_per_class=2, k=2, augmentation_ops=("hflip",), reaugment_pseudo=True)
        assert len(training_set(state, reaugmented)) == 3 * 4 + 3


class TestLoopConfig:
    @pytest.mark.parametrize("kwargs", [
        {"alpha": 0.0},
        {"alpha": 0.1, "n_per_class": 5},
        {"k": -1},
        {"confidence_metric": "margin"},
        {"use_representation": "pca"},
        {"scoring": "vote"},
        {"mixup": MixupSpec("vae_latent")},
        {"vae_augment": 4},
        {"augmentation_ops": ("shear",)},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            LoopConfig(**{"alpha": 0.5, "n_per_class": 10, **kwargs})

    def test_q(self):
        assert LoopConfig(alpha=0.5, n_per_class=45).q == 22
        assert LoopConfig(alpha=0.29, n_per_class=100).q == 29
        assert EarlyStopSpec().patience == 2


def loop_config(**kwargs):
    fast = TrainingConfig(epochs=2, batch_size=32, dropout=0.0)
    defaults = dict(
        alpha=0.5, n_per_class=4, k=1, max_iterations=2, early_stop=EarlyStopSpec(enabled=False),
        classifier=fast, representation=fast, head=fast, latent_dim=4,
    )
    return LoopConfig(**{**defaults, **kwargs})


class TestRunLoop:
    def test_small_run(self, tmp_path, tiny_split):
        out = str(tmp_path / "run")
        history = run_loop(tiny_split, loop_config(), out_dir=out)
        entries = history.entries
        assert [e.iteration for e in entries] == [0, 1, 2]
        assert entries[0].arm == "supervised" and entries[0].selected == 0
        assert all(e.arm == "framework" for e in entries[1:])
        total = len(tiny_split.labeled) + len(tiny_split.unlabeled)
        assert all(e.labeled_size + e.unlabeled_size == total for e in entries)
        assert entries[-1].cumulative_added == sum(e.selected for e in entries)
        assert all(e.selected <= 3 * 2 for e in entries)
        assert len({e.m_u_fingerprint for e in entries}) == 1
        assert all(p.confidence is not None for p in history.final_state.provenance.values() if p.origin == "pseudo")
        assert history.best_iteration == 2 and history.stop_reason == "max_iterations"

        assert sorted(os.listdir(os.path.join(out, "best"))) == ["m_l.pt", "m_u.pt", "m_w.pt"]
        manifest = read_json(os.path.join(out, MANIFEST_FILE))
        assert manifest["summary"]["best_iteration"] == 2
        assert manifest["interpretation"]["tie_break"] == "ascending sample id"
        loaded = RunHistory.from_jsonl(os.path.join(out, HISTORY_FILE), 2)
        assert [e.test_accuracy for e in loaded.entries] == [e.test_accuracy for e in entries]

    def test_zero_iterations_is_the_baseline(self, tiny_split):
        history = run_loop(tiny_split, loop_config(max_iterations=0))
        assert len(history.entries) == 1
        assert history.best_iteration == 0
        assert history.best is history.baseline
        assert history.best_models.m_w is None

    def test_baseline_is_plain_supervised_training(self, tiny_split):
        config = loop_config(max_iterations=0)
        history = run_loop(tiny_split, config)
        seed_train = augment(tiny_split.labeled, AugmentationSpec(config.augmentation_ops, config.k, seed=config.seed))
        model = train_classifier(seed_train, config.classifier_config())
        assert history.baseline.test_accuracy == accuracy(model, tiny_split.test)

    def test_metrics_follow_the_scoring_model(self, tiny_split):
        history = run_loop(tiny_split, loop_config(scoring="classifier", max_iterations=1))
        models = history.best_models
        assert history.best_iteration == 1 and models.m_w is not None
        assert history.entries[1].test_accuracy == accuracy(models.m_l, tiny_split.test)

        fused = run_loop(tiny_split, loop_config(max_iterations=1))
        assert fused.entries[1].test_accuracy == fused.best_models.accuracy(tiny_split.test, "fused")

    def test_without_representation(self, tiny_split):
        history = run_loop(tiny_split, loop_config(use_representation="none", max_iterations=1))
        assert len(history.entries) == 2
        assert history.best_models.m_u.latent_dim == 0

    def test_exhaustion(self, tiny_split):
        history = run_loop(tiny_split, loop_config(alpha=20.0, max_iterations=3))
        assert history.stop_reason == "exhausted"
        assert len(history.entries) == 2
        assert history.entries[-1].unlabeled_size == 0
        assert history.final_state.n_pseudo == len(tiny_split.unlabeled)

    def test_early_stopping_holds_out_seed_labels(self, tiny_split):
        history = run_loop(tiny_split, loop_config(early_stop=EarlyStopSpec(enabled=True, patience=1), max_iterations=4))
        assert history.baseline.labeled_size == len(tiny_split.labeled) - 2
        assert all(e.val_accuracy is not None for e in history.entries)
        assert history.stop_reason in ("patience", "max_iterations", "exhausted")
        assert history.best_iteration in [e.iteration for e in history.entries]

    def test_empty_unlabeled_pool(self):
        labeled, unlabeled = pools()
        state = PoolState.initial(labeled, unlabeled.take([]))
        with pytest.raises(EmptyDatasetError):
            run_iteration(state, loop_config(n_per_class=2), m_u=None)

    def test_same_config_same_history(self, tiny_split):
        first = run_loop(tiny_split, loop_config(max_iterations=1)).entries
        second = run_loop(tiny_split, loop_config(max_iterations=1)).entries
        assert [e.to_dict() for e in first] == [e.to_dict() for e in second]


@pytest.mark.slow
class TestFullLoop:
    def test_invariants_on_every_iteration(self):
        dataset = gen_synthetic_classes(num_classes=7, n_per_class=450, size=32, difficulty=0.3, seed=0)
        split = make_split(dataset, SplitSpec(n_labeled=315, n_test=315, seed=0))
        history = run_loop(split, LoopConfig(alpha=0.25, n_per_class=45, max_iterations=5,
                                             early_stop=EarlyStopSpec(enabled=False),
                                             classifier=TrainingConfig(epochs=5)))
        entries = history.entries
        assert all(e.labeled_size + e.unlabeled_size == 315 + 2520 for e in entries)
        sizes = [e.labeled_size for e in entries]
        assert sizes == sorted(sizes)
        assert all(e.selected <= 7 * 11 for e in entries)
        assert len({e.m_u_fingerprint for e in entries if e.m_u_fingerprint}) == 1
        state = history.final_state
        state.check_invariants()
        assert not set(state.labeled.ids) & set(state.unlabeled.ids)
