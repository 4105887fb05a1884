import math
import os

import numpy as np
import pytest

from src.data import gen_signal_classes, save_dataset
from src.dataset import AugmentationSpec, SplitSpec, augment, holdout_split, make_split, subset
from src.errors import ConfigError, ConsistencyError
from src.experiments import (
    PARTIAL_MARKER,
    RESULTS_FILE,
    SIGNAL_MIXUP_GRID,
    SUMMARY_FILE,
    DatasetSpec,
    ExperimentResult,
    ExperimentSpec,
    confidence_buckets,
    format_reference_table,
    read_results,
    reference_table,
    row,
    run_experiment,
    run_grid,
    seeded_loop,
    sign_test,
)
from src.modeling import TrainingConfig, accuracy, train_classifier
from src.pseudo_loop import EarlyStopSpec, LoopConfig, run_loop
from src.utils import read_json

CALLS = []


def square_point(payload):
    CALLS.append(payload)
    return [row(0, payload, "arm", 0, "square", payload ** 2)]


def tiny_spec(experiment, **kwargs):
    fast = TrainingConfig(epochs=2, batch_size=32, dropout=0.0)
    loop = LoopConfig(alpha=0.5, n_per_class=4, k=1, max_iterations=1, early_stop=EarlyStopSpec(enabled=False),
                      classifier=fast, representation=fast, head=fast, latent_dim=4)
    defaults = dict(
        dataset=DatasetSpec("wafer", params=dict(num_classes=3, n_per_class=40, size=16, difficulty=0.2)),
        seeds=(0,), loop=loop, training=fast, n_labeled=12, n_test=30,
    )
    return ExperimentSpec(experiment, **{**defaults, **kwargs})


class TestConfidenceBuckets:
    def test_calibrated_oracle(self, rng):
        confidence = rng.random(200000)
        correct = rng.random(200000) < confidence
        buckets = confidence_buckets(confidence, correct)
        assert [b["bucket"] for b in buckets] == list(range(10))
        for b in buckets:
            assert abs(b["accuracy"] - b["mean_confidence"]) < 0.05
            assert b["lo"] <= b["mean_confidence"] < b["hi"]

    def test_constant_model(self):
        buckets = confidence_buckets(np.full(50, 0.55), np.ones(50))
        assert len(buckets) == 1
        assert buckets[0]["bucket"] == 5 and buckets[0]["count"] == 50

    def test_edges(self):
        buckets = confidence_buckets([0.0, 0.1, 0.95, 1.0], [1, 0, 1, 1])
        assert {b["bucket"]: b["count"] for b in buckets} == {0: 1, 1: 1, 9: 2}


class TestSpecs:
    def test_defaults(self):
        spec = ExperimentSpec("alpha_sweep")
        assert spec.grid == (0.1, 0.25, 0.5, 1.0)
        assert spec.seeds == (0, 1, 2, 3, 4)
        assert ExperimentSpec("mixup_layer_ablation").grid == ("off", "input", "conv1", "conv2", "conv3", "flatten")
        signal = ExperimentSpec("mixup_layer_ablation", dataset=DatasetSpec("signal"))
        assert signal.grid == tuple(SIGNAL_MIXUP_GRID)
        assert len(ExperimentSpec("noise_curve").grid) == 9

    @pytest.mark.parametrize("kwargs", [
        {"experiment": "fig11"},
        {"experiment": "benchmark", "seeds": ()},
        {"experiment": "noise_curve", "subset_fraction": 0.0},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            ExperimentSpec(**kwargs)

    def test_dataset_spec(self):
        assert DatasetSpec("crack").params == {"n_per_class": 100, "size": 32}
        with pytest.raises(ConfigError):
            DatasetSpec("mnist")
        with pytest.raises(ConfigError):
            DatasetSpec("crack", params={"colour": 3}).build()
        d = DatasetSpec("crack", params={"n_per_class": 4, "size": 16}, seed=2).build()
        assert len(d) == 12

    def test_signal_dataset_dir(self, tmp_path):
        path = str(tmp_path / "beats")
        save_dataset(gen_signal_classes(num_classes=3, n_per_class=5, signal_len=16, difficulty=0.2, seed=0), path,
                     generator="signal")
        dataset = DatasetSpec(path=path)
        assert not dataset.is_image()
        assert dataset.label == "beats"
        spec = ExperimentSpec("mixup_layer_ablation", dataset=dataset)
        assert spec.grid == tuple(SIGNAL_MIXUP_GRID)
        assert spec.loop.augmentation_ops == ("hflip",)
        assert (spec.n_labeled, spec.n_test) == (315, 500)

    def test_crack_default_split(self):
        spec = ExperimentSpec("crack_probe", dataset=DatasetSpec("crack"))
        assert (spec.n_labeled, spec.n_test) == (30, 90)
        assert ExperimentSpec("crack_probe", dataset=DatasetSpec("crack"), n_test=60).n_test == 60
        assert DatasetSpec("crack").label == "crack"

    def test_crack_keeps_left_and_right(self):
        spec = ExperimentSpec("mixup_layer_ablation", dataset=DatasetSpec("crack"))
        assert spec.loop.augmentation_ops == ("vflip",)
        assert DatasetSpec("crack").augmentation_ops(("hflip", "rot90")) == ("vflip",)
        assert DatasetSpec("wafer").augmentation_ops(("hflip", "rot90")) == ("hflip", "rot90")

    def test_to_dict(self):
        d = tiny_spec("benchmark").to_dict()
        assert d["grid"] == [0.25]
        assert d["loop"]["alpha"] == 0.5
        assert d["dataset"]["params"]["num_classes"] == 3


class TestRunGrid:
    def test_markers_and_resume(self, tmp_path):
        out = str(tmp_path)
        points = [(f"p{v}", v) for v in (1, 2, 3)]
        CALLS.clear()
        rows = run_grid(points, square_point, out)
        assert [r["value"] for r in rows] == [1.0, 4.0, 9.0]
        assert not os.path.exists(os.path.join(out, PARTIAL_MARKER))
        assert sorted(os.listdir(os.path.join(out, "points"))) == [
            "point-p1.done", "point-p1.json", "point-p2.done", "point-p2.json", "point-p3.done", "point-p3.json",
        ]

        os.remove(os.path.join(out, "points", "point-p2.done"))
        CALLS.clear()
        again = run_grid(points, square_point, out, resume=True)
        assert CALLS == [2]
        assert again == rows

    def test_without_resume_everything_reruns(self, tmp_path):
        points = [("a", 1), ("b", 2)]
        run_grid(points, square_point, str(tmp_path))
        CALLS.clear()
        run_grid(points, square_point, str(tmp_path))
        assert CALLS == [1, 2]

    def test_jobs(self):
        with pytest.raises(ConfigError):
            run_grid([("a", 1)], square_point, jobs=0)


class TestResults:
    def test_write_and_read(self, tmp_path):
        rows = [row(1, 0.5, "framework", 2, "test_accuracy", 0.8), row(0, 0.5, "framework", 0, "test_accuracy", 0.7)]
        result = ExperimentResult("alpha_sweep", rows, {"note": 1})
        assert [r["seed"] for r in result.rows] == [0, 1]
        result.write(str(tmp_path))
        loaded = read_results(str(tmp_path / RESULTS_FILE))
        assert [r["value"] for r in loaded] == [0.7, 0.8]
        assert loaded[1]["iteration"] == 2
        assert read_json(str(tmp_path / SUMMARY_FILE)) == {"experiment": "alpha_sweep", "note": 1}
        assert len(result.select("test_accuracy", arm="framework", iteration=2)) == 1

    def test_validate(self):
        with pytest.raises(ConsistencyError):
            ExperimentResult("x", [row(0, 1, "a", 0, "m", float("nan"))]).validate()
        with pytest.raises(ConsistencyError):
            ExperimentResult("x", [{**row(0, 1, "a", 0, "m", 1.0), "arm": ""}]).validate()

    def test_reference_table(self):
        table = reference_table()
        assert table["Supervised"] == {"wafer": 19.5, "ecg": 23.2}
        assert table["Pseudo-Representation"] == {"wafer": 15.1, "ecg": 18.8}
        text = format_reference_table()
        assert "19.5" in text and "15.1" in text and "23.2" in text and "18.8" in text

    def test_sign_test(self):
        assert sign_test(0, 0) is None
        assert sign_test(5, 0) == pytest.approx(0.0625)
        assert sign_test(3, 3) == pytest.approx(1.0)


class TestExperiments:
    def test_mixup_ablation_control_arm(self, tmp_path):
        spec = tiny_spec("mixup_layer_ablation", grid=("off", "input", "conv2"))
        result = run_experiment(spec, out_dir=str(tmp_path))
        assert len(result.select("test_accuracy")) == 3
        assert os.path.isfile(tmp_path / RESULTS_FILE)

        split = make_split(spec.dataset.build(), SplitSpec(12, 30, seed=0))
        train = augment(split.labeled, AugmentationSpec(spec.loop.augmentation_ops, spec.loop.k, seed=0))
        plain = train_classifier(train, spec.training)
        assert result.select("test_accuracy", grid_value="off")[0]["value"] == accuracy(plain, split.test)

    def test_noise_curve_clean_rate(self):
        spec = tiny_spec("noise_curve", grid=(0.0, 0.5))
        result = run_experiment(spec)
        assert len(result.rows) == 4
        assert set(result.summary["curves"]) == {"subset", "full"}
        assert result.summary["spearman_subset_vs_full"] is None

        train, test = holdout_split(spec.dataset.build(), 30, 0)
        model = train_classifier(augment(subset(train, 1.0, 0), AugmentationSpec(spec.loop.augmentation_ops, 1, seed=0)),
                                 spec.training)
        clean = result.select("test_accuracy", arm="full", grid_value=0.0)[0]["value"]
        assert clean == accuracy(model, test)

    def test_confidence_curve(self):
        result = run_experiment(tiny_spec("confidence_curve"))
        assert sum(r["value"] for r in result.select("count")) == 30
        assert result.summary["seeds"] == 1

    def test_alpha_sweep_shares_the_baseline(self):
        result = run_experiment(tiny_spec("alpha_sweep", grid=(0.25, 1.0)))
        baselines = {r["grid_value"]: r["value"] for r in result.select("test_accuracy", iteration=0)}
        assert len(baselines) == 2 and len(set(baselines.values())) == 1
        assert set(result.summary["alphas"]) == {"0.25", "1.0"}
        assert len(result.select("cumulative_added", iteration=1)) == 2

    def test_ssl_ablation_arms(self):
        result = run_experiment(tiny_spec("ssl_ablation", grid=(0.5,)))
        tower = result.select("test_accuracy", arm="tower", iteration=0)[0]["value"]
        stub = result.select("test_accuracy", arm="stub", iteration=0)[0]["value"]
        assert tower == stub
        assert "0.5" in result.summary["delta_best_test_accuracy"]

    def test_benchmark(self):
        result = run_experiment(tiny_spec("benchmark"))
        errors = {r["arm"]: r["value"] for r in result.select("test_error")}
        assert set(errors) == {"supervised", "framework"}
        assert all(0.0 <= v <= 1.0 for v in errors.values())
        summary = result.summary
        assert summary["framework_wins"] + summary["framework_losses"] <= 1
        assert summary["reference_errors_percent"]["Supervised"]["wafer"] == 19.5
        assert summary["table"]["Supervised"]["wafer"]["n"] == 1

    def test_crack_probe_needs_crack_data(self):
        with pytest.raises(ConfigError):
            run_experiment(tiny_spec("crack_probe"))

    def test_crack_probe(self):
        spec = tiny_spec("crack_probe", dataset=DatasetSpec("crack", params={"n_per_class": 20, "size": 16}))
        result = run_experiment(spec)
        for arm in ("pixel", "vae_latent"):
            votes = [r["value"] for r in result.select("votes_class_0", arm=arm)]
            assert len(votes) == 1
            total = sum(r["value"] for r in result.rows if r["arm"] == arm)
            assert total == 50


@pytest.mark.slow
class TestAcceptance:
    """Desk-scale directional checks on the default synthetic wafer set."""

    def test_noise_curve_shape(self):
        spec = ExperimentSpec("noise_curve", grid=(0.0, 0.2, 0.4, 0.6, 0.8), n_test=500,
                              training=TrainingConfig(epochs=10))
        summary = run_experiment(spec).summary
        assert summary["full_drop"] > 0.05
        assert summary["spearman_subset_vs_full"] >= 0.9

    def test_confidence_ordering(self):
        summary = run_experiment(ExperimentSpec("confidence_curve", training=TrainingConfig(epochs=10))).summary
        assert summary["top_ge_bottom_seeds"] >= 4

    def test_crack_mixes_look_like_both_cracks(self):
        spec = ExperimentSpec("crack_probe", dataset=DatasetSpec("crack"), seeds=(0,),
                              training=TrainingConfig(epochs=20))
        summary = run_experiment(spec).summary
        assert summary["pixel"]["majority_class"] == 2
        assert summary["vae_latent"]["majority_class"] == 2

    def test_input_mixup_does_not_help_crack_training(self):
        loop = LoopConfig(alpha=0.25, n_per_class=10, k=0)
        spec = ExperimentSpec("mixup_layer_ablation", dataset=DatasetSpec("crack"), grid=("off", "input"), loop=loop,
                              training=TrainingConfig(epochs=20))
        assert (spec.n_labeled, spec.n_test) == (30, 90)
        result = run_experiment(spec)
        off = {r["seed"]: r["value"] for r in result.select("train_accuracy", grid_value="off")}
        mixed = {r["seed"]: r["value"] for r in result.select("train_accuracy", grid_value="input")}
        assert sum(mixed[s] <= off[s] for s in off) >= 3

    def test_framework_not_worse_than_supervised(self):
        loop = LoopConfig(alpha=0.25, n_per_class=15, max_iterations=5)
        spec = ExperimentSpec("benchmark", loop=loop, n_labeled=105, n_test=500)
        result = run_experiment(spec)
        table = result.summary["table"]
        assert table["Pseudo-Representation"]["wafer"]["mean"] <= table["Supervised"]["wafer"]["mean"]
        assert not math.isnan(table["Supervised"]["wafer"]["std"])
        assert result.summary["framework_wins"] >= 3

    def test_first_pseudo_labels_beat_the_classifier(self):
        dataset = DatasetSpec("wafer").build()
        loop = LoopConfig(alpha=0.25, n_per_class=15, max_iterations=1, early_stop=EarlyStopSpec(enabled=False))
        better = 0
        for seed in range(5):
            split = make_split(dataset, SplitSpec(105, 500, seed=seed))
            first = run_loop(split, seeded_loop(loop, seed)).entries[1]
            better += first.precision >= first.unlabeled_accuracy
        assert better >= 4

    def test_alpha_sweep_shape(self):
        noisy = DatasetSpec("wafer", params=dict(num_classes=7, n_per_class=450, size=32, difficulty=0.5))
        loop = LoopConfig(alpha=1.0, n_per_class=15, max_iterations=6, early_stop=EarlyStopSpec(enabled=False))
        spec = ExperimentSpec("alpha_sweep", dataset=noisy, grid=(0.25, 1.0), loop=loop, n_labeled=105, n_test=500)
        alphas = run_experiment(spec).summary["alphas"]
        assert alphas["1.0"]["final_below_peak_seeds"] >= 3
        assert alphas["0.25"]["peak_at_iteration_ge_2_seeds"] >= 3

    def test_representation_tower_helps(self):
        loop = LoopConfig(alpha=0.25, n_per_class=15, max_iterations=5)
        spec = ExperimentSpec("ssl_ablation", loop=loop, n_labeled=105, n_test=500)
        deltas = run_experiment(spec).summary["delta_best_test_accuracy"]
        assert deltas and all(d >= 0.0 for d in deltas.values())
