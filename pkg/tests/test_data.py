import os

import numpy as np
import pytest
import torch

from src.data import (
    Dataset,
    dataset_hash,
    gen_crack_dataset,
    gen_signal_classes,
    gen_synthetic_classes,
    load_dataset_dir,
    load_idx,
    load_signal_csv,
    make_ids,
    save_dataset,
    write_idx,
    write_signal_csv,
)
from src.dataset import SplitSpec, make_split
from src.errors import ConfigError, ConsistencyError, EmptyDatasetError, FormatError, NonFiniteError
from src.modeling import TrainingConfig, accuracy, train_classifier


class TestDataset:
    def test_rejects_duplicate_ids(self):
        with pytest.raises(ConsistencyError):
            Dataset(torch.zeros(2, 4), torch.tensor([0, 1]), np.array(["a", "a"]), 2)

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ConfigError):
            Dataset(torch.zeros(2, 4), torch.tensor([0, 2]), make_ids("s", 2), 2)

    def test_rejects_non_finite(self):
        x = torch.zeros(2, 4)
        x[1, 2] = float("nan")
        with pytest.raises(NonFiniteError):
            Dataset(x, None, make_ids("s", 2), 2)

    def test_images_must_be_in_unit_range(self):
        with pytest.raises(FormatError):
            Dataset(torch.full((1, 1, 4, 4), 2.0), None, make_ids("s", 1), 1)

    def test_take_and_index_of(self, tiny_wafer):
        part = tiny_wafer.take([5, 1, 3])
        assert list(part.ids) == [tiny_wafer.ids[5], tiny_wafer.ids[1], tiny_wafer.ids[3]]
        np.testing.assert_array_equal(part.index_of([tiny_wafer.ids[3], tiny_wafer.ids[5]]), [2, 0])
        with pytest.raises(ConsistencyError):
            part.index_of(["nope"])

    def test_concat_keeps_roots(self, tiny_wafer):
        a = tiny_wafer.take([0, 1])
        b = Dataset(a.samples, a.labels, np.array(["c0", "c1"]), a.num_classes, parents=a.ids)
        both = Dataset.concat([a, b])
        assert len(both) == 4
        assert list(both.root_ids()) == list(a.ids) * 2

    def test_concat_of_nothing(self):
        with pytest.raises(EmptyDatasetError):
            Dataset.concat([])


class TestIdx:
    def test_float_images_with_sibling_labels(self, tmp_path, tiny_wafer):
        write_idx(tmp_path / "samples.idx", tiny_wafer.samples)
        write_idx(tmp_path / "labels.idx", tiny_wafer.labels)
        loaded = load_idx(str(tmp_path / "samples.idx"))
        torch.testing.assert_close(loaded.samples, tiny_wafer.samples)
        assert torch.equal(loaded.labels, tiny_wafer.labels)
        assert loaded.num_classes == 3

    def test_uint8_payload_is_scaled(self, tmp_path):
        raw = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
        write_idx(tmp_path / "x.idx", raw)
        loaded = load_idx(str(tmp_path / "x.idx"), label_path="")
        assert loaded.samples.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(loaded.samples.numpy().ravel(), [0.0, 1.0, 0.2, 0.4], atol=1e-7)
        assert loaded.labels is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x01\x00")
        with pytest.raises(FormatError):
            load_idx(str(path))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        write_idx(path, np.zeros((4, 3), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_idx(str(path), label_path="")

    def test_label_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "a.idx", np.zeros((3, 4), dtype=np.float32))
        write_idx(tmp_path / "a-labels.idx", np.array([0, 1], dtype=np.int64))
        with pytest.raises(ConsistencyError):
            load_idx(str(tmp_path / "a.idx"))


class TestSignalCsv:
    def test_write_then_load(self, tmp_path, tiny_signal):
        path = str(tmp_path / "beats.csv")
        write_signal_csv(path, tiny_signal)
        loaded = load_signal_csv(path, 32)
        assert len(loaded) == len(tiny_signal)
        assert torch.equal(loaded.labels, tiny_signal.labels)
        torch.testing.assert_close(loaded.samples, tiny_signal.samples, atol=1e-6, rtol=0)

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("0.1,0.2,0.3,1\n0.1,0.2,1\n")
        with pytest.raises(FormatError, match=":2:"):
            load_signal_csv(str(path), 3)

    def test_fractional_label(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("0.1,0.2,0.5\n")
        with pytest.raises(FormatError):
            load_signal_csv(str(path), 2)

    def test_non_finite_value(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("0.1,inf,0\n")
        with pytest.raises(NonFiniteError):
            load_signal_csv(str(path), 2)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("\n")
        with pytest.raises(EmptyDatasetError):
            load_signal_csv(str(path), 2)


class TestGenerators:
    def test_crack_sizes(self):
        d = gen_crack_dataset(n_per_class=100, size=32, seed=7)
        assert len(d) == 300
        assert d.sample_shape == (1, 32, 32)
        assert d.class_counts() == [100, 100, 100]

    def test_crack_halves(self):
        d = gen_crack_dataset(n_per_class=10, size=32, seed=0)
        x = d.samples[:, 0]
        left, right = x[..., :16].flatten(1).sum(1), x[..., 16:].flatten(1).sum(1)
        labels = d.labels
        assert (right[labels == 0] == 0).all()
        assert (left[labels == 1] == 0).all()
        assert ((left[labels == 2] > 0) & (right[labels == 2] > 0)).all()

    @pytest.mark.parametrize("make", [
        lambda s: gen_crack_dataset(5, 16, s),
        lambda s: gen_synthetic_classes(7, 5, 16, 0.3, s),
        lambda s: gen_signal_classes(5, 5, 40, 0.3, s),
    ])
    def test_deterministic(self, make):
        assert dataset_hash(make(3)) == dataset_hash(make(3))
        assert dataset_hash(make(3)) != dataset_hash(make(4))

    @pytest.mark.slow
    def test_easy_wafer_is_learnable(self):
        data = gen_synthetic_classes(num_classes=7, n_per_class=450, size=32, difficulty=0.1, seed=0)
        split = make_split(data, SplitSpec(n_labeled=2100, n_test=900, seed=0))
        model = train_classifier(split.labeled, TrainingConfig(epochs=10, batch_size=64))
        assert accuracy(model, split.test) >= 0.95

    def test_wafer_argument_checks(self):
        with pytest.raises(ConfigError):
            gen_synthetic_classes(8, 5, 16, 0.3, 0)
        with pytest.raises(ConfigError):
            gen_synthetic_classes(3, 5, 16, 0.0, 0)
        with pytest.raises(ConfigError):
            gen_crack_dataset(0, 16, 0)


class TestDatasetDir:
    def test_image_dir(self, tmp_path, tiny_wafer):
        manifest = save_dataset(tiny_wafer, str(tmp_path), generator="wafer", seed=0)
        assert sorted(os.listdir(tmp_path)) == ["ids.json", "labels.idx", "manifest.json", "samples.idx"]
        loaded = load_dataset_dir(str(tmp_path))
        assert dataset_hash(loaded) == manifest["hash"]

    def test_signal_dir(self, tmp_path, tiny_signal):
        manifest = save_dataset(tiny_signal, str(tmp_path), generator="signal", seed=0)
        loaded = load_dataset_dir(str(tmp_path))
        assert list(loaded.ids) == list(tiny_signal.ids)
        assert loaded.num_classes == manifest["num_classes"]

    def test_missing_payload(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset_dir(str(tmp_path))
