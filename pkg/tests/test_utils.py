import argparse

import numpy as np
import pytest
import torch

from src.utils import (
    AttrDict,
    bool_flag,
    read_jsonl,
    resolve_seed,
    sha256_arrays,
    state_fingerprint,
    str2dic_all,
    str2floats,
    str2ints,
    to_attr_dict,
    to_jsonable,
    write_jsonl,
)


class TestFlags:
    def test_bool_flag(self):
        assert bool_flag("True") is True and bool_flag("off") is False and bool_flag(False) is False
        with pytest.raises(argparse.ArgumentTypeError):
            bool_flag("maybe")

    def test_lists(self):
        assert str2floats("0.1,0.25") == [0.1, 0.25]
        assert str2ints("0,1,2") == [0, 1, 2]
        assert str2ints("_None_") is None

    def test_typed_dict(self):
        d = str2dic_all("num_classes=int(3),difficulty=float(0.2),name=str(x),flip=bool(on)")
        assert d == {"num_classes": 3, "difficulty": 0.2, "name": "x", "flip": True}
        assert d.num_classes == 3
        assert str2dic_all("") is None

    @pytest.mark.parametrize("s", ["a=3", "a=complex(1)", "a"])
    def test_typed_dict_rejects(self, s):
        with pytest.raises(argparse.ArgumentTypeError):
            str2dic_all(s)


class TestAttrDict:
    def test_nested(self):
        d = to_attr_dict({"training": {"epochs": 3}, "alpha": 0.5})
        assert isinstance(d.training, AttrDict)
        assert d.training.epochs == 3 and d["alpha"] == 0.5


class TestSeeds:
    def test_precedence(self, monkeypatch):
        monkeypatch.delenv("PSEUDOREP_SEED", raising=False)
        assert resolve_seed() == 0
        monkeypatch.setenv("PSEUDOREP_SEED", "11")
        assert resolve_seed() == 11 and resolve_seed(-1) == 11
        assert resolve_seed(2) == 2


class TestHashing:
    def test_sha256_arrays(self):
        a = np.arange(6)
        assert sha256_arrays(a) == sha256_arrays(a.copy())
        assert sha256_arrays(a) != sha256_arrays(a.reshape(2, 3))
        assert sha256_arrays(a, None) != sha256_arrays(a)

    def test_state_fingerprint(self):
        torch.manual_seed(0)
        net = torch.nn.Linear(3, 2)
        before = state_fingerprint(net)
        assert state_fingerprint(net) == before
        with torch.no_grad():
            net.bias.add_(1.0)
        assert state_fingerprint(net) != before


class TestJson:
    def test_jsonable(self):
        out = to_jsonable({"a": np.float32(0.5), 1: (np.arange(2), torch.tensor([1.0]))})
        assert out == {"a": 0.5, "1": [[0, 1], [1.0]]}

    def test_jsonl(self, tmp_path):
        path = str(tmp_path / "h.jsonl")
        write_jsonl(path, [{"i": 0}, {"i": np.int64(1)}])
        assert read_jsonl(path) == [{"i": 0}, {"i": 1}]
