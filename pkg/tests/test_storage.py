import numpy as np
import pandas as pd
import pytest

from core.errors import MissingArtifactError
from storage import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    prefixed,
    read_csv,
    read_yaml,
    save_checkpoint,
    strip_prefix,
    write_csv,
    write_yaml,
)


class TestCheckpoint:
    def test_bytes_are_deterministic(self):
        a = {"b": np.arange(3.0), "a": np.eye(2)}
        b = {"a": np.eye(2), "b": np.arange(3.0)}
        assert encode_checkpoint(a, {"step": 1}) == encode_checkpoint(b, {"step": 1})

    def test_header_line(self):
        raw = encode_checkpoint({"w": np.zeros(1)})
        assert raw.split(b"\n", 1)[0] == b"CHUNKFLOW-CKPT 1"

    def test_save_and_load(self, tmp_path):
        arrays = {"model.w": np.random.default_rng(0).standard_normal((3, 4)), "counts": np.arange(5)}
        save_checkpoint(tmp_path / "x.ckpt", arrays, {"kind": "test", "step": 7})
        loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
        np.testing.assert_array_equal(loaded["model.w"], arrays["model.w"])
        assert loaded["counts"].dtype == arrays["counts"].dtype
        assert meta == {"kind": "test", "step": 7}
        assert not (tmp_path / "x.ckpt.tmp").exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError) as exc:
            load_checkpoint(tmp_path / "nope.ckpt")
        assert "nope.ckpt" in exc.value.missing[0]

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"OTHER 1\n{}\n")

    def test_truncated_payload(self):
        raw = encode_checkpoint({"w": np.zeros(8)})
        with pytest.raises(CheckpointError):
            decode_checkpoint(raw[:-8])

    def test_prefix_helpers(self):
        arrays = prefixed({"w": np.zeros(1)}, "model")
        assert list(arrays) == ["model.w"]
        mixed = {**arrays, "opt.m.0": np.ones(1)}
        assert list(strip_prefix(mixed, "model")) == ["w"]


class TestTables:
    def test_csv_float_format(self, tmp_path):
        path = write_csv(pd.DataFrame({"x": [1.0 / 3.0]}), tmp_path / "sub" / "t.csv")
        assert path.read_text().splitlines() == ["x", "0.3333333333"]

    def test_required_columns(self, tmp_path):
        write_csv(pd.DataFrame({"N": [1.0]}), tmp_path / "p.csv")
        with pytest.raises(CheckpointError):
            read_csv(tmp_path / "p.csv", required_columns=["N", "D"])
        with pytest.raises(MissingArtifactError):
            read_csv(tmp_path / "missing.csv")

    def test_yaml_roundtrip_with_numpy_values(self, tmp_path):
        path = write_yaml({"mean": np.array([1.0, 2.0]), "n": np.int64(3), "z": {"b": 1, "a": 2}}, tmp_path / "m.yaml")
        data = read_yaml(path)
        assert data == {"mean": [1.0, 2.0], "n": 3, "z": {"a": 2, "b": 1}}
