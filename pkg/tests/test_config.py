import pytest

from config import DEFAULT_CONFIG, OUT_ENV_VAR, load_run_config, parse_override, resolve_out, save_resolved
from core.errors import ConfigError, MissingArtifactError
from storage import read_yaml, write_yaml


class TestOverrides:
    def test_nested_key(self):
        assert parse_override("train.lr=3e-4") == {"train": {"lr": 3e-4}}

    def test_yaml_scalars(self):
        assert parse_override("task.mode_in_context=true") == {"task": {"mode_in_context": True}}
        assert parse_override("scaling.hidden_sizes=[8, 16]") == {"scaling": {"hidden_sizes": [8, 16]}}

    @pytest.mark.parametrize("text", ["train.lr", "=3"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)


class TestMerge:
    def test_precedence(self, tmp_path):
        path = write_yaml({"seed": 3, "train": {"lr": 0.01, "steps": 10}}, tmp_path / "c.yaml")
        cfg = load_run_config(path, ["train.steps=20"], seed=9)
        assert cfg["seed"] == 9
        assert cfg["train"]["lr"] == 0.01
        assert cfg["train"]["steps"] == 20
        assert cfg["train"]["batch_size"] == DEFAULT_CONFIG["train"]["batch_size"]

    def test_defaults_untouched(self):
        load_run_config(None, ["train.steps=5"])
        assert DEFAULT_CONFIG["train"]["steps"] == 2000

    def test_integer_becomes_float_where_expected(self):
        cfg = load_run_config(None, ["train.lr=1"])
        assert cfg["train"]["lr"] == 1.0 and isinstance(cfg["train"]["lr"], float)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.nope"):
            load_run_config(None, ["train.nope=1"])

    def test_section_replaced_by_scalar(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["train=3"])

    def test_non_numeric_float(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["train.lr=fast"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_run_config(tmp_path / "absent.yaml")

    def test_file_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_snapshot_round_trip(self, tmp_path):
        cfg = load_run_config(None, ["policy.hidden=64"], seed=2)
        path = save_resolved(cfg, tmp_path)
        assert read_yaml(path) == cfg


class TestOutDir:
    def test_precedence(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUT_ENV_VAR, str(tmp_path / "env"))
        assert resolve_out(str(tmp_path / "flag")) == tmp_path / "flag"
        assert resolve_out() == tmp_path / "env"
        monkeypatch.delenv(OUT_ENV_VAR)
        assert str(resolve_out()) == "runs"
