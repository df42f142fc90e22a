import numpy as np
import pytest

import calc
from core.errors import ConfigError
from modules.datagen import (
    SCALE_EPS,
    ActionLayout,
    ModeSpec,
    NormStats,
    TaskSpec,
    chunk_to_record,
    chunks_to_records,
    generate_arrays,
    generate_dataset,
    lateral_deviation,
    nearest_mode,
    record_to_chunk,
    stack_chunks,
)
from modules.rotations import check_rotation, sixd_to_matrix
from modules.shards import read_shard, write_shards


class TestLayout:
    def test_axis_angle_layout(self):
        layout = ActionLayout("axis_angle")
        assert layout.d == 14
        assert layout.position_indices().tolist() == [0, 1, 2, 7, 8, 9]
        assert layout.gripper_indices() == [6, 13]
        assert layout.rotation_slices() == [slice(3, 6), slice(10, 13)]

    def test_sixd_layout(self):
        layout = TaskSpec(d=20).layout
        assert layout.rotation_format == "6d"
        assert layout.gripper_indices() == [9, 19]

    def test_unsupported_width(self):
        with pytest.raises(ConfigError):
            TaskSpec(d=16)
        with pytest.raises(ConfigError):
            ActionLayout("quaternion")


class TestTaskSpec:
    def test_defaults(self):
        spec = TaskSpec()
        assert (spec.T_a, spec.d, len(spec.modes)) == (32, 14, 2)

    def test_dict_round_trip(self):
        spec = TaskSpec(modes=[{"name": "only", "bump": 0.0}], n_instructions=2)
        again = TaskSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()
        assert isinstance(again.modes[0], ModeSpec)

    def test_invalid_modes(self):
        with pytest.raises(ConfigError):
            TaskSpec(modes=[])
        with pytest.raises(ConfigError):
            TaskSpec(modes=[ModeSpec("a", weight=0.0)])
        with pytest.raises(ConfigError):
            TaskSpec(T_a=1)


class TestGenerator:
    def test_shapes(self):
        spec = TaskSpec()
        arrays = generate_arrays(spec, 8, seed=0)
        assert arrays["actions"].shape == (8, 32, 14)
        assert arrays["context"].shape == (8, 16)
        assert arrays["goal"].shape == (8, 2, 3)

    def test_seeded(self):
        spec = TaskSpec()
        a = generate_arrays(spec, 4, seed=9)["actions"]
        b = generate_arrays(spec, 4, seed=9)["actions"]
        np.testing.assert_array_equal(a, b)

    def test_single_noiseless_mode_differs_only_by_goal(self):
        spec = TaskSpec(modes=[ModeSpec("only", sigma=0.0)], n_instructions=1)
        arrays = generate_arrays(spec, 5, seed=0)
        grip = arrays["actions"][..., spec.layout.gripper_indices()]
        np.testing.assert_allclose(grip, grip[:1].repeat(5, axis=0))
        dev = lateral_deviation(arrays["actions"], spec.layout)
        np.testing.assert_allclose(dev, dev[0])

    def test_balanced_mode_counts(self):
        n = 10_000
        arrays = generate_arrays(TaskSpec(), n, seed=1)
        count = np.sum(arrays["mode"] == 0)
        assert abs(count - n / 2) <= 3 * np.sqrt(n * 0.25)

    def test_chunk_distribution_is_bimodal(self):
        spec = TaskSpec()
        arrays = generate_arrays(spec, 10_000, seed=2)
        dev = lateral_deviation(arrays["actions"], spec.layout)
        assert calc.bimodality_coefficient(dev) > calc.BIMODAL_THRESHOLD

    def test_nearest_mode_recovers_labels(self):
        spec = TaskSpec()
        arrays = generate_arrays(spec, 200, seed=3)
        assert np.mean(nearest_mode(arrays["actions"], spec) == arrays["mode"]) > 0.99

    def test_sixd_rotation_blocks_are_rotations(self):
        spec = TaskSpec(d=20)
        actions = generate_arrays(spec, 3, seed=0)["actions"]
        for rs in spec.layout.rotation_slices():
            check_rotation(sixd_to_matrix(actions[..., rs]), tol=1e-6)

    def test_rejects_empty_dataset(self):
        with pytest.raises(ConfigError):
            generate_arrays(TaskSpec(), 0)


class TestNormStats:
    def test_normalize_round_trip(self):
        chunks, norm = generate_dataset(TaskSpec(), 64, seed=0)
        actions = stack_chunks(chunks)["actions"]
        z = norm.normalize(actions)
        np.testing.assert_allclose(z.reshape(-1, 14).mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(norm.denormalize(z), actions, atol=1e-12)

    def test_degenerate_dimension_clamped(self, caplog):
        actions = np.zeros((4, 3, 2))
        actions[..., 0] = np.arange(12).reshape(4, 3)
        norm = NormStats.from_actions(actions)
        assert norm.scale[1] == SCALE_EPS
        assert "Clamped" in caplog.text

    def test_save_load(self, tmp_path):
        _, norm = generate_dataset(TaskSpec(), 16, seed=0)
        norm.save(tmp_path / "norm.yaml")
        again = NormStats.load(tmp_path / "norm.yaml")
        np.testing.assert_allclose(again.mean, norm.mean)
        np.testing.assert_allclose(again.hi, norm.hi)

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ConfigError):
            NormStats(np.zeros(2), np.array([1.0, 0.0]))


class TestRecords:
    def test_chunk_record_round_trip(self):
        chunks, _ = generate_dataset(TaskSpec(), 2, seed=0)
        again = record_to_chunk(chunk_to_record(chunks[1], "k1"))
        np.testing.assert_array_equal(again.actions, chunks[1].actions)
        np.testing.assert_array_equal(again.context, chunks[1].context)
        assert (again.instruction_id, again.mode_id) == (chunks[1].instruction_id, chunks[1].mode_id)

    def test_through_shards(self, tmp_path):
        chunks, _ = generate_dataset(TaskSpec(), 10, seed=0)
        paths = write_shards(chunks_to_records(chunks, "train"), 4, tmp_path)
        loaded = [record_to_chunk(r) for p in paths for r in read_shard(p)]
        assert len(loaded) == 10
        np.testing.assert_array_equal(stack_chunks(loaded)["goal"], stack_chunks(chunks)["goal"])
