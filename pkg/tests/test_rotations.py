import numpy as np
import pytest

from core.errors import ContractError, DimensionError
from modules.eval_bench import rotation_geodesic
from modules.rotations import (
    axis_angle_to_matrix,
    check_rotation,
    matrix_to_6d,
    matrix_to_axis_angle,
    random_rotations,
    rotation_block,
    sixd_to_matrix,
    to_matrix,
)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


class TestConversions:
    def test_sixd_recovers_matrix(self, rng):
        mats = random_rotations(rng, 50)
        np.testing.assert_allclose(sixd_to_matrix(matrix_to_6d(mats)), mats, atol=1e-12)

    def test_gram_schmidt_orthonormalises(self, rng):
        noisy = matrix_to_6d(random_rotations(rng, 20)) + 0.05 * rng.standard_normal((20, 6))
        check_rotation(sixd_to_matrix(noisy))

    def test_axis_angle_matches_rodrigues(self):
        R = axis_angle_to_matrix(np.array([0.0, 0.0, np.pi / 2]))
        np.testing.assert_allclose(R @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_axis_angle_roundtrip_keeps_leading_shape(self, rng):
        rotvec = rng.uniform(-1.0, 1.0, size=(4, 5, 3))
        mats = axis_angle_to_matrix(rotvec)
        assert mats.shape == (4, 5, 3, 3)
        np.testing.assert_allclose(matrix_to_axis_angle(mats), rotvec, atol=1e-10)

    def test_to_matrix_dispatches_on_width(self, rng):
        mats = random_rotations(rng, 3)
        np.testing.assert_allclose(to_matrix(matrix_to_6d(mats)), mats, atol=1e-12)
        np.testing.assert_allclose(to_matrix(matrix_to_axis_angle(mats)), mats, atol=1e-10)
        with pytest.raises(DimensionError):
            to_matrix(np.zeros((2, 4)))

    def test_degenerate_sixd_blocks(self):
        with pytest.raises(ContractError):
            sixd_to_matrix(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
        with pytest.raises(ContractError):
            sixd_to_matrix(np.array([1.0, 0.0, 0.0, 2.0, 0.0, 0.0]))

    def test_rotation_block_zero_axis(self):
        np.testing.assert_array_equal(rotation_block([0, 0, 0], 0.0), [1, 0, 0, 0, 1, 0])
        with pytest.raises(ContractError):
            rotation_block([0, 0, 0], 0.3)


class TestGeodesic:
    def test_identity_is_zero(self):
        assert rotation_geodesic(np.eye(3), np.eye(3)) == pytest.approx(0.0)

    def test_ninety_degrees_about_z(self):
        Rz = axis_angle_to_matrix(np.array([0.0, 0.0, np.pi / 2]))
        assert rotation_geodesic(np.eye(3), Rz) == pytest.approx(np.pi / 2)

    def test_accepts_either_block_format(self):
        a = rotation_block([1.0, 0.0, 0.0], 0.4)
        b = np.array([0.0, 0.0, 0.0])
        assert rotation_geodesic(a, b) == pytest.approx(0.4)

    def test_non_orthonormal_matrix_rejected(self):
        with pytest.raises(ContractError):
            rotation_geodesic(np.eye(3) * 1.1, np.eye(3))

    def test_reflection_rejected(self):
        with pytest.raises(ContractError):
            check_rotation(np.diag([1.0, 1.0, -1.0]))
