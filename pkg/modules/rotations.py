"""
Rotation representations used by action chunks.

Axis-angle vectors (3 floats) are what the generator produces; the 6D form
(first two matrix columns) is the continuous representation stored when the
action width allows it. Rodrigues conversions go through scipy's Rotation.
"""

import logging

import numpy as np
from scipy.spatial.transform import Rotation

from core.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


def axis_angle_to_matrix(rotvec) -> np.ndarray:
    """(..., 3) rotation vectors -> (..., 3, 3) matrices."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    if rotvec.shape[-1] != 3:
        raise DimensionError(f"axis-angle needs 3 components, got {rotvec.shape[-1]}")
    lead = rotvec.shape[:-1]
    mats = Rotation.from_rotvec(np.array(rotvec.reshape(-1, 3))).as_matrix()
    return mats.reshape(lead + (3, 3))


def matrix_to_axis_angle(mats) -> np.ndarray:
    mats = np.asarray(mats, dtype=np.float64)
    lead = mats.shape[:-2]
    return Rotation.from_matrix(mats.reshape(-1, 3, 3)).as_rotvec().reshape(lead + (3,))


def matrix_to_6d(mats) -> np.ndarray:
    """(..., 3, 3) -> (..., 6): column 0 then column 1."""
    mats = np.asarray(mats, dtype=np.float64)
    return np.concatenate([mats[..., :, 0], mats[..., :, 1]], axis=-1)


def sixd_to_matrix(sixd) -> np.ndarray:
    """Gram-Schmidt reconstruction of a rotation from its 6D block."""
    sixd = np.asarray(sixd, dtype=np.float64)
    if sixd.shape[-1] != 6:
        raise DimensionError(f"6D rotation needs 6 components, got {sixd.shape[-1]}")
    a1, a2 = sixd[..., :3], sixd[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 == 0):
        raise ContractError("6D rotation block has a zero first column")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 == 0):
        raise ContractError("6D rotation block has parallel columns")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rotation_block(axis, angle: float) -> np.ndarray:
    """6D representation of the rotation by angle (rad) about axis."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        if angle != 0.0:
            raise ContractError(f"zero rotation axis with nonzero angle {angle}")
        return matrix_to_6d(np.eye(3))
    return matrix_to_6d(axis_angle_to_matrix(axis / norm * angle))


def check_rotation(mats, tol: float = ORTHO_TOL):
    """Raise ContractError unless every matrix is orthonormal with det +1."""
    mats = np.asarray(mats, dtype=np.float64)
    if mats.shape[-2:] != (3, 3):
        raise DimensionError(f"expected (..., 3, 3) rotations, got {mats.shape}")
    gram = np.einsum("...ji,...jk->...ik", mats, mats)
    err = np.max(np.abs(gram - np.eye(3)))
    if err > tol:
        raise ContractError(f"matrix not orthonormal (max |R^T R - I| = {err:.2e})")
    det = np.linalg.det(mats)
    if np.any(np.abs(det - 1.0) > tol):
        raise ContractError("matrix has determinant != +1")


def random_rotations(rng, n: int) -> np.ndarray:
    """n uniformly distributed rotation matrices."""
    return Rotation.random(n, rng).as_matrix()


def to_matrix(block) -> np.ndarray:
    """Axis-angle (3) or 6D (6) blocks -> rotation matrices."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape[-1] == 3:
        return axis_angle_to_matrix(block)
    if block.shape[-1] == 6:
        return sixd_to_matrix(block)
    raise DimensionError(f"rotation block must have 3 or 6 components, got {block.shape[-1]}")
