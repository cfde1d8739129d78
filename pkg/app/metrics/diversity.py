import logging

import numpy as np
from scipy.spatial.transform import Rotation

from app.geometry.synth import fibonacci_sphere
from app.kinematics.normalize import normalize_joints, normalize_translation
from app.models import GraspSet, HandModel

logger = logging.getLogger(__name__)

DEFAULT_BINS = 16
EULER_RANGES = np.array([[-np.pi, np.pi], [-np.pi / 2, np.pi / 2], [-np.pi, np.pi]])


def _occupancy(keys, bins):
    distinct = len(set(map(tuple, np.asarray(keys).reshape(len(keys), -1).tolist())))
    return min(100.0, 100.0 * distinct / bins)


def quantize(values, lower, upper, bins):
    """Bin index in [0, bins - 1] of each value over [lower, upper]."""
    scaled = (np.asarray(values, dtype=float) - lower) / (upper - lower)
    return np.clip(np.floor(scaled * bins), 0, bins - 1).astype(int)


def translation_bins(grasps: GraspSet, centroid, bins=DEFAULT_BINS):
    """Fibonacci direction bin (highest cosine) of each centroid-relative translation."""
    directions = fibonacci_sphere(bins)
    relative = np.array([g.translation for g in grasps]) - np.asarray(centroid, dtype=float)
    lengths = np.linalg.norm(relative, axis=1)
    cosines = (relative @ directions.T) / np.where(lengths > 0.0, lengths, 1.0)[:, None]
    return np.where(lengths > 0.0, np.argmax(cosines, axis=1), 0)


def delta_t(grasps: GraspSet, centroid, bins=DEFAULT_BINS) -> float:
    if len(grasps) == 0:
        return 0.0
    return _occupancy(translation_bins(grasps, centroid, bins), bins)


def euler_angles(grasps: GraspSet):
    """Intrinsic XYZ Euler angles (scalar-first quaternions converted for scipy)."""
    quaternions = np.array([g.rotation for g in grasps])
    return Rotation.from_quat(quaternions[:, [1, 2, 3, 0]]).as_euler("XYZ")


def delta_r(grasps: GraspSet, bins=DEFAULT_BINS) -> float:
    if len(grasps) == 0:
        return 0.0
    angles = euler_angles(grasps)
    keys = np.stack(
        [quantize(angles[:, k], EULER_RANGES[k, 0], EULER_RANGES[k, 1], bins) for k in range(3)], axis=1
    )
    return _occupancy(keys, bins)


def delta_q(model: HandModel, grasps: GraspSet, bins=DEFAULT_BINS) -> float:
    if len(grasps) == 0:
        return 0.0
    joints = np.array([g.joints for g in grasps]).reshape(len(grasps), model.dof)
    keys = quantize(joints, model.joint_lower, model.joint_upper, bins)
    return _occupancy(keys, bins)


def pose_vectors(model: HandModel, grasps: GraspSet) -> np.ndarray:
    """Flattened (sign-aligned r, 2 n_t - 1, 2 n_q - 1) per grasp."""
    rotations = np.array([g.rotation for g in grasps])
    reference = rotations[0]
    rotations = np.where((rotations @ reference < 0.0)[:, None], -rotations, rotations)
    translations = np.clip(normalize_translation(model, np.array([g.translation for g in grasps])), 0.0, 1.0)
    joints = np.clip(
        normalize_joints(model, np.array([g.joints for g in grasps]).reshape(len(grasps), model.dof)), 0.0, 1.0
    )
    return np.hstack([rotations, 2.0 * translations - 1.0, 2.0 * joints - 1.0])


def pose_similarity(model: HandModel, grasps: GraspSet) -> float:
    """Mean cosine similarity over unordered pairs of pose vectors; 1.0 for a single grasp."""
    if len(grasps) < 2:
        return 1.0
    vectors = pose_vectors(model, grasps)
    unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    cosines = unit @ unit.T
    upper = np.triu_indices(len(grasps), k=1)
    return float(np.mean(cosines[upper]))
