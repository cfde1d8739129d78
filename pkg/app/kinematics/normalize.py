import logging

import numpy as np
from scipy.special import expit, logit

from app.errors import PoseError
from app.models import HandModel, HandPose, NormalizedPose, unit_quaternion

logger = logging.getLogger(__name__)

# Logits are kept away from +-inf so a saturated dimension can still move.
LOGIT_EPSILON = 1e-6


def normalize_translation(model: HandModel, translation) -> np.ndarray:
    return (np.asarray(translation, dtype=float) - model.workspace_lower) / model.workspace_range


def normalize_joints(model: HandModel, joints) -> np.ndarray:
    return (np.asarray(joints, dtype=float) - model.joint_lower) / model.joint_range


def normalize_pose(model: HandModel, pose: HandPose) -> NormalizedPose:
    """Map t and q into [0, 1] per dimension w.r.t. the workspace box and joint limits."""
    if pose.dof != model.dof:
        raise PoseError(f"pose has {pose.dof} joints, hand '{model.name}' has {model.dof}")
    values = np.concatenate([normalize_translation(model, pose.translation), normalize_joints(model, pose.joints)])
    saturated = (values < 0.0) | (values > 1.0)
    if saturated.any():
        names = ["tx", "ty", "tz", *model.joint_names]
        flagged = [names[i] for i in np.flatnonzero(saturated)]
        logger.warning(f"Pose outside the normalization box on {flagged}; values clipped to [0, 1]")
        values = np.clip(values, 0.0, 1.0)
    return NormalizedPose(pose.rotation.copy(), values[:3], values[3:], saturated)


def denormalize_pose(model: HandModel, normalized: NormalizedPose) -> HandPose:
    """Inverse of normalize_pose; the raw rotation 4-vector is L2-normalized.

    Affine only: inputs are expected in [0, 1] and are not clipped or squashed here. Learnable
    states go through squash (logistic on t and q) in state_to_pose before reaching this map.
    """
    if normalized.joints.shape[0] != model.dof:
        raise PoseError(
            f"normalized pose has {normalized.joints.shape[0]} joints, hand '{model.name}' has {model.dof}"
        )
    translation = model.workspace_lower + normalized.translation * model.workspace_range
    joints = model.joint_lower + normalized.joints * model.joint_range
    return HandPose(unit_quaternion(normalized.rotation), translation, joints)


def squash(model: HandModel, state) -> NormalizedPose:
    """Head-output squashing: raw rotation, logistic over the translation and joint logits."""
    state = np.asarray(state, dtype=float)
    if state.shape[0] != model.param_count:
        raise PoseError(f"state has {state.shape[0]} entries, expected {model.param_count}")
    values = expit(state[4:])
    return NormalizedPose(state[:4], values[:3], values[3:])


def unsquash(model: HandModel, normalized: NormalizedPose) -> np.ndarray:
    """Logit-space state for a normalized pose (inverse of squash)."""
    values = np.clip(
        np.concatenate([normalized.translation, normalized.joints]), LOGIT_EPSILON, 1.0 - LOGIT_EPSILON
    )
    return np.concatenate([normalized.rotation, logit(values)])


def state_to_pose(model: HandModel, state) -> HandPose:
    return denormalize_pose(model, squash(model, state))


def pose_to_state(model: HandModel, pose: HandPose) -> np.ndarray:
    return unsquash(model, normalize_pose(model, pose))


def pose_gradient_to_state(model: HandModel, state, gradient) -> np.ndarray:
    """Chain a gradient over (r, t, q) back to the (raw r, logit) state.

    The rotation block is already an ambient gradient of the L2-normalized quaternion;
    it is rescaled by 1/|r| for raw 4-vectors of non-unit length.
    """
    state = np.asarray(state, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    out = np.empty_like(gradient)
    out[:4] = gradient[:4] / np.linalg.norm(state[:4])
    values = expit(state[4:])
    ranges = np.concatenate([model.workspace_range, model.joint_range])
    out[4:] = gradient[4:] * ranges * values * (1.0 - values)
    return out


def pose_gradient_to_normalized(model: HandModel, gradient) -> np.ndarray:
    """Gradient over (r, t, q) expressed over (r, n_t, n_q) for a unit-norm r."""
    gradient = np.asarray(gradient, dtype=float)
    ranges = np.concatenate([np.ones(4), model.workspace_range, model.joint_range])
    return gradient * ranges
