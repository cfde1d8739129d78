import logging

import numpy as np
from scipy.spatial.transform import Rotation

from app.config import Q1Params, TtaConfig
from app.errors import TargetGenerationError
from app.geometry.synth import fibonacci_sphere
from app.kinematics.forward import forward_kinematics
from app.metrics.quality import contact_count, pen_depth, q1
from app.models import GraspSet, HandModel, HandPose, ObjectCloud
from app.tta.refine import refine_with_outcome

logger = logging.getLogger(__name__)

CLOSING_STEPS = 32
BACKOFF_STEP = 0.005
BACKOFF_LIMIT = 20
TARGET_ATTEMPTS = 8
MIN_CONTACTS = 3


def scalar_first(rotation: Rotation) -> np.ndarray:
    """scipy quaternions (x, y, z, w) as scalar-first with w >= 0."""
    quaternion = rotation.as_quat()[..., [3, 0, 1, 2]]
    return np.where(quaternion[..., :1] < 0.0, -quaternion, quaternion)


def approach_pose(model: HandModel, cloud: ObjectCloud, direction, roll) -> HandPose:
    """Hand placed so its approach axis points along -direction and its grasp centre sits on the centroid."""
    direction = np.asarray(direction, dtype=float)
    align, _ = Rotation.align_vectors([-direction], [model.grasp_approach])
    rotation = Rotation.from_rotvec(-direction * roll) * align
    translation = cloud.centroid - rotation.apply(model.grasp_center)
    return HandPose(scalar_first(rotation), translation, model.joint_lower.copy())


def back_off(model: HandModel, pose: HandPose, cloud: ObjectCloud) -> HandPose:
    """Retreat along the approach axis until the open hand no longer penetrates."""
    approach = forward_kinematics(model, pose).hand_rotation @ model.grasp_approach
    for _ in range(BACKOFF_LIMIT):
        if pen_depth(model, pose, cloud) == 0.0:
            break
        pose = HandPose(pose.rotation, pose.translation - BACKOFF_STEP * approach, pose.joints)
    return pose


def close_hand(model: HandModel, pose: HandPose, cloud: ObjectCloud) -> HandPose:
    """Sweep each joint from its lower limit and keep the last value before the hand penetrates."""
    joints = pose.joints.copy()
    for k in range(model.dof):
        for value in np.linspace(model.joint_lower[k], model.joint_upper[k], CLOSING_STEPS):
            trial = joints.copy()
            trial[k] = value
            candidate = HandPose(pose.rotation, pose.translation, trial)
            if pen_depth(model, candidate, cloud) > 0.0:
                break
            joints = trial
    return HandPose(pose.rotation, pose.translation, joints)


def acceptable(metadata: dict, params: Q1Params) -> bool:
    """Target criteria: enough touching keypoints, shallow penetration and, when measured, force closure."""
    return (
        metadata["contacts"] >= MIN_CONTACTS
        and metadata["penetration_cm"] <= params.penetration_threshold * 100.0
        and metadata.get("q1", 1.0) > 0.0
    )


def generate_targets(
    model: HandModel,
    cloud: ObjectCloud,
    count: int,
    seed: int,
    config: TtaConfig | None = None,
    params: Q1Params | None = None,
) -> GraspSet:
    """Ground-truth grasps for a synthetic object: approach, close, then refine with AB-TTA.

    Each approach direction gets up to TARGET_ATTEMPTS random rolls. A direction whose attempts all
    fail the target criteria is dropped; TargetGenerationError is raised when no direction succeeds.
    """
    config = config or TtaConfig()
    params = params or Q1Params()
    rng = np.random.default_rng(seed)

    poses, metadata, dropped = [], [], 0
    for direction in fibonacci_sphere(count):
        for attempt in range(1, TARGET_ATTEMPTS + 1):
            # Place, retreat out of the object, close the fingers
            roll = rng.uniform(0.0, 2.0 * np.pi)
            pose = close_hand(model, back_off(model, approach_pose(model, cloud, direction, roll), cloud), cloud)

            outcome = refine_with_outcome(model, pose, cloud, config)
            frames = forward_kinematics(model, outcome.pose)
            record = {
                "contacts": contact_count(model, outcome.pose, cloud, params.contact_threshold, frames),
                "penetration_cm": pen_depth(model, outcome.pose, cloud, frames),
                "tta_final_loss": outcome.final_loss,
                "attempts": attempt,
            }
            if cloud.has_normals:
                record["q1"] = q1(model, outcome.pose, cloud, params)
            if acceptable(record, params):
                poses.append(outcome.pose)
                metadata.append(record)
                break
        else:
            dropped += 1
            logger.warning(
                f"No acceptable target along {np.round(direction, 3).tolist()} on '{cloud.name}' "
                f"after {TARGET_ATTEMPTS} attempts"
            )

    if not poses:
        raise TargetGenerationError(f"no acceptable target grasp on '{cloud.name}' in {count} directions")
    logger.info(f"Generated {len(poses)} target grasps on '{cloud.name}' (seed {seed}, {dropped} directions dropped)")
    return GraspSet(
        tuple(poses),
        hand=model.name,
        object_id=cloud.name,
        sources=tuple("target" for _ in poses),
        metadata=tuple(metadata),
    )
