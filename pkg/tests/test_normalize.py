import logging

import numpy as np
import pytest
from conftest import random_pose

from app.kinematics.normalize import (
    denormalize_pose,
    normalize_pose,
    pose_gradient_to_state,
    pose_to_state,
    squash,
    state_to_pose,
)
from app.models import HandPose, NormalizedPose


def test_round_trip(shadow, rng):
    pose = random_pose(shadow, rng)
    back = denormalize_pose(shadow, normalize_pose(shadow, pose))
    np.testing.assert_allclose(back.translation, pose.translation, atol=1e-12)
    np.testing.assert_allclose(back.joints, pose.joints, atol=1e-12)
    np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-15)


def test_limits_map_to_unit_interval(pinch):
    lower = HandPose(np.array([1.0, 0, 0, 0]), pinch.workspace_lower, pinch.joint_lower)
    upper = HandPose(np.array([1.0, 0, 0, 0]), pinch.workspace_upper, pinch.joint_upper)
    np.testing.assert_allclose(normalize_pose(pinch, lower).as_vector()[4:], 0.0, atol=1e-15)
    np.testing.assert_allclose(normalize_pose(pinch, upper).as_vector()[4:], 1.0, atol=1e-15)


def test_out_of_box_values_are_clipped_and_flagged(pinch, caplog):
    pose = HandPose(np.array([1.0, 0, 0, 0]), [0.5, 0.0, 0.0], [2.0, 0.0])
    with caplog.at_level(logging.WARNING):
        normalized = normalize_pose(pinch, pose)
    assert normalized.is_saturated
    assert normalized.saturated.tolist() == [True, False, False, True, False]
    assert normalized.translation[0] == 1.0
    assert normalized.joints[0] == 1.0
    assert "clipped" in caplog.text


def test_denormalized_rotation_is_unit(pinch):
    normalized = squash(pinch, np.array([2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
    pose = denormalize_pose(pinch, normalized)
    np.testing.assert_allclose(pose.rotation, [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(pose.translation, 0.0, atol=1e-15)


def test_denormalize_is_affine_and_squash_bounds_states(pinch):
    beyond = NormalizedPose(np.array([1.0, 0.0, 0.0, 0.0]), np.full(3, 1.5), np.array([-0.5, 1.0]))
    pose = denormalize_pose(pinch, beyond)
    np.testing.assert_allclose(pose.translation, pinch.workspace_lower + 1.5 * pinch.workspace_range)
    assert pose.joints[0] == pytest.approx(pinch.joint_lower[0] - 0.5 * pinch.joint_range[0])
    state = np.r_[1.0, 0.0, 0.0, 0.0, np.full(5, 50.0)]
    bounded = state_to_pose(pinch, state)
    assert np.all(bounded.translation <= pinch.workspace_upper)
    assert np.all(bounded.joints <= pinch.joint_upper)


def test_state_round_trip(shadow, rng):
    pose = random_pose(shadow, rng)
    back = state_to_pose(shadow, pose_to_state(shadow, pose))
    np.testing.assert_allclose(back.as_vector(), pose.as_vector(), atol=1e-10)


def test_any_state_decodes_inside_limits(shadow, rng):
    for _ in range(20):
        state = rng.normal(scale=20.0, size=shadow.param_count)
        pose = state_to_pose(shadow, state)
        assert np.all(pose.joints >= shadow.joint_lower)
        assert np.all(pose.joints <= shadow.joint_upper)
        assert np.linalg.norm(pose.rotation) == pytest.approx(1.0)


def test_state_gradient_chain_rule(pinch, rng):
    state = rng.normal(size=pinch.param_count)
    weights = rng.normal(size=pinch.param_count)

    def objective(s):
        return float(weights @ state_to_pose(pinch, s).as_vector())

    # d/dpose of weights . pose, projected on the rotation tangent space
    rotation = state_to_pose(pinch, state).rotation
    pose_gradient = weights.copy()
    pose_gradient[:4] -= rotation * (rotation @ weights[:4])
    analytic = pose_gradient_to_state(pinch, state, pose_gradient)

    numeric = np.zeros_like(state)
    for k in range(state.shape[0]):
        step = np.zeros_like(state)
        step[k] = 1e-6
        numeric[k] = (objective(state + step) - objective(state - step)) / 2e-6
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)
