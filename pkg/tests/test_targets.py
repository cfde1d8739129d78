import logging

import numpy as np
import pytest
from conftest import straight_pinch_pose
from scipy.spatial.transform import Rotation

from app.config import Q1Params, TtaConfig
from app.errors import TargetGenerationError
from app.geometry.synth import synth_object
from app.kinematics.forward import forward_kinematics
from app.metrics.quality import contact_count, pen_depth, q1
from app.models import HandPose
from app.training import targets as targets_module
from app.training.targets import (
    CLOSING_STEPS,
    MIN_CONTACTS,
    TARGET_ATTEMPTS,
    acceptable,
    approach_pose,
    back_off,
    close_hand,
    generate_targets,
    scalar_first,
)

BALL = synth_object("sphere", 0.03, 1024, seed=0, name="ball")
TOY_TTA = TtaConfig(steps=100, step_size=0.04, alpha_pen=2e6, alpha_dist=3.0, alpha_spen=5.0)
PARAMS = Q1Params(directions=256)


def assert_meets_target_criteria(model, pose, cloud, params):
    frames = forward_kinematics(model, pose)
    assert contact_count(model, pose, cloud, params.contact_threshold, frames) >= MIN_CONTACTS
    assert pen_depth(model, pose, cloud, frames) <= params.penetration_threshold * 100.0
    assert q1(model, pose, cloud, params) > 0.0


def test_scalar_first_has_non_negative_w(rng):
    rotations = Rotation.random(50, random_state=rng)
    quaternions = scalar_first(rotations)
    assert np.all(quaternions[:, 0] >= 0.0)
    back = Rotation.from_quat(quaternions[:, [1, 2, 3, 0]])
    assert np.allclose((back.inv() * rotations).magnitude(), 0.0, atol=1e-12)


def test_approach_pose_faces_the_object(pinch):
    direction = np.array([0.0, 1.0, 0.0])
    pose = approach_pose(pinch, BALL, direction, roll=0.3)
    frames = forward_kinematics(pinch, pose)
    np.testing.assert_allclose(frames.hand_rotation @ pinch.grasp_approach, -direction, atol=1e-12)
    np.testing.assert_allclose(frames.hand_rotation @ pinch.grasp_center + pose.translation, BALL.centroid, atol=1e-12)
    np.testing.assert_array_equal(pose.joints, pinch.joint_lower)


def test_back_off_clears_penetration(pinch, sphere):
    start = straight_pinch_pose()
    assert pen_depth(pinch, start, sphere) > 0.0
    pose = back_off(pinch, start, sphere)
    assert pen_depth(pinch, pose, sphere) == 0.0
    # retreat happens along -approach only
    assert pose.translation[0] == 0.0 and pose.translation[1] == 0.0
    assert pose.translation[2] < 0.0


def test_close_hand_without_object_reaches_upper_limits(pinch, sphere):
    far = HandPose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.25, 0.25, 0.25]), pinch.joint_lower.copy())
    closed = close_hand(pinch, far, sphere)
    np.testing.assert_allclose(closed.joints, pinch.joint_upper)


def test_close_hand_stops_one_step_before_penetration(pinch):
    pose = back_off(pinch, approach_pose(pinch, BALL, np.array([0.0, 0.0, -1.0]), roll=0.0), BALL)
    closed = close_hand(pinch, pose, BALL)
    assert pen_depth(pinch, closed, BALL) == 0.0
    for k in range(pinch.dof):
        grid = np.linspace(pinch.joint_lower[k], pinch.joint_upper[k], CLOSING_STEPS)
        index = int(np.argmin(np.abs(grid - closed.joints[k])))
        assert grid[index] == pytest.approx(closed.joints[k])
        if index + 1 < CLOSING_STEPS:
            bumped = closed.joints.copy()
            bumped[k] = grid[index + 1]
            assert pen_depth(pinch, HandPose(closed.rotation, closed.translation, bumped), BALL) > 0.0


def test_acceptable():
    params = Q1Params()
    good = {"contacts": 3, "penetration_cm": 0.5, "q1": 0.1}
    assert acceptable(good, params)
    assert not acceptable({**good, "contacts": 2}, params)
    assert not acceptable({**good, "penetration_cm": 0.51}, params)
    assert not acceptable({**good, "q1": 0.0}, params)
    # clouds without normals carry no q1 entry
    assert acceptable({"contacts": 4, "penetration_cm": 0.0}, params)


def test_generate_targets_meet_the_target_criteria(pinch):
    targets = generate_targets(pinch, BALL, 3, seed=0, config=TOY_TTA, params=PARAMS)
    assert len(targets) == 3
    assert targets.sources == ("target",) * 3
    assert targets.object_id == "ball" and targets.hand == "pinch2"
    for pose, meta in zip(targets, targets.metadata):
        pose.validate(pinch)
        assert set(meta) == {"contacts", "penetration_cm", "tta_final_loss", "attempts", "q1"}
        assert 1 <= meta["attempts"] <= TARGET_ATTEMPTS
        assert_meets_target_criteria(pinch, pose, BALL, PARAMS)


def test_generate_targets_is_deterministic(pinch):
    first = generate_targets(pinch, BALL, 2, seed=7, config=TOY_TTA, params=PARAMS)
    second = generate_targets(pinch, BALL, 2, seed=7, config=TOY_TTA, params=PARAMS)
    assert len(first) == len(second)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.as_vector(), b.as_vector())


def test_generate_targets_drops_directions_that_exhaust_their_attempts(pinch, monkeypatch, caplog):
    calls = []

    def reject_first_direction(metadata, params):
        calls.append(metadata["attempts"])
        return len(calls) > TARGET_ATTEMPTS

    monkeypatch.setattr(targets_module, "acceptable", reject_first_direction)
    with caplog.at_level(logging.WARNING):
        targets = generate_targets(pinch, BALL, 3, seed=0, config=TtaConfig(steps=2), params=PARAMS)
    assert len(targets) == 2
    assert calls[:TARGET_ATTEMPTS] == list(range(1, TARGET_ATTEMPTS + 1))
    assert [m["attempts"] for m in targets.metadata] == [1, 1]
    assert "No acceptable target" in caplog.text


def test_generate_targets_raises_when_nothing_is_acceptable(pinch, monkeypatch):
    monkeypatch.setattr(targets_module, "TARGET_ATTEMPTS", 2)
    unreachable = Q1Params(contact_threshold=1e-9, directions=64)
    with pytest.raises(TargetGenerationError, match="no acceptable target grasp on 'ball'"):
        generate_targets(pinch, BALL, 2, seed=0, config=TtaConfig(steps=2), params=unreachable)


@pytest.mark.slow
@pytest.mark.parametrize(
    "kind, size",
    [("sphere", 0.03), ("box", (0.025, 0.025, 0.025)), ("cylinder", (0.025, 0.04))],
)
def test_toy_targets_all_meet_the_target_criteria(pinch, kind, size):
    cloud = synth_object(kind, size, 1024, seed=0, name=kind)
    targets = generate_targets(pinch, cloud, 16, seed=0, config=TOY_TTA, params=PARAMS)
    assert len(targets) >= 14
    for pose in targets:
        assert_meets_target_criteria(pinch, pose, cloud, PARAMS)
