import numpy as np
import pytest
from conftest import random_pose

from app.geometry.synth import fibonacci_sphere
from app.metrics.diversity import (
    delta_q,
    delta_r,
    delta_t,
    euler_angles,
    pose_similarity,
    quantize,
    translation_bins,
)
from app.models import GraspSet, HandPose


def copies(pose, count=16):
    return GraspSet(tuple(pose for _ in range(count)))


def test_identical_grasps_fill_one_bin(shadow, rng):
    grasps = copies(random_pose(shadow, rng))
    assert delta_t(grasps, np.zeros(3)) == pytest.approx(6.25)
    assert delta_r(grasps) == pytest.approx(6.25)
    assert delta_q(shadow, grasps) == pytest.approx(6.25)


def test_fibonacci_placement_fills_every_direction_bin(pinch):
    centroid = np.array([0.3, 0.0, 0.0])
    poses = tuple(
        HandPose(np.array([1.0, 0.0, 0.0, 0.0]), centroid + 0.1 * d, np.zeros(2)) for d in fibonacci_sphere(16)
    )
    grasps = GraspSet(poses)
    assert translation_bins(grasps, centroid).tolist() == list(range(16))
    assert delta_t(grasps, centroid) == 100.0


def test_empty_set():
    empty = GraspSet(())
    assert delta_t(empty, np.zeros(3)) == 0.0
    assert delta_r(empty) == 0.0


def test_quantize_clips_to_range():
    assert quantize([-1.0, 0.0, 0.49, 0.5, 1.0, 2.0], 0.0, 1.0, 4).tolist() == [0, 0, 1, 2, 3, 3]


def test_euler_angles_of_identity():
    grasps = GraspSet((HandPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.zeros(2)),))
    np.testing.assert_allclose(euler_angles(grasps), [[0.0, 0.0, 0.0]], atol=1e-15)


def test_similarity(pinch, rng):
    pose = random_pose(pinch, rng)
    assert pose_similarity(pinch, GraspSet((pose,))) == 1.0
    assert pose_similarity(pinch, copies(pose, 4)) == pytest.approx(1.0)
    varied = GraspSet(tuple(random_pose(pinch, rng, spread=0.2) for _ in range(16)))
    assert pose_similarity(pinch, varied) < 0.99


def test_similarity_ignores_quaternion_sign(pinch, rng):
    pose = random_pose(pinch, rng)
    flipped = HandPose(-pose.rotation, pose.translation, pose.joints)
    assert pose_similarity(pinch, GraspSet((pose, flipped))) == pytest.approx(1.0)
