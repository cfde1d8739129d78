from pathlib import Path

import numpy as np
import pytest
from conftest import straight_pinch_pose

from app.config import Q1Params, TtaConfig, load_run_config
from app.kinematics.forward import forward_kinematics, keypoint_positions
from app.metrics.quality import pen_depth
from app.metrics.selection import grasp_metrics, set_ratios
from app.models import GraspSet, HandPose
from app.tta.refine import SUMMARY_COLUMNS, TRACE_COLUMNS, refine, refine_set, refine_with_outcome
from app.training.targets import generate_targets
from app.training.toy import load_objects

# toy-scale weights: pen is a mean of squared metres, so it needs a large alpha to lead
TOY = dict(steps=60, step_size=0.002, alpha_pen=2e6, alpha_dist=3.0, alpha_spen=5.0)
FAR = HandPose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.25, 0.25, 0.25]), np.zeros(2))
TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy_run.json"
SUITE_TTA = dict(steps=100, step_size=0.04, alpha_pen=2e6, alpha_dist=3.0, alpha_spen=5.0)


def pad_distance(model, pose, cloud):
    points = keypoint_positions(model, forward_kinematics(model, pose))
    distances, _ = cloud.nearest(points[[model.keypoint_names.index("finger_a_pad")]])
    return float(distances[0])


def test_zero_loss_leaves_pose_unchanged(pinch, sphere):
    outcome = refine_with_outcome(pinch, FAR, sphere, TtaConfig(**TOY))
    assert outcome.pose is FAR
    assert outcome.stop_reason == "zero gradient"
    assert outcome.trace.shape[0] == 1
    assert outcome.final_loss == 0.0


def test_translation_frozen_when_beta_is_zero(pinch, sphere):
    start = straight_pinch_pose()
    pose, trace = refine(pinch, start, sphere, TtaConfig(**TOY, beta_t=0.0))
    np.testing.assert_array_equal(pose.translation, start.translation)
    assert trace.columns.tolist() == TRACE_COLUMNS
    assert trace["step"].tolist() == list(range(trace.shape[0]))


def test_refinement_reduces_penetration_and_keeps_contact(pinch, sphere):
    start = straight_pinch_pose()
    assert pad_distance(pinch, start, sphere) < 0.01
    outcome = refine_with_outcome(pinch, start, sphere, TtaConfig(**TOY))
    assert outcome.final_loss < outcome.initial_loss
    trace = outcome.trace
    best = trace.loc[trace["loss"].idxmin()]
    assert best["max_penetration_cm"] < trace.loc[0, "max_penetration_cm"]
    assert pad_distance(pinch, outcome.pose, sphere) < 0.02
    assert np.all(outcome.pose.joints >= pinch.joint_lower)
    assert np.all(outcome.pose.joints <= pinch.joint_upper)
    assert np.linalg.norm(outcome.pose.rotation) == pytest.approx(1.0)


def test_best_loss_never_exceeds_initial(pinch, sphere):
    outcome = refine_with_outcome(pinch, straight_pinch_pose(), sphere, TtaConfig(**dict(TOY, step_size=0.05)))
    assert outcome.final_loss <= outcome.initial_loss
    assert outcome.final_loss == pytest.approx(outcome.trace["loss"].min())


@pytest.mark.parametrize("mode, silent", [("tm", "dist_loss"), ("gdis", "spen_loss")])
def test_ablation_modes_drop_their_term(pinch, sphere, mode, silent):
    _, trace = refine(pinch, straight_pinch_pose(), sphere, TtaConfig(**TOY, mode=mode))
    assert (trace[silent] == 0.0).all()


def test_vanilla_mode_moves_translation(pinch, sphere):
    start = straight_pinch_pose()
    pose, _ = refine(pinch, start, sphere, TtaConfig(**TOY, mode="vanilla"))
    assert not np.array_equal(pose.translation, start.translation)


def test_refine_set_keeps_order_and_is_deterministic(pinch, sphere):
    grasps = GraspSet((straight_pinch_pose(), FAR), hand="pinch2", object_id="sphere", metadata=({"k": 1}, {}))
    config = TtaConfig(**TOY)
    refined, summary, trace = refine_set(pinch, grasps, sphere, config)
    assert refined.sources == ("ab-tta", "ab-tta")
    assert refined.metadata[0]["k"] == 1
    assert refined[1] is FAR
    assert summary.columns.tolist() == SUMMARY_COLUMNS
    assert summary["index"].tolist() == [0, 1]
    assert summary.loc[1, "stop_reason"] == "zero gradient"
    assert trace.columns.tolist()[0] == "grasp"

    again, summary_again, trace_again = refine_set(pinch, grasps, sphere, config)
    np.testing.assert_array_equal(again[0].as_vector(), refined[0].as_vector())
    assert summary_again.equals(summary)
    assert trace_again.equals(trace)


def test_refine_set_parallel_matches_serial(pinch, sphere, monkeypatch):
    grasps = GraspSet((straight_pinch_pose(), FAR))
    config = TtaConfig(**dict(TOY, steps=10))
    serial, _, _ = refine_set(pinch, grasps, sphere, config)
    monkeypatch.setenv("GRASP_WORKERS", "2")
    parallel, _, _ = refine_set(pinch, grasps, sphere, config)
    np.testing.assert_array_equal(parallel[0].as_vector(), serial[0].as_vector())


def squeeze(model, pose, cloud, depth_cm=0.6, step=0.02, limit=30):
    """Close the fingers past the target until the object sits depth_cm inside the hand."""
    joints = pose.joints.copy()
    for _ in range(limit):
        if pen_depth(model, HandPose(pose.rotation, pose.translation, joints), cloud) >= depth_cm:
            break
        joints = np.minimum(model.joint_upper, joints + step)
    return HandPose(pose.rotation, pose.translation, joints)


@pytest.fixture(scope="module")
def penetrating_suite(pinch):
    config = load_run_config(TOY_CONFIG)
    suite = []
    for cloud in load_objects(config).values():
        for pose in generate_targets(pinch, cloud, 12, config.seed, config.tta, config.q1):
            suite.append((squeeze(pinch, pose, cloud), cloud))
    return suite


def suite_metrics(model, suite, config):
    params = Q1Params(directions=512)
    before, after = [], []
    for pose, cloud in suite:
        refined = refine_with_outcome(model, pose, cloud, config).pose
        before.append(grasp_metrics(model, pose, cloud, params))
        after.append(grasp_metrics(model, refined, cloud, params))
    return before, after


@pytest.mark.slow
def test_ab_tta_repairs_penetrating_grasps(pinch, penetrating_suite):
    assert len(penetrating_suite) >= 30
    before, after = suite_metrics(pinch, penetrating_suite, TtaConfig(**SUITE_TTA))
    assert np.mean([m.max_penetration_cm for m in after]) < np.mean([m.max_penetration_cm for m in before])
    assert np.mean([m.q1 for m in after]) > np.mean([m.q1 for m in before])
    held = [a.contact_count >= 3 for b, a in zip(before, after) if b.contact_count >= 3]
    assert len(held) >= 30 and np.mean(held) >= 0.8


@pytest.mark.slow
def test_vanilla_distance_pushes_the_hand_off_the_object(pinch, penetrating_suite):
    _, after = suite_metrics(pinch, penetrating_suite, TtaConfig(**SUITE_TTA, mode="vanilla"))
    eta_np, _ = set_ratios(after)
    assert eta_np == 100.0
    assert np.mean([m.contact_count for m in after]) == 0.0
