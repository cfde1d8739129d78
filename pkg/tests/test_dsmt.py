from dataclasses import replace

import numpy as np
import pytest
from conftest import random_pose, straight_pinch_pose

from app.config import CostWeights, LossWeights, ObjectSpec, RunConfig, StageSchedule
from app.kinematics.normalize import pose_to_state
from app.matching.hungarian import HungarianMatcher
from app.metrics.diversity import pose_similarity
from app.models import GraspSet
from app.training import dsmt as dsmt_module
from app.training.dsmt import (
    TRAIN_COLUMNS,
    GraspTable,
    TrainTrace,
    dmt_epoch,
    gradient_step,
    init_table,
    merged_trace,
    run_dsmt,
    smpt_epoch,
    smw_epoch,
    train_object,
)

REGRESSION_ONLY = LossWeights(chamfer=0.0, spen=0.0)
TINY = StageSchedule(dmt_epochs=3, smw_epochs=2, smpt_epochs=2, steps_per_epoch=5, chamfer_samples=32)


def targets_near(model, cloud, rng, count):
    poses = []
    for _ in range(count):
        pose = random_pose(model, rng, spread=0.02)
        poses.append(type(pose)(pose.rotation, pose.translation + cloud.centroid, pose.joints))
    return GraspSet(tuple(poses), hand=model.name, object_id=cloud.name, sources=tuple("target" for _ in poses))


def test_init_table_is_dispersed(pinch, sphere):
    table = init_table(pinch, sphere, 16, seed=0)
    assert table.states.shape == (16, pinch.param_count)
    grasps = table.grasp_set(pinch)
    vectors = np.array([g.as_vector() for g in grasps])
    assert len(np.unique(vectors.round(9), axis=0)) == 16
    assert pose_similarity(pinch, grasps) < 0.99


def test_init_table_seeds(pinch, sphere):
    assert init_table(pinch, sphere, 1, seed=0).size == 1
    a = init_table(pinch, sphere, 4, seed=0).states
    np.testing.assert_array_equal(a, init_table(pinch, sphere, 4, seed=0).states)
    assert not np.array_equal(a, init_table(pinch, sphere, 4, seed=1).states)
    with pytest.raises(ValueError):
        init_table(pinch, sphere, 0, seed=0)


def test_gradient_step_clips_and_renormalizes(pinch, sphere):
    table = init_table(pinch, sphere, 3, seed=0)
    gradient = np.ones_like(table.states) * 100.0
    stepped = gradient_step(table, gradient, 0.1, 1.0)
    np.testing.assert_allclose(np.linalg.norm(stepped.states[:, :4], axis=1), 1.0)
    moved = stepped.states[:, 4:] - table.states[:, 4:]
    assert np.linalg.norm(moved) <= 0.1 + 1e-12


def test_gradient_step_decay_pulls_rows_toward_the_mean(pinch, sphere):
    table = init_table(pinch, sphere, 4, seed=0)
    stepped = gradient_step(table, np.zeros_like(table.states), 0.1, 1.0, decay=2.0)
    offsets = table.states[:, 4:] - table.states[:, 4:].mean(axis=0)
    np.testing.assert_allclose(stepped.states[:, 4:] - table.states[:, 4:].mean(axis=0), 0.8 * offsets, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(stepped.states[:, :4], axis=1), 1.0)
    plain = gradient_step(table, np.zeros_like(table.states), 0.1, 1.0)
    np.testing.assert_allclose(plain.states, table.states, atol=1e-15)


def test_dmt_epoch_at_targets_is_stationary(pinch, sphere):
    table = init_table(pinch, sphere, 4, seed=0)
    gts = table.grasp_set(pinch, source="target")
    matcher = HungarianMatcher()
    after, assignment = dmt_epoch(pinch, table.copy(), gts, sphere, REGRESSION_ONLY, CostWeights(), TINY, matcher)
    assert assignment.pairs.tolist() == [[i, i] for i in range(4)]
    np.testing.assert_allclose(after.states, table.states, atol=1e-12)
    assert matcher.solves == 1


def test_single_target_moves_one_query(pinch, sphere, rng):
    table = init_table(pinch, sphere, 2, seed=0)
    gts = targets_near(pinch, sphere, rng, 1)
    matcher = HungarianMatcher()
    after, assignment = dmt_epoch(pinch, table.copy(), gts, sphere, REGRESSION_ONLY, CostWeights(), TINY, matcher)
    moved = int(assignment.pairs[0, 0])
    still = 1 - moved
    assert assignment.unmatched_predictions == (still,)
    np.testing.assert_allclose(after.states[still], table.states[still], atol=1e-12)
    assert np.linalg.norm(after.states[moved] - table.states[moved]) > 1e-6


def test_train_object_stages(pinch, sphere, rng):
    gts = targets_near(pinch, sphere, rng, 4)
    result = train_object(pinch, sphere, gts, 4, 0, LossWeights(), CostWeights(), TINY, init_radius=0.1)
    frame = result.trace.to_frame()
    assert frame.columns.tolist() == TRAIN_COLUMNS
    assert frame["epoch"].tolist() == list(range(7))
    assert frame["stage"].tolist() == ["dmt"] * 3 + ["smw"] * 2 + ["smpt"] * 2
    # three dynamic solves and the snapshot; static stages never solve
    assert frame["hungarian_solves"].tolist() == [1, 2, 3, 4, 4, 4, 4]
    assert frame["instability"].iloc[0] == 0.0
    assert (frame.loc[frame["stage"] != "dmt", "instability"] == 0.0).all()
    assert (frame.loc[frame["stage"] != "smpt", "pen_loss"] == 0.0).all()
    assert result.static_assignment is not None
    for pose in result.table.grasp_set(pinch):
        pose.validate(pinch)
        assert np.all(pose.joints >= pinch.joint_lower) and np.all(pose.joints <= pinch.joint_upper)


def test_train_object_reduces_regression_loss(pinch, sphere, rng):
    gts = targets_near(pinch, sphere, rng, 4)
    schedule = StageSchedule(dmt_epochs=6, smw_epochs=0, smpt_epochs=0, steps_per_epoch=10)
    frame = train_object(pinch, sphere, gts, 4, 0, REGRESSION_ONLY, CostWeights(), schedule, 0.1).trace.to_frame()
    assert frame["regress_loss"].iloc[-1] < frame["regress_loss"].iloc[0]


def test_dynamic_ablation_solves_every_epoch(pinch, sphere, rng):
    gts = targets_near(pinch, sphere, rng, 4)
    schedule = StageSchedule(
        dmt_epochs=1, smw_epochs=1, smpt_epochs=1, steps_per_epoch=2, static_matching=False
    )
    frame = train_object(pinch, sphere, gts, 4, 0, REGRESSION_ONLY, CostWeights(), schedule, 0.1).trace.to_frame()
    assert frame["hungarian_solves"].tolist() == [1, 3, 4]


def test_train_trace_requires_consecutive_epochs():
    trace = TrainTrace("o")
    trace.append({"epoch": 0})
    with pytest.raises(ValueError, match="does not follow"):
        trace.append({"epoch": 2})


def test_run_dsmt_is_deterministic(pinch, sphere, rng, monkeypatch):
    spec = ObjectSpec(name="ball", kind="sphere", size=0.03, points=512)
    config = RunConfig(
        seed=0,
        hand="pinch2",
        objects=(spec,),
        queries=3,
        schedule=StageSchedule(dmt_epochs=1, smw_epochs=1, smpt_epochs=1, steps_per_epoch=2),
    )
    clouds = {"ball": sphere}
    targets = {"ball": targets_near(pinch, sphere, rng, 3)}
    first = merged_trace(run_dsmt(pinch, config, clouds, targets))
    monkeypatch.setenv("GRASP_WORKERS", "2")
    second = merged_trace(run_dsmt(pinch, config, clouds, targets))
    assert first.columns.tolist()[0] == "object"
    assert first["object"].unique().tolist() == ["ball"]
    assert first.equals(second)


def test_grasp_table_copy_is_independent(pinch, sphere):
    table = init_table(pinch, sphere, 2, seed=0)
    clone = table.copy()
    clone.states[0, 4] += 1.0
    assert isinstance(clone, GraspTable)
    assert clone.states[0, 4] != table.states[0, 4]


def test_smpt_epoch_uses_the_configured_penetration_weight(pinch, sphere):
    # the straight pinch is its own target, so only the penalty terms move it
    pose = straight_pinch_pose()
    table = GraspTable(sphere.name, pinch.name, pose_to_state(pinch, pose)[None, :])
    gts = GraspSet((pose,), hand=pinch.name, object_id=sphere.name)
    assignment = HungarianMatcher().solve(np.zeros((1, 1)))
    silent = LossWeights(chamfer=0.0, spen=0.0, pen=0.0, distance=0.0)
    schedule = StageSchedule(steps_per_epoch=3)
    unchanged = smpt_epoch(pinch, table.copy(), gts, assignment, sphere, silent, schedule)
    np.testing.assert_allclose(unchanged.states, table.states, atol=1e-12)
    pushed = smpt_epoch(pinch, table.copy(), gts, assignment, sphere, replace(silent, pen=1e3), schedule)
    assert np.linalg.norm(pushed.states - table.states) > 1e-6
    # warm-up ignores the penalty weights
    warm = smw_epoch(pinch, table.copy(), gts, assignment, replace(silent, pen=1e3, distance=1e3), schedule)
    np.testing.assert_allclose(warm.states, table.states, atol=1e-12)


def test_train_object_runs_each_static_stage_epoch(pinch, sphere, rng, monkeypatch):
    calls = []

    def counting(name, function):
        def wrapper(*args, **kwargs):
            calls.append(name)
            return function(*args, **kwargs)

        return wrapper

    monkeypatch.setattr(dsmt_module, "smw_epoch", counting("smw", smw_epoch))
    monkeypatch.setattr(dsmt_module, "smpt_epoch", counting("smpt", smpt_epoch))
    gts = targets_near(pinch, sphere, rng, 4)
    train_object(pinch, sphere, gts, 4, 0, REGRESSION_ONLY, CostWeights(), TINY, init_radius=0.1)
    assert calls == ["smw", "smw", "smpt", "smpt"]
