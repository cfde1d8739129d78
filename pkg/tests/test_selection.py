import numpy as np
import pytest
from conftest import straight_pinch_pose

from app.config import Q1Params
from app.metrics.selection import evaluate_set, report_frame, select_top_k, set_ratios
from app.models import GraspMetrics, GraspSet, HandPose


def far_pose(offset):
    return HandPose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.5, 0.5, 0.5 + offset]), np.zeros(2))


def test_set_ratios():
    reports = [GraspMetrics(0.1, 0.2, 5), GraspMetrics(0.0, 0.7, 2), GraspMetrics(0.05, 0.5, 3)]
    eta_np, eta_tb = set_ratios(reports)
    # depth must be strictly below the threshold
    assert eta_np == pytest.approx(100.0 / 3)
    assert eta_tb == pytest.approx(200.0 / 3)
    assert set_ratios([]) == (0.0, 0.0)


def test_select_top_k_prefers_contacts_then_index(pinch, sphere):
    grasps = GraspSet((far_pose(0.0), far_pose(0.1), straight_pinch_pose()), sources=("a", "b", "c"))
    selected = select_top_k(grasps, pinch, sphere, 2)
    assert selected.sources == ("c", "a")
    assert len(select_top_k(grasps, pinch, sphere, 10)) == 3
    assert len(select_top_k(grasps, pinch, sphere, 0)) == 0


def test_select_top_k_rejects_negative(pinch, sphere):
    with pytest.raises(ValueError):
        select_top_k(GraspSet(()), pinch, sphere, -1)


def test_evaluate_far_hands(pinch, sphere):
    grasps = GraspSet((far_pose(0.0), far_pose(0.0)), object_id="sphere")
    report = evaluate_set(pinch, grasps, sphere, Q1Params(directions=64))
    assert report.non_penetration_ratio == 100.0
    assert report.torque_balance_ratio == 0.0
    assert report.mean_q1 == 0.0
    assert report.delta_t == pytest.approx(100.0 / 16)
    assert report.similarity == pytest.approx(1.0)
    frame = report_frame(report, grasps)
    assert frame.columns.tolist() == ["index", "source", "q1", "max_penetration_cm", "contact_count"]
    assert frame["contact_count"].tolist() == [0, 0]


def test_evaluate_parallel_matches_serial(pinch, sphere, monkeypatch):
    grasps = GraspSet((straight_pinch_pose(), far_pose(0.0)))
    params = Q1Params(directions=64)
    serial = evaluate_set(pinch, grasps, sphere, params)
    monkeypatch.setenv("GRASP_WORKERS", "2")
    parallel = evaluate_set(pinch, grasps, sphere, params)
    assert parallel.to_dict() == serial.to_dict()
