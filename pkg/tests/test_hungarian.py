from functools import lru_cache
from itertools import permutations

import numpy as np
import pytest
from conftest import random_pose

from app.matching.hungarian import HungarianMatcher, cost_matrix, hungarian, matching_instability
from app.models import Assignment, GraspSet


@lru_cache(maxsize=None)
def _injections(rows, cols):
    return np.array(list(permutations(range(cols), rows)), dtype=int).reshape(-1, rows)


def brute_force(cost):
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    rows, cols = cost.shape
    choices = _injections(rows, cols)
    return float(cost[np.arange(rows), choices].sum(axis=1).min())


def test_matches_brute_force(rng):
    for _ in range(1000):
        rows, cols = rng.integers(1, 8, size=2)
        cost = rng.uniform(0.0, 10.0, size=(rows, cols))
        assignment = hungarian(cost)
        assert assignment.size == min(rows, cols)
        assert assignment.total_cost == pytest.approx(brute_force(cost), rel=1e-12)


def test_pairs_are_injective_and_cover_smaller_side(rng):
    cost = rng.uniform(size=(5, 3))
    assignment = hungarian(cost)
    assert len(set(assignment.pairs[:, 0])) == 3
    assert sorted(assignment.pairs[:, 1].tolist()) == [0, 1, 2]
    assert len(assignment.unmatched_predictions) == 2
    assert assignment.unmatched_ground_truths == ()


def test_ties_break_lexicographically():
    assert hungarian(np.zeros((3, 3))).pairs.tolist() == [[0, 0], [1, 1], [2, 2]]
    assert hungarian(np.ones((2, 2))).pairs.tolist() == [[0, 0], [1, 1]]


def test_ties_with_more_predictions_leave_last_rows_unmatched():
    assignment = hungarian(np.zeros((3, 2)))
    assert assignment.pairs.tolist() == [[0, 0], [1, 1]]
    assert assignment.unmatched_predictions == (2,)


def test_unique_optimum_is_not_overridden():
    cost = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert hungarian(cost).pairs.tolist() == [[0, 1], [1, 0]]


def test_empty_side():
    assignment = hungarian(np.zeros((0, 3)))
    assert assignment.size == 0
    assert assignment.unmatched_ground_truths == (0, 1, 2)
    assert assignment.total_cost == 0.0


def test_non_finite_cost_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        hungarian(np.array([[0.0, np.nan], [1.0, 2.0]]))


def test_solve_counter(rng):
    matcher = HungarianMatcher()
    assert matcher.solves == 0
    matcher.solve(rng.uniform(size=(2, 2)))
    matcher.solve(rng.uniform(size=(3, 2)))
    assert matcher.solves == 2


def _assignment(pairs, gts=2):
    return Assignment(np.array(pairs), (), (), 0.0, len(pairs), gts)


def test_matching_instability():
    first = _assignment([[0, 0], [1, 1]])
    assert matching_instability(first, first) == 0.0
    assert matching_instability(first, _assignment([[1, 0], [0, 1]])) == 1.0
    assert matching_instability(first, _assignment([[0, 0], [2, 1]])) == 0.5


def test_matching_instability_size_mismatch():
    with pytest.raises(ValueError, match="ground truths"):
        matching_instability(_assignment([[0, 0]], gts=1), _assignment([[0, 0]], gts=2))


def test_cost_matrix_diagonal_is_zero(shadow, rng):
    grasps = GraspSet(tuple(random_pose(shadow, rng) for _ in range(5)))
    cost = cost_matrix(shadow, grasps, grasps)
    assert cost.shape == (5, 5)
    np.testing.assert_allclose(np.diag(cost), 0.0, atol=1e-12)
    assert np.all(cost[~np.eye(5, dtype=bool)] > 0.0)
    assert hungarian(cost).pairs.tolist() == [[i, i] for i in range(5)]


def test_assignment_ignores_cost_scale_and_shift(rng):
    for _ in range(200):
        rows, cols = rng.integers(1, 7, size=2)
        cost = rng.uniform(0.0, 10.0, size=(rows, cols))
        pairs = hungarian(cost).pairs.tolist()
        for scale in (0.01, 3.0, 1e4):
            assert hungarian(scale * cost).pairs.tolist() == pairs
        assert hungarian(cost + 5.0).pairs.tolist() == pairs
