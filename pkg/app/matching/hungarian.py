import logging
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from app.config import CostWeights
from app.errors import PoseError
from app.kinematics.normalize import normalize_joints, normalize_translation
from app.losses.grasp_losses import smooth_l1
from app.models import Assignment, GraspSet, HandModel

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-9


def _stack(model: HandModel, grasps: GraspSet):
    if len(grasps) == 0:
        raise PoseError("cannot build a matching cost over an empty grasp set")
    rotations = np.array([g.rotation for g in grasps])
    translations = normalize_translation(model, np.array([g.translation for g in grasps]))
    joints = normalize_joints(model, np.array([g.joints for g in grasps]).reshape(len(grasps), model.dof))
    return rotations, translations, joints


def cost_matrix(
    model: HandModel, preds: GraspSet, gts: GraspSet, weights: CostWeights | None = None, beta: float = 0.1
) -> np.ndarray:
    """N x M pair costs: w1 * translation + w2 * joints + w3 * rotation, with the regression-loss terms."""
    weights = weights or CostWeights()
    r_p, t_p, q_p = _stack(model, preds)
    r_g, t_g, q_g = _stack(model, gts)
    translation = smooth_l1(t_p[:, None, :] - t_g[None, :, :], beta)
    joints = smooth_l1(q_p[:, None, :] - q_g[None, :, :], beta)
    rotation = 1.0 - np.abs(r_p @ r_g.T)
    return weights.translation * translation + weights.joints * joints + weights.rotation * rotation


class HungarianMatcher:
    """Optimal assignment with deterministic lexicographic tie-breaking.

    Rectangular problems are padded to square with a sentinel cost; padded pairs mean
    "unmatched". ``solves`` counts calls to ``solve`` so callers can prove a stage never matched.
    """

    def __init__(self):
        self.solves = 0

    @staticmethod
    def _padded(cost):
        rows, cols = cost.shape
        size = max(rows, cols)
        sentinel = 1.0 + 2.0 * float(np.abs(cost).max(initial=0.0)) * size
        padded = np.full((size, size), sentinel)
        padded[:rows, :cols] = cost
        return padded

    @staticmethod
    def _real_cost(cost, rows, cols):
        rows_real, cols_real = cost.shape
        keep = (rows < rows_real) & (cols < cols_real)
        return math.fsum(cost[rows[keep], cols[keep]].tolist())

    def _optimum(self, cost, padded):
        try:
            rows, cols = linear_sum_assignment(padded)
        except ValueError:
            return None
        return self._real_cost(cost, rows, cols), rows, cols

    def solve(self, cost) -> Assignment:
        cost = np.asarray(cost, dtype=float)
        if cost.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
        if not np.all(np.isfinite(cost)):
            raise ValueError("cost matrix contains non-finite entries")
        self.solves += 1
        n_rows, n_cols = cost.shape
        if n_rows == 0 or n_cols == 0:
            empty = np.zeros((0, 2), dtype=int)
            return Assignment(empty, tuple(range(n_rows)), tuple(range(n_cols)), 0.0, n_rows, n_cols)

        padded = self._padded(cost)
        best, rows, cols = self._optimum(cost, padded)
        limit = best + TIE_TOLERANCE * max(1.0, abs(best))

        # Fix rows in order to the smallest column (then "unmatched") that keeps the optimum.
        size = padded.shape[0]
        work = padded.copy()
        choice = dict(zip(rows.tolist(), cols.tolist()))
        for i in range(n_rows):
            candidates = [j for j in range(n_cols) if np.isfinite(work[i, j])]
            if n_rows > n_cols:
                candidates.append(None)
            for j in candidates:
                trial = work.copy()
                if j is None:
                    trial[i, :n_cols] = np.inf
                else:
                    keep = trial[i, j]
                    trial[i, :] = np.inf
                    trial[:, j] = np.inf
                    trial[i, j] = keep
                if j is not None and choice.get(i) == j or j is None and choice.get(i, n_cols) >= n_cols:
                    work = trial
                    break
                found = self._optimum(cost, trial)
                if found is not None and found[0] <= limit:
                    work = trial
                    choice = dict(zip(found[1].tolist(), found[2].tolist()))
                    break
        pairs = [(i, j) for i, j in sorted(choice.items()) if i < n_rows and j < n_cols]
        matched_rows = {i for i, _ in pairs}
        matched_cols = {j for _, j in pairs}
        total = math.fsum(cost[i, j] for i, j in pairs)
        assignment = Assignment(
            pairs=np.array(pairs, dtype=int).reshape(-1, 2),
            unmatched_predictions=tuple(i for i in range(n_rows) if i not in matched_rows),
            unmatched_ground_truths=tuple(j for j in range(n_cols) if j not in matched_cols),
            total_cost=total,
            prediction_count=n_rows,
            ground_truth_count=n_cols,
        )
        logger.debug(f"Hungarian solve #{self.solves}: {assignment}")
        return assignment


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of size min(N, M); lexicographically smallest among ties."""
    return HungarianMatcher().solve(cost)


def matching_instability(prev: Assignment, cur: Assignment) -> float:
    """Fraction of ground truths whose matched prediction changed (unmatched counts as its own index)."""
    if prev.ground_truth_count != cur.ground_truth_count:
        raise ValueError(
            f"assignments cover {prev.ground_truth_count} and {cur.ground_truth_count} ground truths"
        )
    if cur.ground_truth_count == 0:
        return 0.0
    changed = prev.prediction_for_ground_truth() != cur.prediction_for_ground_truth()
    return float(np.mean(changed))
