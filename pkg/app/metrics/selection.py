import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from app.config import Q1Params, get_workers
from app.kinematics.forward import forward_kinematics
from app.metrics.diversity import DEFAULT_BINS, delta_q, delta_r, delta_t, pose_similarity
from app.metrics.quality import contact_count, pen_depth, q1
from app.models import GraspMetrics, GraspSet, HandModel, MetricsReport, ObjectCloud

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["index", "source", "q1", "max_penetration_cm", "contact_count"]


def grasp_metrics(model: HandModel, pose, cloud: ObjectCloud, params: Q1Params) -> GraspMetrics:
    frames = forward_kinematics(model, pose)
    return GraspMetrics(
        q1=q1(model, pose, cloud, params),
        max_penetration_cm=pen_depth(model, pose, cloud, frames),
        contact_count=contact_count(model, pose, cloud, params.contact_threshold, frames),
    )


def set_ratios(reports, penetration_threshold_cm=0.5):
    """(eta_np, eta_tb) in percent: depth below the threshold, and Q1 > 0."""
    reports = list(reports)
    if not reports:
        return 0.0, 0.0
    non_penetrating = sum(1 for r in reports if r.max_penetration_cm < penetration_threshold_cm)
    balanced = sum(1 for r in reports if r.q1 > 0.0)
    return 100.0 * non_penetrating / len(reports), 100.0 * balanced / len(reports)


def select_top_k(grasps: GraspSet, model: HandModel, cloud: ObjectCloud, k: int, threshold: float = 0.01) -> GraspSet:
    """Keep the k grasps with most keypoint contacts, then least penetration, then lowest index."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    keys = []
    for index, pose in enumerate(grasps):
        frames = forward_kinematics(model, pose)
        keys.append(
            (-contact_count(model, pose, cloud, threshold, frames), pen_depth(model, pose, cloud, frames), index)
        )
    order = [index for _, _, index in sorted(keys)]
    return grasps.subset(order[:k])


def evaluate_set(
    model: HandModel, grasps: GraspSet, cloud: ObjectCloud, params: Q1Params | None = None, bins=DEFAULT_BINS
) -> MetricsReport:
    """Per-grasp quality and set-level ratios, diversity and similarity."""
    params = params or Q1Params()
    workers = get_workers()
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                per_grasp = list(pool.map(lambda pose: grasp_metrics(model, pose, cloud, params), grasps))
        else:
            per_grasp = [grasp_metrics(model, pose, cloud, params) for pose in grasps]
    except Exception as e:
        logger.error(f"Error evaluating grasp set '{grasps.object_id}': {e}")
        raise
    eta_np, eta_tb = set_ratios(per_grasp, params.penetration_threshold * 100.0)
    report = MetricsReport(
        grasps=tuple(per_grasp),
        non_penetration_ratio=eta_np,
        torque_balance_ratio=eta_tb,
        mean_q1=float(np.mean([g.q1 for g in per_grasp])) if per_grasp else 0.0,
        mean_penetration_cm=float(np.mean([g.max_penetration_cm for g in per_grasp])) if per_grasp else 0.0,
        delta_t=delta_t(grasps, cloud.centroid, bins),
        delta_r=delta_r(grasps, bins),
        delta_q=delta_q(model, grasps, bins),
        similarity=pose_similarity(model, grasps) if len(grasps) else 1.0,
    )
    logger.info(
        f"Evaluated {len(grasps)} grasps on '{cloud.name}': Q1={report.mean_q1:.4f}, "
        f"pen={report.mean_penetration_cm:.3f} cm, eta_np={eta_np:.1f}%, eta_tb={eta_tb:.1f}%"
    )
    return report


def report_frame(report: MetricsReport, grasps: GraspSet) -> pd.DataFrame:
    rows = [
        {
            "index": i,
            "source": grasps.sources[i],
            "q1": g.q1,
            "max_penetration_cm": g.max_penetration_cm,
            "contact_count": g.contact_count,
        }
        for i, g in enumerate(report.grasps)
    ]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
