"""Dynamic-static matching training on a per-object learnable grasp table.

Stages: dynamic matching (DMT), static-matching warm-up (SMW) and static-matching
penalty training (SMPT). The table holds logit states, so decoded poses always
respect joint limits and carry unit quaternions.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from app.config import CostWeights, LossWeights, RunConfig, StageSchedule, get_workers
from app.geometry.synth import fibonacci_sphere
from app.kinematics.forward import forward_kinematics, local_surface_samples
from app.kinematics.normalize import pose_gradient_to_state, pose_to_state, state_to_pose
from app.losses.grasp_losses import (
    chamfer_loss_with_gradient,
    param_components,
    param_loss_gradient,
    pen_loss_with_gradient,
    spen_loss_with_gradient,
    van_dist_loss_with_gradient,
)
from app.matching.hungarian import HungarianMatcher, cost_matrix, matching_instability
from app.metrics.diversity import pose_similarity
from app.metrics.quality import pen_depth
from app.models import Assignment, GraspSet, HandModel, HandPose, ObjectCloud
from app.training.targets import scalar_first

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = [
    "epoch",
    "stage",
    "regress_loss",
    "param_loss",
    "chamfer_loss",
    "spen_loss",
    "pen_loss",
    "dist_loss",
    "total_loss",
    "instability",
    "similarity",
    "mean_penetration_cm",
    "max_penetration_cm",
    "hungarian_solves",
]


@dataclass
class GraspTable:
    """Learnable state for one object: one (raw r, logit n_t, logit n_q) row per query."""

    object_id: str
    hand: str
    states: np.ndarray

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def pose(self, model: HandModel, index: int) -> HandPose:
        return state_to_pose(model, self.states[index])

    def grasp_set(self, model: HandModel, source="dsmt") -> GraspSet:
        poses = tuple(self.pose(model, i) for i in range(self.size))
        return GraspSet(poses, hand=self.hand, object_id=self.object_id, sources=tuple(source for _ in poses))

    def copy(self) -> "GraspTable":
        return GraspTable(self.object_id, self.hand, self.states.copy())


@dataclass
class TrainTrace:
    object_id: str
    records: list = field(default_factory=list)

    def append(self, record: dict):
        if self.records and record["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError(f"epoch {record['epoch']} does not follow {self.records[-1]['epoch']}")
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=TRAIN_COLUMNS)

    @property
    def final(self) -> dict:
        return self.records[-1] if self.records else {}


@dataclass(frozen=True)
class StageWeights:
    """Per-stage loss weights: the regression weights plus penetration and distance switches."""

    loss: LossWeights
    pen: float = 0.0
    distance: float = 0.0

    @classmethod
    def penalty(cls, loss: LossWeights) -> "StageWeights":
        return cls(loss, pen=loss.pen, distance=loss.distance)


def init_table(model: HandModel, cloud: ObjectCloud, count: int, seed: int, radius: float = 0.15) -> GraspTable:
    """Dispersed start: Fibonacci translations around the centroid, uniform rotations, mid-range joints."""
    if count < 1:
        raise ValueError(f"query count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    translations = cloud.centroid + radius * fibonacci_sphere(count)
    rotations = scalar_first(Rotation.random(count, random_state=rng)).reshape(count, 4)
    joints = 0.5 * (model.joint_lower + model.joint_upper)
    states = np.array(
        [pose_to_state(model, HandPose(rotations[i], translations[i], joints)) for i in range(count)]
    )
    return GraspTable(cloud.name, model.name, states)


def _pair_terms(model, pose, target, cloud, stage: StageWeights, samples, seed, target_points=None):
    """Loss components and the weighted gradient over (r, t, q) for one matched pair."""
    weights = stage.loss
    frames = forward_kinematics(model, pose)
    translation, joints, rotation = param_components(model, pose, target, weights.smooth_l1_beta)
    param = (
        weights.param_translation * translation
        + weights.param_joints * joints
        + weights.param_rotation * rotation
    )
    gradient = param_loss_gradient(model, pose, target, weights)
    chamfer = spen = pen = dist = 0.0
    if weights.chamfer:
        chamfer, g = chamfer_loss_with_gradient(model, pose, target, samples, seed, frames, target_points)
        gradient = gradient + weights.chamfer * g
    if weights.spen:
        spen, g = spen_loss_with_gradient(model, pose, weights, frames)
        gradient = gradient + weights.spen * g
    if stage.pen:
        pen, g = pen_loss_with_gradient(model, pose, cloud, frames)
        gradient = gradient + stage.pen * g
    if stage.distance:
        dist, g = van_dist_loss_with_gradient(model, pose, cloud, weights.tau, frames)
        gradient = gradient + stage.distance * g
    terms = {
        "param_loss": param,
        "chamfer_loss": chamfer,
        "spen_loss": spen,
        "pen_loss": pen,
        "dist_loss": dist,
    }
    return terms, gradient


def _matched_losses(model, table, gts, assignment, cloud, stage, samples, seed, target_points=None):
    """Mean components over matched pairs and the clipped-step gradient over the table states."""
    gradient = np.zeros_like(table.states)
    totals = dict.fromkeys(("param_loss", "chamfer_loss", "spen_loss", "pen_loss", "dist_loss"), 0.0)
    pairs = assignment.pairs
    if pairs.shape[0] == 0:
        return totals, gradient
    for pred, gt in pairs:
        pose = table.pose(model, pred)
        target = None if target_points is None else target_points[gt]
        terms, pose_gradient = _pair_terms(model, pose, gts[gt], cloud, stage, samples, seed, target)
        for key, value in terms.items():
            totals[key] += value / pairs.shape[0]
        gradient[pred] += pose_gradient_to_state(model, table.states[pred], pose_gradient) / pairs.shape[0]
    return totals, gradient


def surface_targets(model: HandModel, gts: GraspSet, samples: int, seed: int):
    """Ground-truth hand surface samples, fixed for a whole epoch."""
    links, offsets = local_surface_samples(model, samples, seed)
    return [forward_kinematics(model, pose).attach(links, offsets) for pose in gts]


def gradient_step(table: GraspTable, gradient, step_size: float, clip_norm: float, decay: float = 0.0) -> GraspTable:
    """Plain gradient descent with global-norm clipping; raw quaternions renormalized afterwards.

    `decay` pulls each row toward the table mean by step_size * decay of its offset, outside the clip.
    """
    norm = np.linalg.norm(gradient)
    if norm > clip_norm:
        gradient = gradient * (clip_norm / norm)
    states = table.states - step_size * gradient
    if decay:
        states -= step_size * decay * (table.states - table.states.mean(axis=0))
    states[:, :4] /= np.linalg.norm(states[:, :4], axis=1, keepdims=True)
    return GraspTable(table.object_id, table.hand, states)


def match(model: HandModel, table: GraspTable, gts: GraspSet, cost: CostWeights, matcher: HungarianMatcher, beta=0.1):
    return matcher.solve(cost_matrix(model, table.grasp_set(model), gts, cost, beta))


def train_epoch(
    model: HandModel,
    table: GraspTable,
    gts: GraspSet,
    assignment: Assignment,
    cloud: ObjectCloud | None,
    stage: StageWeights,
    schedule: StageSchedule,
    seed: int = 0,
):
    """steps_per_epoch gradient steps on the matched losses under a fixed assignment."""
    targets = surface_targets(model, gts, schedule.chamfer_samples, seed) if stage.loss.chamfer else None
    for _ in range(schedule.steps_per_epoch):
        _, gradient = _matched_losses(
            model, table, gts, assignment, cloud, stage, schedule.chamfer_samples, seed, targets
        )
        table = gradient_step(table, gradient, schedule.step_size, schedule.clip_norm, schedule.table_decay)
    return table


def dmt_epoch(model, table, gts, cloud, weights: LossWeights, cost: CostWeights, schedule, matcher, seed=0):
    """One matching solve on the current predictions, then regression-only steps."""
    assignment = match(model, table, gts, cost, matcher, weights.smooth_l1_beta)
    table = train_epoch(model, table, gts, assignment, cloud, StageWeights(weights), schedule, seed)
    return table, assignment


def record_static_matching(model, table, gts, cost: CostWeights, matcher, beta=0.1) -> Assignment:
    """Snapshot of the assignment reused verbatim by every later static stage."""
    return match(model, table, gts, cost, matcher, beta)


def smw_epoch(model, table, gts, assignment, weights: LossWeights, schedule, seed=0):
    """Regression losses under the given (normally frozen) assignment; no matching solve."""
    return train_epoch(model, table, gts, assignment, None, StageWeights(weights), schedule, seed)


def smpt_epoch(model, table, gts, assignment, cloud, weights: LossWeights, schedule, seed=0):
    """Regression plus penetration (weights.pen) and vanilla distance (weights.distance) losses."""
    return train_epoch(model, table, gts, assignment, cloud, StageWeights.penalty(weights), schedule, seed)


def epoch_record(model, table, gts, assignment, cloud, stage, schedule, seed, epoch, name, instability, matcher):
    terms, _ = _matched_losses(model, table, gts, assignment, cloud, stage, schedule.chamfer_samples, seed)
    regress = terms["param_loss"] + stage.loss.chamfer * terms["chamfer_loss"] + stage.loss.spen * terms["spen_loss"]
    depths = [pen_depth(model, table.pose(model, i), cloud) for i in range(table.size)]
    return {
        "epoch": epoch,
        "stage": name,
        "regress_loss": regress,
        **terms,
        "total_loss": regress + stage.pen * terms["pen_loss"] + stage.distance * terms["dist_loss"],
        "instability": instability,
        "similarity": pose_similarity(model, table.grasp_set(model)),
        "mean_penetration_cm": float(np.mean(depths)),
        "max_penetration_cm": float(np.max(depths)),
        "hungarian_solves": matcher.solves,
    }


@dataclass
class DsmtResult:
    table: GraspTable
    trace: TrainTrace
    static_assignment: Assignment | None


def train_object(
    model: HandModel,
    cloud: ObjectCloud,
    gts: GraspSet,
    queries: int,
    seed: int,
    loss: LossWeights,
    cost: CostWeights,
    schedule: StageSchedule,
    init_radius: float = 0.15,
) -> DsmtResult:
    """T0 dynamic epochs, the static snapshot, T1 warm-up and T2 penalty epochs for one object."""
    matcher = HungarianMatcher()
    table = init_table(model, cloud, queries, seed, init_radius)
    trace = TrainTrace(cloud.name)
    previous = None
    epoch = 0

    def instability(assignment):
        return 0.0 if previous is None else matching_instability(previous, assignment)

    # Dynamic matching
    logger.info(f"[{cloud.name}] DMT: {schedule.dmt_epochs} epochs")
    regress = StageWeights(loss)
    for _ in range(schedule.dmt_epochs):
        table, assignment = dmt_epoch(model, table, gts, cloud, loss, cost, schedule, matcher, seed)
        trace.append(
            epoch_record(
                model, table, gts, assignment, cloud, regress, schedule, seed, epoch, "dmt",
                instability(assignment), matcher,
            )
        )
        previous = assignment
        epoch += 1

    # Static matching snapshot
    static = None
    if schedule.smw_epochs or schedule.smpt_epochs:
        static = record_static_matching(model, table, gts, cost, matcher, loss.smooth_l1_beta)
        previous = static
        logger.info(f"[{cloud.name}] Static matching recorded: {static}")

    stages = [("smw", schedule.smw_epochs, regress), ("smpt", schedule.smpt_epochs, StageWeights.penalty(loss))]
    for name, count, stage in stages:
        if count:
            logger.info(f"[{cloud.name}] {name.upper()}: {count} epochs, static={schedule.static_matching}")
        for _ in range(count):
            if schedule.static_matching:
                assignment = static
            else:
                assignment = match(model, table, gts, cost, matcher, loss.smooth_l1_beta)
            if name == "smw":
                table = smw_epoch(model, table, gts, assignment, loss, schedule, seed)
            else:
                table = smpt_epoch(model, table, gts, assignment, cloud, loss, schedule, seed)
            trace.append(
                epoch_record(
                    model, table, gts, assignment, cloud, stage, schedule, seed, epoch, name,
                    instability(assignment), matcher,
                )
            )
            previous = assignment
            epoch += 1

    final = trace.final
    if final:
        logger.info(
            f"[{cloud.name}] Finished {epoch} epochs: similarity={final['similarity']:.4f}, "
            f"mean pen={final['mean_penetration_cm']:.4f} cm, solves={matcher.solves}"
        )
    return DsmtResult(table, trace, static)


def run_dsmt(model: HandModel, config: RunConfig, clouds: dict, targets: dict) -> dict:
    """Train every object of the run; objects train concurrently when GRASP_WORKERS > 1."""

    def train(spec):
        return train_object(
            model,
            clouds[spec.name],
            targets[spec.name],
            config.queries,
            config.seed,
            config.loss,
            config.cost,
            config.schedule,
            config.init_radius,
        )

    workers = get_workers()
    try:
        if workers > 1 and len(config.objects) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(train, config.objects))
        else:
            results = [train(spec) for spec in config.objects]
    except Exception as e:
        logger.error(f"Error during DSMT training: {e}")
        raise
    return {spec.name: result for spec, result in zip(config.objects, results)}


def merged_trace(results: dict) -> pd.DataFrame:
    """Per-object traces stacked with an object column, in run-config order."""
    frames = [result.trace.to_frame().assign(object=name) for name, result in results.items()]
    if not frames:
        return pd.DataFrame(columns=["object", *TRAIN_COLUMNS])
    return pd.concat(frames, ignore_index=True)[["object", *TRAIN_COLUMNS]]
