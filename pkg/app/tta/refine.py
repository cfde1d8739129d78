import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from app.config import TtaConfig, configure_logging, get_workers
from app.geometry.synth import synth_object
from app.kinematics.forward import forward_kinematics
from app.kinematics.hand_config import load_hand_file
from app.kinematics.normalize import pose_gradient_to_normalized
from app.losses.grasp_losses import (
    coarse_distances,
    pen_loss_with_gradient,
    spen_loss_with_gradient,
    tta_dist_loss_with_gradient,
    van_dist_loss_with_gradient,
)
from app.metrics.quality import contact_count, pen_depth
from app.models import GraspSet, HandModel, HandPose, ObjectCloud, unit_quaternion

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "loss", "pen_loss", "dist_loss", "spen_loss", "max_penetration_cm", "contact_count"]
SUMMARY_COLUMNS = [
    "index",
    "mode",
    "steps",
    "stop_reason",
    "initial_loss",
    "final_loss",
    "initial_penetration_cm",
    "final_penetration_cm",
    "initial_contacts",
    "final_contacts",
]

# mode -> (distance term, uses spen, translation gradient scale forced to 1)
MODES = {
    "ab-tta": ("tta", True, False),
    "vanilla": ("vanilla", True, True),
    "gdis": ("tta", False, True),
    "tm": (None, True, False),
}


@dataclass(frozen=True)
class RefineOutcome:
    pose: HandPose
    trace: pd.DataFrame
    stop_reason: str
    initial_loss: float
    final_loss: float


class _Objective:
    """Adversarial pair of losses for one coarse grasp; the anchor distances are fixed at construction."""

    def __init__(self, model: HandModel, g_coarse: HandPose, cloud: ObjectCloud, config: TtaConfig):
        self.model = model
        self.cloud = cloud
        self.config = config
        self.weights = config.loss_weights()
        self.distance, self.use_spen, free_translation = MODES[config.mode]
        self.beta_t = 1.0 if free_translation else config.beta_t
        self.anchor = coarse_distances(model, g_coarse, cloud) if self.distance == "tta" else None

    def __call__(self, pose: HandPose):
        """(loss, pen, dist, spen, gradient over (r, t, q))."""
        model, cloud, weights = self.model, self.cloud, self.weights
        frames = forward_kinematics(model, pose)
        pen, gradient = pen_loss_with_gradient(model, pose, cloud, frames)
        gradient = weights.alpha_pen * gradient
        dist = spen = 0.0
        if self.distance == "tta":
            dist, dist_gradient = tta_dist_loss_with_gradient(model, pose, self.anchor, cloud, weights.tau, frames)
            gradient = gradient + weights.alpha_dist * dist_gradient
        elif self.distance == "vanilla":
            dist, dist_gradient = van_dist_loss_with_gradient(model, pose, cloud, weights.tau, frames)
            gradient = gradient + weights.alpha_dist * dist_gradient
        if self.use_spen:
            spen, spen_gradient = spen_loss_with_gradient(model, pose, weights, frames)
            gradient = gradient + weights.alpha_spen * spen_gradient
        loss = weights.alpha_pen * pen + weights.alpha_dist * dist + weights.alpha_spen * spen
        return loss, pen, dist, spen, gradient

    def step(self, pose: HandPose, gradient) -> HandPose:
        """Fixed-length step against the normalized-space gradient; r renormalized, joints clamped."""
        model = self.model
        direction = pose_gradient_to_normalized(model, gradient)
        direction[4:7] *= self.beta_t
        length = np.linalg.norm(direction)
        direction = direction / length
        eta = self.config.step_size
        rotation = unit_quaternion(pose.rotation - eta * direction[:4])
        translation = pose.translation - eta * direction[4:7] * model.workspace_range
        joints = np.clip(
            pose.joints - eta * direction[7:] * model.joint_range, model.joint_lower, model.joint_upper
        )
        return HandPose(rotation, translation, joints, clamped=True)

    def movable(self, gradient) -> bool:
        direction = pose_gradient_to_normalized(self.model, gradient)
        direction[4:7] *= self.beta_t
        return bool(np.linalg.norm(direction) > 0.0)


def _row(step, model, pose, cloud, values, tau):
    loss, pen, dist, spen, _ = values
    frames = forward_kinematics(model, pose)
    return {
        "step": step,
        "loss": loss,
        "pen_loss": pen,
        "dist_loss": dist,
        "spen_loss": spen,
        "max_penetration_cm": pen_depth(model, pose, cloud, frames),
        "contact_count": contact_count(model, pose, cloud, tau, frames),
    }


def refine_with_outcome(
    model: HandModel, g_coarse: HandPose, cloud: ObjectCloud, config: TtaConfig | None = None
) -> RefineOutcome:
    config = config or TtaConfig()
    g_coarse.validate(model)
    objective = _Objective(model, g_coarse, cloud, config)
    tau = objective.weights.tau

    pose = g_coarse
    values = objective(pose)
    rows = [_row(0, model, pose, cloud, values, tau)]
    initial_loss = best_loss = previous = values[0]
    best_pose = pose
    increases = 0
    stop_reason = "step limit"
    for step in range(1, config.steps + 1):
        if not objective.movable(values[4]):
            stop_reason = "zero gradient"
            break
        pose = objective.step(pose, values[4])
        values = objective(pose)
        rows.append(_row(step, model, pose, cloud, values, tau))
        loss = values[0]
        logger.debug(f"refine step {step}: loss={loss:.6g} pen={values[1]:.6g} dist={values[2]:.6g}")
        if loss < best_loss:
            best_loss, best_pose = loss, pose
        increases = increases + 1 if loss > previous else 0
        if increases >= config.patience:
            logger.warning(f"Loss rose for {increases} consecutive steps; keeping the best pose so far")
            stop_reason = "diverged"
            break
        if abs(loss - previous) < config.tolerance:
            stop_reason = "converged"
            break
        previous = loss
    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    logger.info(
        f"Refined ({config.mode}) in {len(rows) - 1} steps, stop: {stop_reason}, "
        f"loss {initial_loss:.6g} -> {best_loss:.6g}"
    )
    return RefineOutcome(best_pose, trace, stop_reason, initial_loss, best_loss)


def refine(model: HandModel, g_coarse: HandPose, cloud: ObjectCloud, config: TtaConfig | None = None):
    """Refine one coarse grasp; returns the best pose seen and the per-step trace."""
    outcome = refine_with_outcome(model, g_coarse, cloud, config)
    return outcome.pose, outcome.trace


def refine_set(model: HandModel, grasps: GraspSet, cloud: ObjectCloud, config: TtaConfig | None = None):
    """Refine every grasp in order; returns (refined set, per-grasp summary, stacked trace with a grasp column)."""
    config = config or TtaConfig()
    workers = get_workers()
    try:
        if workers > 1 and len(grasps) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(lambda pose: refine_with_outcome(model, pose, cloud, config), grasps))
        else:
            outcomes = [refine_with_outcome(model, pose, cloud, config) for pose in grasps]
    except Exception as e:
        logger.error(f"Error refining grasp set '{grasps.object_id}': {e}")
        raise

    summary_rows, traces, metadata = [], [], []
    for index, outcome in enumerate(outcomes):
        first, last = outcome.trace.iloc[0], outcome.trace.iloc[-1]
        best_frames = forward_kinematics(model, outcome.pose)
        summary_rows.append(
            {
                "index": index,
                "mode": config.mode,
                "steps": int(last["step"]),
                "stop_reason": outcome.stop_reason,
                "initial_loss": outcome.initial_loss,
                "final_loss": outcome.final_loss,
                "initial_penetration_cm": float(first["max_penetration_cm"]),
                "final_penetration_cm": pen_depth(model, outcome.pose, cloud, best_frames),
                "initial_contacts": int(first["contact_count"]),
                "final_contacts": contact_count(model, outcome.pose, cloud, config.tau, best_frames),
            }
        )
        traces.append(outcome.trace.assign(grasp=index))
        metadata.append(
            {
                **grasps.metadata[index],
                "tta_mode": config.mode,
                "tta_initial_loss": outcome.initial_loss,
                "tta_final_loss": outcome.final_loss,
            }
        )
    refined = grasps.replace_poses([o.pose for o in outcomes], source=config.mode, metadata=metadata)
    summary = pd.DataFrame(summary_rows, columns=SUMMARY_COLUMNS)
    if traces:
        trace = pd.concat(traces, ignore_index=True)[["grasp", *TRACE_COLUMNS]]
    else:
        trace = pd.DataFrame(columns=["grasp", *TRACE_COLUMNS])
    return refined, summary, trace


def main():
    configure_logging()
    model = load_hand_file("pinch2")
    cloud = synth_object("sphere", 0.03, 1024, seed=0, center=(0.0, 0.0, 0.05))
    pose, trace = refine(model, model.mid_pose(), cloud)
    logger.info(f"Refined pose {pose}\n{trace.tail()}")


if __name__ == "__main__":
    main()
