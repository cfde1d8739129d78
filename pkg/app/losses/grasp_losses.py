import logging

import numpy as np

from app.config import LossWeights
from app.errors import PoseError
from app.geometry.distance import chamfer_with_gradient, distance_pullback, hand_distance
from app.kinematics.forward import (
    forward_kinematics,
    keypoint_positions,
    local_surface_samples,
    pullback_attached,
)
from app.kinematics.normalize import normalize_joints, normalize_translation
from app.models import UNIT_TOLERANCE, HandModel, HandPose, ObjectCloud

logger = logging.getLogger(__name__)

LOSS_NAMES = ("rotation", "param", "chamfer", "pen", "spen", "van_dist", "tta_dist", "ab_tta", "grasp")


def _check_unit(r, label):
    norm = np.linalg.norm(r)
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise PoseError(f"{label} quaternion norm {norm:.9f} is not unit")


def smooth_l1(diff, beta):
    """Smooth-L1 averaged over the last axis (0 for empty vectors)."""
    diff = np.asarray(diff, dtype=float)
    if diff.shape[-1] == 0:
        return np.zeros(diff.shape[:-1])
    magnitude = np.abs(diff)
    values = np.where(magnitude < beta, 0.5 * diff**2 / beta, magnitude - 0.5 * beta)
    return values.mean(axis=-1)


def smooth_l1_gradient(diff, beta):
    diff = np.asarray(diff, dtype=float)
    if diff.shape[-1] == 0:
        return np.zeros_like(diff)
    return np.where(np.abs(diff) < beta, diff / beta, np.sign(diff)) / diff.shape[-1]


def rotation_loss(r, r_hat) -> float:
    """1 - |r . r_hat|: zero for equal rotations under either quaternion sign."""
    r = np.asarray(r, dtype=float)
    r_hat = np.asarray(r_hat, dtype=float)
    _check_unit(r, "predicted")
    _check_unit(r_hat, "target")
    # equals 1 - |r . r_hat| for unit inputs and is exactly 0 when r_hat = +-r
    return float(0.5 * min((r - r_hat) @ (r - r_hat), (r + r_hat) @ (r + r_hat)))


def rotation_loss_gradient(r, r_hat) -> np.ndarray:
    """Ambient gradient in r; tangent to the unit sphere, zero at |r . r_hat| = 1."""
    r = np.asarray(r, dtype=float)
    r_hat = np.asarray(r_hat, dtype=float)
    raw = -np.sign(r @ r_hat) * r_hat
    return raw - r * (r @ raw)


def param_components(model: HandModel, g: HandPose, g_hat: HandPose, beta: float):
    """(translation, joints, rotation) terms shared by the regression loss and the matching cost."""
    if g.dof != g_hat.dof or g.dof != model.dof:
        raise PoseError(f"dimension mismatch: {g.dof} vs {g_hat.dof} joints for hand '{model.name}'")
    dt = normalize_translation(model, g.translation) - normalize_translation(model, g_hat.translation)
    dq = normalize_joints(model, g.joints) - normalize_joints(model, g_hat.joints)
    return (
        float(smooth_l1(dt, beta)),
        float(smooth_l1(dq, beta)),
        rotation_loss(g.rotation, g_hat.rotation),
    )


def param_loss(model: HandModel, g: HandPose, g_hat: HandPose, weights: LossWeights) -> float:
    translation, joints, rotation = param_components(model, g, g_hat, weights.smooth_l1_beta)
    return (
        weights.param_translation * translation
        + weights.param_joints * joints
        + weights.param_rotation * rotation
    )


def param_loss_gradient(model: HandModel, g: HandPose, g_hat: HandPose, weights: LossWeights) -> np.ndarray:
    beta = weights.smooth_l1_beta
    dt = normalize_translation(model, g.translation) - normalize_translation(model, g_hat.translation)
    dq = normalize_joints(model, g.joints) - normalize_joints(model, g_hat.joints)
    gradient = np.zeros(model.param_count)
    gradient[:4] = weights.param_rotation * rotation_loss_gradient(g.rotation, g_hat.rotation)
    gradient[4:7] = weights.param_translation * smooth_l1_gradient(dt, beta) / model.workspace_range
    gradient[7:] = weights.param_joints * smooth_l1_gradient(dq, beta) / model.joint_range
    return gradient


def chamfer_loss(model: HandModel, g: HandPose, g_hat: HandPose, sample_count: int, seed: int) -> float:
    return chamfer_loss_with_gradient(model, g, g_hat, sample_count, seed)[0]


def chamfer_loss_with_gradient(
    model: HandModel, g: HandPose, g_hat: HandPose, sample_count: int, seed: int, frames=None, target=None
):
    """Chamfer distance between the surface samples of both hands; gradient flows into g only."""
    links, offsets = local_surface_samples(model, int(sample_count), int(seed))
    frames = frames or forward_kinematics(model, g)
    points = frames.attach(links, offsets)
    if target is None:
        target = forward_kinematics(model, g_hat).attach(links, offsets)
    value, point_gradient = chamfer_with_gradient(points, target)
    return value, pullback_attached(model, frames, links, offsets, point_gradient)


def pen_loss(model: HandModel, g: HandPose, cloud: ObjectCloud) -> float:
    return pen_loss_with_gradient(model, g, cloud)[0]


def pen_loss_with_gradient(model: HandModel, g: HandPose, cloud: ObjectCloud, frames=None):
    """mean over object points of max(0, -s)^2."""
    frames = frames or forward_kinematics(model, g)
    distance = hand_distance(model, frames, cloud.points)
    depth = np.maximum(0.0, -distance.values)
    value = float(np.mean(depth**2))
    if not depth.any():
        return value, np.zeros(model.param_count)
    weights = -2.0 * depth / cloud.size
    return value, distance_pullback(model, frames, distance, weights)


def spen_separation(model: HandModel, weights: LossWeights | None = None) -> np.ndarray:
    """Minimum separation per keypoint pair: r_i + r_j unless overridden by a constant."""
    if weights is not None and weights.spen_separation is not None:
        return np.full(model.spen_pairs.shape[0], float(weights.spen_separation))
    radii = model.keypoint_radii
    return radii[model.spen_pairs[:, 0]] + radii[model.spen_pairs[:, 1]]


def spen_loss(model: HandModel, g: HandPose, weights: LossWeights | None = None) -> float:
    return spen_loss_with_gradient(model, g, weights)[0]


def spen_loss_with_gradient(model: HandModel, g: HandPose, weights: LossWeights | None = None, frames=None):
    """Sum over non-excluded keypoint pairs of max(0, d_min - |p_i - p_j|)."""
    frames = frames or forward_kinematics(model, g)
    points = keypoint_positions(model, frames)
    pairs = model.spen_pairs
    gradient = np.zeros(model.param_count)
    if pairs.shape[0] == 0:
        return 0.0, gradient
    diff = points[pairs[:, 0]] - points[pairs[:, 1]]
    dist = np.linalg.norm(diff, axis=1)
    violation = spen_separation(model, weights) - dist
    value = float(np.sum(np.maximum(0.0, violation)))
    active = violation > 0.0
    if not active.any():
        return value, gradient
    with np.errstate(divide="ignore", invalid="ignore"):
        direction = np.where(dist[:, None] > 0.0, diff / dist[:, None], 0.0)
    cotangent = np.zeros((model.keypoint_count, 3))
    np.add.at(cotangent, pairs[active, 0], -direction[active])
    np.add.at(cotangent, pairs[active, 1], direction[active])
    gradient = pullback_attached(model, frames, model.keypoint_links, model.keypoint_offsets, cotangent)
    return value, gradient


def keypoint_distances(model: HandModel, g: HandPose, cloud: ObjectCloud, frames=None):
    """Keypoint positions, distances to their nearest object point, and those points."""
    frames = frames or forward_kinematics(model, g)
    points = keypoint_positions(model, frames)
    distances, indices = cloud.nearest(points)
    return points, distances, cloud.points[indices]


def _gated_distance(model, frames, points, distances, nearest, gate):
    value = float(np.sum(distances[gate]))
    cotangent = np.zeros((model.keypoint_count, 3))
    live = gate & (distances > 0.0)
    cotangent[live] = (points[live] - nearest[live]) / distances[live][:, None]
    gradient = pullback_attached(model, frames, model.keypoint_links, model.keypoint_offsets, cotangent)
    return value, gradient


def van_dist_loss(model: HandModel, g: HandPose, cloud: ObjectCloud, tau: float) -> float:
    return van_dist_loss_with_gradient(model, g, cloud, tau)[0]


def van_dist_loss_with_gradient(model: HandModel, g: HandPose, cloud: ObjectCloud, tau: float, frames=None):
    """sum_i 1[d(p_i) < tau] d(p_i); the indicator is a constant for the gradient."""
    frames = frames or forward_kinematics(model, g)
    points, distances, nearest = keypoint_distances(model, g, cloud, frames)
    return _gated_distance(model, frames, points, distances, nearest, distances < tau)


def coarse_distances(model: HandModel, g_coarse: HandPose, cloud: ObjectCloud) -> np.ndarray:
    """d(p^c_i) for the anchor pose; computed once per refinement."""
    return keypoint_distances(model, g_coarse, cloud)[1]


def tta_dist_loss(model: HandModel, g_ref: HandPose, g_coarse: HandPose, cloud: ObjectCloud, tau: float) -> float:
    return tta_dist_loss_with_gradient(model, g_ref, coarse_distances(model, g_coarse, cloud), cloud, tau)[0]


def tta_dist_loss_with_gradient(
    model: HandModel, g_ref: HandPose, anchor_distances, cloud: ObjectCloud, tau: float, frames=None
):
    """sum_i 1[d(p^c_i) < tau or d(p^r_i) < tau] d(p^r_i), with p^c fixed."""
    frames = frames or forward_kinematics(model, g_ref)
    points, distances, nearest = keypoint_distances(model, g_ref, cloud, frames)
    gate = (np.asarray(anchor_distances) < tau) | (distances < tau)
    return _gated_distance(model, frames, points, distances, nearest, gate)


def ab_tta_loss(
    model: HandModel, g_ref: HandPose, g_coarse: HandPose, cloud: ObjectCloud, weights: LossWeights
) -> float:
    pen = pen_loss(model, g_ref, cloud)
    dist = tta_dist_loss(model, g_ref, g_coarse, cloud, weights.tau)
    spen = spen_loss(model, g_ref, weights)
    return weights.alpha_pen * pen + weights.alpha_dist * dist + weights.alpha_spen * spen


def grasp_loss(
    model: HandModel,
    g: HandPose,
    g_hat: HandPose,
    cloud: ObjectCloud | None,
    weights: LossWeights,
    sample_count: int = 64,
    seed: int = 0,
) -> float:
    """param + lambda4 chamfer + lambda5 spen + lambda6 pen for one matched pair."""
    value = param_loss(model, g, g_hat, weights)
    if weights.chamfer:
        value += weights.chamfer * chamfer_loss(model, g, g_hat, sample_count, seed)
    if weights.spen:
        value += weights.spen * spen_loss(model, g, weights)
    if weights.pen:
        value += weights.pen * pen_loss(model, g, cloud)
    return value


def loss_gradient(selector: str, model: HandModel, g: HandPose, **inputs) -> np.ndarray:
    """Gradient over the 7+J parameters of g for one named loss.

    inputs by selector: g_hat (rotation, param, chamfer, grasp), cloud (pen, van_dist,
    tta_dist, ab_tta, grasp), g_coarse (tta_dist, ab_tta), weights, tau, sample_count, seed.
    """
    weights = inputs.get("weights") or LossWeights()
    tau = inputs.get("tau", weights.tau)
    sample_count = inputs.get("sample_count", 64)
    seed = inputs.get("seed", 0)
    g_hat = inputs.get("g_hat")
    cloud = inputs.get("cloud")
    if selector == "rotation":
        gradient = np.zeros(model.param_count)
        gradient[:4] = rotation_loss_gradient(g.rotation, g_hat.rotation)
        return gradient
    if selector == "param":
        return param_loss_gradient(model, g, g_hat, weights)
    if selector == "chamfer":
        return chamfer_loss_with_gradient(model, g, g_hat, sample_count, seed)[1]
    if selector == "pen":
        return pen_loss_with_gradient(model, g, cloud)[1]
    if selector == "spen":
        return spen_loss_with_gradient(model, g, weights)[1]
    if selector == "van_dist":
        return van_dist_loss_with_gradient(model, g, cloud, tau)[1]
    if selector in ("tta_dist", "ab_tta"):
        anchor = coarse_distances(model, inputs["g_coarse"], cloud)
        tta = tta_dist_loss_with_gradient(model, g, anchor, cloud, tau)[1]
        if selector == "tta_dist":
            return tta
        return (
            weights.alpha_pen * pen_loss_with_gradient(model, g, cloud)[1]
            + weights.alpha_dist * tta
            + weights.alpha_spen * spen_loss_with_gradient(model, g, weights)[1]
        )
    if selector == "grasp":
        gradient = param_loss_gradient(model, g, g_hat, weights)
        if weights.chamfer:
            gradient += weights.chamfer * chamfer_loss_with_gradient(model, g, g_hat, sample_count, seed)[1]
        if weights.spen:
            gradient += weights.spen * spen_loss_with_gradient(model, g, weights)[1]
        if weights.pen:
            gradient += weights.pen * pen_loss_with_gradient(model, g, cloud)[1]
        return gradient
    raise ValueError(f"unknown loss '{selector}', expected one of {list(LOSS_NAMES)}")
