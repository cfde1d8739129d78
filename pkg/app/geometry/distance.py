import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from app.errors import CloudError
from app.kinematics.forward import LinkFrames, forward_kinematics, pullback_attached
from app.models import HandModel, HandPose

logger = logging.getLogger(__name__)


def closest_segment_parameter(points, starts, ends):
    """Clamped parameter h in [0, 1] of the closest point on each segment, for every point (N x C)."""
    segment = ends - starts
    denom = np.einsum("ci,ci->c", segment, segment)
    rel = points[:, None, :] - starts[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.einsum("nci,ci->nc", rel, segment) / denom
    h = np.where(denom > 0.0, h, 0.0)
    return np.clip(h, 0.0, 1.0)


@dataclass(frozen=True)
class HandDistance:
    """Signed distance of query points to the capsule hand, with the witness capsule per point."""

    values: np.ndarray
    capsules: np.ndarray
    parameters: np.ndarray
    normals: np.ndarray


def world_capsules(model: HandModel, frames: LinkFrames):
    starts = frames.attach(model.capsule_links, model.capsule_starts)
    ends = frames.attach(model.capsule_links, model.capsule_ends)
    return starts, ends


def hand_distance(model: HandModel, frames: LinkFrames, points) -> HandDistance:
    """min over capsules of (distance to capsule axis segment - radius); positive outside."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    starts, ends = world_capsules(model, frames)
    h = closest_segment_parameter(points, starts, ends)
    closest = starts[None, :, :] + h[..., None] * (ends - starts)[None, :, :]
    offsets = points[:, None, :] - closest
    lengths = np.linalg.norm(offsets, axis=2)
    signed = lengths - model.capsule_radii[None, :]
    witness = np.argmin(signed, axis=1)
    rows = np.arange(points.shape[0])
    length = lengths[rows, witness]
    with np.errstate(divide="ignore", invalid="ignore"):
        normals = np.where(length[:, None] > 0.0, offsets[rows, witness] / length[:, None], 0.0)
    return HandDistance(
        values=signed[rows, witness],
        capsules=witness,
        parameters=h[rows, witness],
        normals=normals,
    )


def signed_distance_to_hand(model: HandModel, pose: HandPose, point):
    """Signed distance (m) from one point, or each row of an N x 3 array, to the hand surface."""
    point = np.asarray(point, dtype=float)
    values = hand_distance(model, forward_kinematics(model, pose), point).values
    return float(values[0]) if point.ndim == 1 else values


def distance_pullback(model: HandModel, frames: LinkFrames, distance: HandDistance, weights) -> np.ndarray:
    """Gradient over the pose parameters of sum_i w_i * s_i.

    s moves with the witness capsule endpoints a, b: ds/da = -(1 - h) n and ds/db = -h n.
    Points sitting exactly on a capsule axis contribute nothing.
    """
    weights = np.asarray(weights, dtype=float).reshape(-1)
    cotangent = np.zeros((model.keypoint_count, 3))
    active = np.flatnonzero(weights != 0.0)
    if active.size:
        capsules = distance.capsules[active]
        h = distance.parameters[active][:, None]
        push = weights[active][:, None] * distance.normals[active]
        np.add.at(cotangent, model.capsule_keypoints[capsules, 0], -(1.0 - h) * push)
        np.add.at(cotangent, model.capsule_keypoints[capsules, 1], -h * push)
    return pullback_attached(model, frames, model.keypoint_links, model.keypoint_offsets, cotangent)


def _as_points(points, label):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        raise CloudError(f"{label} point set is empty")
    return points


def chamfer_distance(a, b) -> float:
    """mean_a min_b |a - b|^2 + mean_b min_a |b - a|^2 (m^2)."""
    a = _as_points(a, "first")
    b = _as_points(b, "second")
    forward, _ = cKDTree(b).query(a, k=1)
    backward, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(forward**2) + np.mean(backward**2))


def chamfer_with_gradient(a, b, b_index: cKDTree | None = None):
    """Chamfer distance and its gradient with respect to the points of a (b held fixed)."""
    a = _as_points(a, "first")
    b = _as_points(b, "second")
    b_index = b_index or cKDTree(b)
    forward, nearest_b = b_index.query(a, k=1)
    backward, nearest_a = cKDTree(a).query(b, k=1)
    value = float(np.mean(forward**2) + np.mean(backward**2))
    gradient = 2.0 * (a - b[nearest_b]) / a.shape[0]
    np.add.at(gradient, nearest_a, 2.0 * (a[nearest_a] - b) / b.shape[0])
    return value, gradient
