import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.stats import norm, qmc

from app.config import Q1Params
from app.errors import CloudError, GeometryError
from app.geometry.distance import hand_distance
from app.kinematics.forward import forward_kinematics, keypoint_positions
from app.models import HandModel, HandPose, ObjectCloud

logger = logging.getLogger(__name__)

# Quasi-random wrench directions are a pure function of the count, so they are built once.
_DIRECTION_CACHE = {}


def pen_depth(model: HandModel, pose: HandPose, cloud: ObjectCloud, frames=None) -> float:
    """Maximal depth (cm) of any object point inside the hand."""
    frames = frames or forward_kinematics(model, pose)
    values = hand_distance(model, frames, cloud.points).values
    return float(np.max(np.maximum(0.0, -values)) * 100.0)


def contact_count(model: HandModel, pose: HandPose, cloud: ObjectCloud, threshold: float, frames=None) -> int:
    """Number of keypoints within threshold (m) of the object."""
    frames = frames or forward_kinematics(model, pose)
    distances, _ = cloud.nearest(keypoint_positions(model, frames))
    return int(np.count_nonzero(distances < threshold))


def wrench_directions(count, seed=0):
    """Well-spread unit directions in 6-D wrench space (scrambled Halton through the normal inverse CDF)."""
    key = (count, seed)
    if key not in _DIRECTION_CACHE:
        sample = qmc.Halton(d=6, scramble=True, seed=seed).random(count)
        gaussian = norm.ppf(np.clip(sample, 1e-12, 1.0 - 1e-12))
        directions = gaussian / np.linalg.norm(gaussian, axis=1, keepdims=True)
        directions.flags.writeable = False
        _DIRECTION_CACHE[key] = directions
    return _DIRECTION_CACHE[key]


def friction_cone(normals, friction, edges):
    """Unit edge forces of the linearized Coulomb cone around each inward normal: (C * edges) x 3."""
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    helper = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = np.cross(normals, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normals, u)
    angles = 2.0 * np.pi * np.arange(edges) / edges
    forces = (
        normals[:, None, :]
        + friction * np.cos(angles)[None, :, None] * u[:, None, :]
        + friction * np.sin(angles)[None, :, None] * v[:, None, :]
    )
    forces /= np.linalg.norm(forces, axis=2, keepdims=True)
    return forces.reshape(-1, 3)


def contact_wrenches(points, inward_normals, center, friction, edges, torque_scale):
    """Force and scaled torque about center for every friction-cone edge at every contact."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    forces = friction_cone(inward_normals, friction, edges)
    arms = np.repeat(points - np.asarray(center, dtype=float), edges, axis=0)
    torques = torque_scale * np.cross(arms, forces)
    return np.hstack([forces, torques])


def _polish(wrenches, start):
    """Walk from a direction to the facet its ray hits; returns the facet's support value."""
    direction = start
    best = np.inf
    for _ in range(8):
        count = wrenches.shape[0]
        result = linprog(
            c=np.r_[np.zeros(6), 1.0],
            A_ub=np.hstack([wrenches, -np.ones((count, 1))]),
            b_ub=np.zeros(count),
            A_eq=np.r_[direction, 0.0][None, :],
            b_eq=[1.0],
            bounds=[(None, None)] * 7,
            method="highs",
        )
        if result.status == 3:
            return -np.inf
        if result.status != 0:
            return None
        v = result.x[:6]
        length = np.linalg.norm(v)
        if length == 0.0:
            return None
        value = float(np.max(wrenches @ (v / length)))
        if value >= best - 1e-12:
            break
        best = value
        direction = v / length
    return best


def epsilon_quality(wrenches, directions=1024, polish_starts=4, seed=0):
    """Radius of the largest origin-centred ball inside conv(wrenches); 0 if the origin is not interior."""
    wrenches = np.asarray(wrenches, dtype=float).reshape(-1, 6)
    if wrenches.shape[0] < 7:
        return 0.0
    samples = wrench_directions(directions, seed)
    support = np.max(samples @ wrenches.T, axis=1)
    sampled = float(support.min())
    if sampled <= 0.0:
        return 0.0
    best = sampled
    for index in np.argsort(support, kind="stable")[:polish_starts]:
        polished = _polish(wrenches, samples[index])
        if polished is None:
            continue
        if polished <= 0.0:
            return 0.0
        best = min(best, polished)
    return best


@dataclass(frozen=True)
class ContactSet:
    points: np.ndarray
    inward_normals: np.ndarray


def find_contacts(model: HandModel, pose: HandPose, cloud: ObjectCloud, params: Q1Params, frames=None) -> ContactSet:
    """Distinct object points nearest to the keypoints that contact_count counts as touching."""
    if not cloud.has_normals:
        raise CloudError(f"cloud '{cloud.name}' has no normals; Q1 needs them")
    frames = frames or forward_kinematics(model, pose)
    distances, indices = cloud.nearest(keypoint_positions(model, frames))
    touching = np.unique(indices[distances < params.contact_threshold])
    return ContactSet(cloud.points[touching], -cloud.normals[touching])


def q1(model: HandModel, pose: HandPose, cloud: ObjectCloud, params: Q1Params | None = None) -> float:
    """Epsilon (Q1) grasp quality.

    Parameters
    ----------
    model, pose : the hand and its placement
    cloud : object surface with outward normals
    params : contact/penetration thresholds, friction, cone edges, direction count

    Returns
    -------
    float : 0 when the hand penetrates deeper than the penetration threshold or touches
        at fewer than 3 distinct object points (see find_contacts); otherwise the
        inscribed-ball radius of the discretized contact wrench hull.

    Raises
    ------
    CloudError : the cloud has no normals
    GeometryError : torque_scale is unset and the cloud has zero bounding radius
    """
    params = params or Q1Params()
    if not cloud.has_normals:
        raise CloudError(f"cloud '{cloud.name}' has no normals; Q1 needs them")
    torque_scale = params.torque_scale
    if torque_scale is None:
        if cloud.bounding_radius <= 0.0:
            raise GeometryError(f"cloud '{cloud.name}' has zero bounding radius; set q1.torque_scale explicitly")
        torque_scale = 1.0 / cloud.bounding_radius
    frames = forward_kinematics(model, pose)
    if pen_depth(model, pose, cloud, frames) > params.penetration_threshold * 100.0:
        return 0.0
    contacts = find_contacts(model, pose, cloud, params, frames)
    if contacts.points.shape[0] < 3:
        return 0.0
    wrenches = contact_wrenches(
        contacts.points,
        contacts.inward_normals,
        cloud.centroid,
        params.friction,
        params.cone_edges,
        torque_scale,
    )
    return epsilon_quality(wrenches, params.directions, params.polish_starts, params.seed)
