import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial.transform import Rotation

from app.errors import PoseError
from app.models import HandModel, HandPose

logger = logging.getLogger(__name__)


def quaternion_matrix(q):
    """Rotation matrix of a scalar-first quaternion (polynomial form, exact for unit input)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_matrix_derivatives(q):
    """Partial derivatives of quaternion_matrix with respect to w, x, y, z."""
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]],
            [[0.0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0.0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]],
        ]
    )


@dataclass(frozen=True)
class LinkFrames:
    """World and hand-local transforms of every link for one pose."""

    rotations: np.ndarray
    origins: np.ndarray
    local_rotations: np.ndarray
    local_origins: np.ndarray
    quaternion: np.ndarray
    hand_rotation: np.ndarray
    translation: np.ndarray

    def attach(self, links, offsets):
        """World positions of points fixed in link frames."""
        return self.to_world(self.attach_local(links, offsets))

    def attach_local(self, links, offsets):
        """Hand-frame positions of points fixed in link frames."""
        links = np.asarray(links, dtype=int)
        offsets = np.asarray(offsets, dtype=float).reshape(-1, 3)
        return np.einsum("nij,nj->ni", self.local_rotations[links], offsets) + self.local_origins[links]

    def to_world(self, local_points):
        return local_points @ self.hand_rotation.T + self.translation


def forward_kinematics(model: HandModel, pose: HandPose) -> LinkFrames:
    """World transform of every link: root = (r, t) o rest, child = parent o rest o joint rotation."""
    pose.validate(model)
    hand_rotation = quaternion_matrix(pose.rotation)
    if model.dof:
        joint_rotations = Rotation.from_rotvec(model.joint_axes * pose.joints[:, None]).as_matrix()
    else:
        joint_rotations = np.zeros((0, 3, 3))

    count = model.link_count
    local_rotations = np.empty((count, 3, 3))
    local_origins = np.empty((count, 3))
    for k in range(count):
        rotation = model.rest_rotations[k]
        joint = model.link_joint[k]
        if joint >= 0:
            rotation = rotation @ joint_rotations[joint]
        parent = model.parents[k]
        if parent < 0:
            local_rotations[k] = rotation
            local_origins[k] = model.rest_origins[k]
        else:
            local_rotations[k] = local_rotations[parent] @ rotation
            local_origins[k] = local_rotations[parent] @ model.rest_origins[k] + local_origins[parent]

    return LinkFrames(
        rotations=np.matmul(hand_rotation, local_rotations),
        origins=local_origins @ hand_rotation.T + pose.translation,
        local_rotations=local_rotations,
        local_origins=local_origins,
        quaternion=pose.rotation,
        hand_rotation=hand_rotation,
        translation=pose.translation,
    )


def _orthonormal_basis(axis):
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


@lru_cache(maxsize=64)
def local_surface_samples(model: HandModel, count: int, seed: int):
    """Surface samples fixed in link frames: (link index per sample, local offsets).

    Capsules are chosen in proportion to their surface area, then points are drawn
    uniformly on the chosen capsule (cylinder wall or one of the two hemispherical caps).
    """
    if count < 1:
        raise ValueError(f"surface sample count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    areas = model.capsule_areas()
    chosen = rng.choice(len(areas), size=count, p=areas / areas.sum())

    starts = model.capsule_starts[chosen]
    ends = model.capsule_ends[chosen]
    radii = model.capsule_radii[chosen]
    segment = ends - starts
    lengths = np.linalg.norm(segment, axis=1)
    wall_share = np.where(lengths > 0.0, lengths / (lengths + 2.0 * radii), 0.0)
    on_wall = rng.random(count) < wall_share
    along = rng.random(count)
    phi = rng.random(count) * 2.0 * np.pi
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    offsets = np.empty((count, 3))
    for i in range(count):
        if on_wall[i]:
            axis = segment[i] / lengths[i]
            u, v = _orthonormal_basis(axis)
            radial = np.cos(phi[i]) * u + np.sin(phi[i]) * v
            offsets[i] = starts[i] + along[i] * segment[i] + radii[i] * radial
        else:
            toward_end = lengths[i] > 0.0 and directions[i] @ segment[i] > 0.0
            center = ends[i] if toward_end else starts[i]
            offsets[i] = center + radii[i] * directions[i]
    links = model.capsule_links[chosen]
    links.flags.writeable = False
    offsets.flags.writeable = False
    return links, offsets


def keypoint_positions(model: HandModel, frames: LinkFrames) -> np.ndarray:
    return frames.attach(model.keypoint_links, model.keypoint_offsets)


def keypoints_and_surface(model: HandModel, pose: HandPose, surface_sample_count: int, seed: int):
    """World keypoints (K x 3) and capsule-surface samples (S x 3) for a pose."""
    frames = forward_kinematics(model, pose)
    links, offsets = local_surface_samples(model, int(surface_sample_count), int(seed))
    return keypoint_positions(model, frames), frames.attach(links, offsets)


def pullback_attached(model: HandModel, frames: LinkFrames, links, offsets, cotangent) -> np.ndarray:
    """Gradient over (r, t, q) of sum_i c_i . p_i for points p_i fixed in link frames.

    The rotation block is the ambient 4-space gradient of the composition with
    quaternion normalization, so it is tangent to the unit sphere at r.
    """
    links = np.asarray(links, dtype=int)
    cotangent = np.asarray(cotangent, dtype=float).reshape(-1, 3)
    if cotangent.shape[0] != links.shape[0]:
        raise PoseError(f"cotangent has {cotangent.shape[0]} rows for {links.shape[0]} points")
    gradient = np.zeros(model.param_count)
    if links.shape[0] == 0:
        return gradient

    local = frames.attach_local(links, offsets)
    world = frames.to_world(local)
    gradient[4:7] = cotangent.sum(axis=0)

    r = frames.quaternion
    r_norm = np.linalg.norm(r)
    r_hat = r / r_norm
    outer = cotangent.T @ local
    unit_gradient = np.einsum("kij,ij->k", quaternion_matrix_derivatives(r_hat), outer)
    gradient[:4] = (unit_gradient - r_hat * (r_hat @ unit_gradient)) / r_norm

    if model.dof:
        moments = np.zeros((model.link_count, 3))
        forces = np.zeros((model.link_count, 3))
        np.add.at(moments, links, np.cross(world, cotangent))
        np.add.at(forces, links, cotangent)
        for k in range(model.link_count - 1, 0, -1):
            parent = model.parents[k]
            moments[parent] += moments[k]
            forces[parent] += forces[k]
        joint_links = model.joint_links
        world_axes = np.einsum("nij,nj->ni", frames.rotations[joint_links], model.joint_axes)
        arms = moments[joint_links] - np.cross(frames.origins[joint_links], forces[joint_links])
        gradient[7:] = np.einsum("ni,ni->n", world_axes, arms)
    return gradient


def pose_pullback(
    model: HandModel,
    pose: HandPose,
    keypoint_cotangent=None,
    surface_cotangent=None,
    surface_sample_count: int = 0,
    seed: int = 0,
    frames: LinkFrames | None = None,
) -> np.ndarray:
    """Gradient over the 7+J pose parameters given cotangents on keypoints and/or surface samples."""
    frames = frames or forward_kinematics(model, pose)
    gradient = np.zeros(model.param_count)
    if keypoint_cotangent is not None:
        gradient += pullback_attached(
            model, frames, model.keypoint_links, model.keypoint_offsets, keypoint_cotangent
        )
    if surface_cotangent is not None:
        links, offsets = local_surface_samples(model, int(surface_sample_count), int(seed))
        gradient += pullback_attached(model, frames, links, offsets, surface_cotangent)
    return gradient
