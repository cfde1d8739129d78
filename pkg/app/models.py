from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from app.errors import PoseError

# Quaternions are scalar-first (w, x, y, z) everywhere.
UNIT_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class HandModel:
    """Articulated hand: link tree, revolute joints, capsules and keypoints.

    Links are stored in topological order, so ``parents[k] < k`` for every
    non-root link and the root is link 0 with parent -1.
    """

    name: str
    link_names: tuple[str, ...]
    parents: np.ndarray
    rest_rotations: np.ndarray
    rest_origins: np.ndarray
    link_joint: np.ndarray
    joint_names: tuple[str, ...]
    joint_links: np.ndarray
    joint_axes: np.ndarray
    joint_lower: np.ndarray
    joint_upper: np.ndarray
    capsule_links: np.ndarray
    capsule_starts: np.ndarray
    capsule_ends: np.ndarray
    capsule_radii: np.ndarray
    capsule_keypoints: np.ndarray
    keypoint_names: tuple[str, ...]
    keypoint_links: np.ndarray
    keypoint_offsets: np.ndarray
    keypoint_radii: np.ndarray
    spen_pairs: np.ndarray
    workspace_lower: np.ndarray
    workspace_upper: np.ndarray
    grasp_center: np.ndarray
    grasp_approach: np.ndarray

    @property
    def dof(self) -> int:
        return len(self.joint_names)

    @property
    def link_count(self) -> int:
        return len(self.link_names)

    @property
    def keypoint_count(self) -> int:
        return len(self.keypoint_names)

    @property
    def param_count(self) -> int:
        return 7 + self.dof

    @property
    def joint_range(self) -> np.ndarray:
        return self.joint_upper - self.joint_lower

    @property
    def workspace_range(self) -> np.ndarray:
        return self.workspace_upper - self.workspace_lower

    def capsule_areas(self) -> np.ndarray:
        lengths = np.linalg.norm(self.capsule_ends - self.capsule_starts, axis=1)
        radii = self.capsule_radii
        return 2.0 * np.pi * radii * lengths + 4.0 * np.pi * radii**2

    def rest_pose(self) -> "HandPose":
        joints = np.clip(np.zeros(self.dof), self.joint_lower, self.joint_upper)
        return HandPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), joints)

    def mid_pose(self) -> "HandPose":
        joints = 0.5 * (self.joint_lower + self.joint_upper)
        return HandPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), joints)

    def __repr__(self):
        return f"<HandModel(name='{self.name}', links={self.link_count}, dof={self.dof})>"


@dataclass(frozen=True)
class HandPose:
    """Grasp vector g = (r, t, q): rotation quaternion, translation (m), joint angles (rad)."""

    rotation: np.ndarray
    translation: np.ndarray
    joints: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=float).reshape(-1))

    @property
    def dof(self) -> int:
        return self.joints.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation, self.joints])

    @classmethod
    def from_vector(cls, vector, dof: int | None = None, normalize: bool = True) -> "HandPose":
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if dof is not None and vector.shape[0] != 7 + dof:
            raise PoseError(f"pose vector has {vector.shape[0]} entries, expected {7 + dof}")
        rotation = vector[:4]
        if normalize:
            rotation = unit_quaternion(rotation)
        return cls(rotation, vector[4:7], vector[7:])

    def clamp(self, model: HandModel) -> "HandPose":
        joints = np.clip(self.joints, model.joint_lower, model.joint_upper)
        return HandPose(self.rotation, self.translation, joints, clamped=True)

    def validate(self, model: HandModel | None = None) -> None:
        norm = np.linalg.norm(self.rotation)
        if not np.isfinite(norm) or abs(norm - 1.0) > UNIT_TOLERANCE:
            raise PoseError(f"rotation quaternion norm {norm:.9f} is not unit")
        if not (np.all(np.isfinite(self.translation)) and np.all(np.isfinite(self.joints))):
            raise PoseError("pose contains non-finite values")
        if model is not None:
            if self.dof != model.dof:
                raise PoseError(f"pose has {self.dof} joints, hand '{model.name}' has {model.dof}")
            if self.clamped and (
                np.any(self.joints < model.joint_lower) or np.any(self.joints > model.joint_upper)
            ):
                raise PoseError("clamped pose has joints outside their limits")

    def __repr__(self):
        return (
            f"<HandPose(r={np.round(self.rotation, 4).tolist()}, "
            f"t={np.round(self.translation, 4).tolist()}, dof={self.dof})>"
        )


@dataclass(frozen=True)
class NormalizedPose:
    """Pose in head-output coordinates: raw rotation 4-vector, translation and joints in [0, 1]."""

    rotation: np.ndarray
    translation: np.ndarray
    joints: np.ndarray
    saturated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=float).reshape(-1))
        saturated = np.asarray(self.saturated, dtype=bool).reshape(-1)
        if saturated.size == 0:
            saturated = np.zeros(3 + self.joints.shape[0], dtype=bool)
        object.__setattr__(self, "saturated", saturated)

    @property
    def is_saturated(self) -> bool:
        return bool(self.saturated.any())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation, self.joints])


@dataclass(frozen=True)
class GraspSet:
    """Ordered grasps for one object, each tagged with the stage that produced it."""

    poses: tuple[HandPose, ...]
    hand: str = ""
    object_id: str = ""
    sources: tuple[str, ...] = ()
    metadata: tuple[dict, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        sources = tuple(self.sources) or tuple("input" for _ in self.poses)
        metadata = tuple(self.metadata) or tuple({} for _ in self.poses)
        if len(sources) != len(self.poses) or len(metadata) != len(self.poses):
            raise ValueError("sources and metadata must have one entry per pose")
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "metadata", metadata)

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, index):
        return self.poses[index]

    def subset(self, indices) -> "GraspSet":
        indices = [int(i) for i in indices]
        return GraspSet(
            tuple(self.poses[i] for i in indices),
            hand=self.hand,
            object_id=self.object_id,
            sources=tuple(self.sources[i] for i in indices),
            metadata=tuple(self.metadata[i] for i in indices),
        )

    def replace_poses(self, poses, source: str, metadata=None) -> "GraspSet":
        poses = tuple(poses)
        return GraspSet(
            poses,
            hand=self.hand,
            object_id=self.object_id,
            sources=tuple(source for _ in poses),
            metadata=tuple(metadata) if metadata is not None else (),
        )

    def __repr__(self):
        return f"<GraspSet(object='{self.object_id}', hand='{self.hand}', size={len(self.poses)})>"


@dataclass(frozen=True, eq=False)
class ObjectCloud:
    """Object surface points (m) with optional unit normals and an exact nearest-neighbour index."""

    points: np.ndarray
    normals: np.ndarray | None
    index: cKDTree
    name: str = ""

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.points - self.centroid, axis=1).max())

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest cloud point for each query row."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        distances, indices = self.index.query(queries, k=1)
        return np.asarray(distances, dtype=float), np.asarray(indices, dtype=int)

    def __repr__(self):
        return f"<ObjectCloud(name='{self.name}', points={self.size}, normals={self.has_normals})>"


@dataclass(frozen=True)
class Assignment:
    """Bipartite matching between predictions (rows) and ground truths (columns)."""

    pairs: np.ndarray
    unmatched_predictions: tuple[int, ...]
    unmatched_ground_truths: tuple[int, ...]
    total_cost: float
    prediction_count: int
    ground_truth_count: int

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))])

    @property
    def size(self) -> int:
        return int(self.pairs.shape[0])

    def prediction_for_ground_truth(self) -> np.ndarray:
        """Matched prediction index per ground truth, -1 when unmatched."""
        owners = np.full(self.ground_truth_count, -1, dtype=int)
        owners[self.pairs[:, 1]] = self.pairs[:, 0]
        return owners

    def to_dict(self) -> dict:
        return {
            "pairs": self.pairs.tolist(),
            "unmatched_predictions": list(self.unmatched_predictions),
            "unmatched_ground_truths": list(self.unmatched_ground_truths),
            "total_cost": float(self.total_cost),
            "prediction_count": self.prediction_count,
            "ground_truth_count": self.ground_truth_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Assignment":
        return cls(
            pairs=np.asarray(data["pairs"], dtype=int).reshape(-1, 2),
            unmatched_predictions=tuple(int(i) for i in data["unmatched_predictions"]),
            unmatched_ground_truths=tuple(int(j) for j in data["unmatched_ground_truths"]),
            total_cost=float(data["total_cost"]),
            prediction_count=int(data["prediction_count"]),
            ground_truth_count=int(data["ground_truth_count"]),
        )

    def __repr__(self):
        return f"<Assignment(pairs={self.size}, cost={self.total_cost:.6g})>"


@dataclass(frozen=True)
class GraspMetrics:
    q1: float
    max_penetration_cm: float
    contact_count: int


@dataclass(frozen=True)
class MetricsReport:
    """Per-grasp quality plus set-level ratios (%) and diversity (%)."""

    grasps: tuple[GraspMetrics, ...]
    non_penetration_ratio: float
    torque_balance_ratio: float
    mean_q1: float
    mean_penetration_cm: float
    delta_t: float
    delta_r: float
    delta_q: float
    similarity: float

    def set_fields(self) -> dict:
        return {
            "mean_q1": self.mean_q1,
            "mean_penetration_cm": self.mean_penetration_cm,
            "eta_np": self.non_penetration_ratio,
            "eta_tb": self.torque_balance_ratio,
            "delta_t": self.delta_t,
            "delta_r": self.delta_r,
            "delta_q": self.delta_q,
            "similarity": self.similarity,
            "grasp_count": len(self.grasps),
        }

    def to_dict(self) -> dict:
        return {
            "set": self.set_fields(),
            "grasps": [
                {
                    "index": i,
                    "q1": g.q1,
                    "max_penetration_cm": g.max_penetration_cm,
                    "contact_count": g.contact_count,
                }
                for i, g in enumerate(self.grasps)
            ],
        }


def unit_quaternion(rotation) -> np.ndarray:
    """L2-normalize a 4-vector into a unit quaternion."""
    rotation = np.asarray(rotation, dtype=float).reshape(4)
    norm = np.linalg.norm(rotation)
    if not np.isfinite(norm) or norm == 0.0:
        raise PoseError("rotation 4-vector has zero or non-finite norm")
    return rotation / norm
