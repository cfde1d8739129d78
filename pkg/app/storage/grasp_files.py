import logging

import numpy as np

from app.errors import FileFormatError
from app.models import Assignment, GraspSet, HandModel, HandPose
from app.storage.files import read_json, write_json

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RENORMALIZE_TOLERANCE = 1e-9
REJECT_TOLERANCE = 1e-6


def plain(value):
    """Convert numpy scalars/arrays nested in dicts and lists into JSON-native values."""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def grasp_set_to_dict(grasps: GraspSet) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "hand": grasps.hand,
        "object": grasps.object_id,
        "angle_unit": "radians",
        "grasps": [
            {
                "rotation": pose.rotation.tolist(),
                "translation": pose.translation.tolist(),
                "joints": pose.joints.tolist(),
                "source": source,
                "metadata": plain(metadata),
            }
            for pose, source, metadata in zip(grasps.poses, grasps.sources, grasps.metadata)
        ],
    }


def _vector(entry, key, size, where):
    value = entry.get(key)
    try:
        array = np.asarray(value, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise FileFormatError(f"{where}.{key}: expected a list of numbers")
    if size is not None and array.shape[0] != size:
        raise FileFormatError(f"{where}.{key}: expected {size} values, got {array.shape[0]}")
    if not np.all(np.isfinite(array)):
        raise FileFormatError(f"{where}.{key}: non-finite value")
    return array


def grasp_set_from_dict(data: dict, model: HandModel | None = None, source="") -> GraspSet:
    if not isinstance(data, dict):
        raise FileFormatError(f"{source}: grasp-set file must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FileFormatError(f"{source}: unsupported schema_version {version!r}")
    entries = data.get("grasps")
    if not isinstance(entries, list):
        raise FileFormatError(f"{source}: 'grasps' must be a list")
    unit = data.get("angle_unit", "radians")
    if unit not in ("radians", "degrees"):
        raise FileFormatError(f"{source}: angle_unit must be 'radians' or 'degrees'")
    hand = str(data.get("hand", ""))
    if model is not None and hand and hand != model.name:
        raise FileFormatError(f"{source}: grasps reference hand '{hand}', loaded hand is '{model.name}'")

    poses, sources, metadata = [], [], []
    for i, entry in enumerate(entries):
        where = f"{source}: grasps[{i}]"
        if not isinstance(entry, dict):
            raise FileFormatError(f"{where}: expected an object")
        rotation = _vector(entry, "rotation", 4, where)
        joints = _vector(entry, "joints", model.dof if model is not None else None, where)
        if unit == "degrees":
            joints = np.deg2rad(joints)
        deviation = abs(np.linalg.norm(rotation) - 1.0)
        if deviation > REJECT_TOLERANCE:
            raise FileFormatError(f"{where}.rotation: quaternion norm off by {deviation:.3g}")
        if deviation > RENORMALIZE_TOLERANCE:
            logger.warning(f"{where}: rotation renormalized (norm off by {deviation:.3g})")
        poses.append(HandPose(rotation / np.linalg.norm(rotation), _vector(entry, "translation", 3, where), joints))
        sources.append(str(entry.get("source", "input")))
        meta = entry.get("metadata", {})
        if not isinstance(meta, dict):
            raise FileFormatError(f"{where}.metadata: expected an object")
        metadata.append(meta)
    return GraspSet(
        tuple(poses),
        hand=hand or (model.name if model is not None else ""),
        object_id=str(data.get("object", "")),
        sources=tuple(sources),
        metadata=tuple(metadata),
    )


def write_grasp_set(path, grasps: GraspSet):
    write_json(path, grasp_set_to_dict(grasps))
    logger.info(f"Wrote {len(grasps)} grasps to {path}")
    return path


def read_grasp_set(path, model: HandModel | None = None) -> GraspSet:
    grasps = grasp_set_from_dict(read_json(path), model, source=str(path))
    logger.info(f"Read {len(grasps)} grasps from {path}")
    return grasps


def write_assignment(path, assignment: Assignment, **context):
    """Static-matching snapshot: the frozen assignment plus where it came from."""
    write_json(path, {"schema_version": SCHEMA_VERSION, **plain(context), "assignment": assignment.to_dict()})
    return path


def read_assignment(path) -> Assignment:
    data = read_json(path)
    try:
        return Assignment.from_dict(data["assignment"])
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"{path}: malformed assignment snapshot ({e})")
