import json
import logging
from collections import deque
from pathlib import Path

import numpy as np

from app.config import configure_logging, resolve_hand_path
from app.errors import HandConfigError, HandStructureError
from app.kinematics.forward import quaternion_matrix
from app.models import HandModel

logger = logging.getLogger(__name__)

DEFAULT_KEYPOINT_RADIUS = 0.006
MERGE_TOLERANCE = 1e-12


def _number(value, field):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise HandConfigError(field, f"expected a number, got {value!r}")
    if not np.isfinite(value):
        raise HandConfigError(field, "must be finite")
    return float(value)


def _vector(value, size, field):
    if not isinstance(value, (list, tuple)) or len(value) != size:
        raise HandConfigError(field, f"expected a list of {size} numbers, got {value!r}")
    return np.array([_number(v, f"{field}[{i}]") for i, v in enumerate(value)])


def _name_list(value, field):
    if value is None:
        return []
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise HandConfigError(field, "expected a list of link names")
    return list(value)


def _section(document, key, kind=list, required=True):
    if key not in document:
        if required:
            raise HandConfigError(key, "missing required field")
        return kind()
    value = document[key]
    if not isinstance(value, kind):
        raise HandConfigError(key, f"expected {'a list' if kind is list else 'an object'}")
    return value


def _topological_order(names, parents):
    """Kahn's algorithm over the link tree; children keep document order."""
    roots = [i for i, p in enumerate(parents) if p is None]
    if len(roots) != 1:
        raise HandStructureError(f"hand must have exactly one root link, found {len(roots)}")
    index = {name: i for i, name in enumerate(names)}
    children = {i: [] for i in range(len(names))}
    for i, parent in enumerate(parents):
        if parent is None:
            continue
        if parent not in index:
            raise HandStructureError(f"link '{names[i]}' has unknown parent '{parent}'")
        if parent == names[i]:
            raise HandStructureError(f"link '{names[i]}' is its own parent")
        children[index[parent]].append(i)

    order = []
    queue = deque(roots)
    while queue:
        current = queue.popleft()
        order.append(current)
        queue.extend(children[current])
    if len(order) != len(names):
        stuck = sorted(set(names) - {names[i] for i in order})
        raise HandStructureError(f"link tree contains a cycle through {stuck}")
    return order


def load_hand_config(document):
    """Parse a hand-config JSON document (text or already-decoded dict) into a HandModel."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise HandConfigError("document", f"invalid JSON ({e.msg} at line {e.lineno})")
    if not isinstance(document, dict):
        raise HandConfigError("document", "expected a JSON object")

    name = document.get("name", "hand")
    if not isinstance(name, str):
        raise HandConfigError("name", "expected a string")
    angle_unit = document.get("angle_unit", "radians")
    if angle_unit not in ("radians", "degrees"):
        raise HandConfigError("angle_unit", f"expected 'radians' or 'degrees', got {angle_unit!r}")
    angle_scale = np.pi / 180.0 if angle_unit == "degrees" else 1.0

    raw_links = _section(document, "links")
    raw_joints = _section(document, "joints")
    raw_capsules = _section(document, "capsules")
    raw_keypoints = _section(document, "keypoints", required=False)
    box = _section(document, "workspace_box", kind=dict)
    if "dof" not in document:
        raise HandConfigError("dof", "missing required field")
    dof = document["dof"]
    if isinstance(dof, bool) or not isinstance(dof, int) or dof < 0:
        raise HandConfigError("dof", f"expected a non-negative integer, got {dof!r}")
    if not raw_links:
        raise HandConfigError("links", "at least one link is required")

    # Links
    names, parents, origins, rotations, excludes = [], [], [], [], []
    for i, link in enumerate(raw_links):
        field = f"links[{i}]"
        if not isinstance(link, dict):
            raise HandConfigError(field, "expected an object")
        link_name = link.get("name")
        if not isinstance(link_name, str) or not link_name:
            raise HandConfigError(f"{field}.name", "expected a non-empty string")
        if link_name in names:
            raise HandConfigError(f"{field}.name", f"duplicate link name '{link_name}'")
        parent = link.get("parent")
        if parent is not None and not isinstance(parent, str):
            raise HandConfigError(f"{field}.parent", "expected a link name or null")
        rotation = _vector(link.get("rotation", [1.0, 0.0, 0.0, 0.0]), 4, f"{field}.rotation")
        norm = np.linalg.norm(rotation)
        if norm == 0.0:
            raise HandConfigError(f"{field}.rotation", "quaternion has zero norm")
        names.append(link_name)
        parents.append(parent)
        origins.append(_vector(link.get("origin", [0.0, 0.0, 0.0]), 3, f"{field}.origin"))
        rotations.append(quaternion_matrix(rotation / norm))
        excludes.append(_name_list(link.get("exclude"), f"{field}.exclude"))

    order = _topological_order(names, parents)
    link_names = tuple(names[i] for i in order)
    link_index = {n: i for i, n in enumerate(link_names)}
    parent_index = np.array(
        [-1 if parents[i] is None else link_index[parents[i]] for i in order], dtype=int
    )
    rest_origins = np.array([origins[i] for i in order])
    rest_rotations = np.array([rotations[i] for i in order])
    link_excludes = [excludes[i] for i in order]
    for k, exclude in enumerate(link_excludes):
        for other in exclude:
            if other not in link_index:
                raise HandConfigError(
                    f"links[{order[k]}].exclude", f"unknown link '{other}'"
                )

    # Joints
    link_joint = np.full(len(link_names), -1, dtype=int)
    joint_names, joint_links, axes, lowers, uppers = [], [], [], [], []
    for j, joint in enumerate(raw_joints):
        field = f"joints[{j}]"
        if not isinstance(joint, dict):
            raise HandConfigError(field, "expected an object")
        joint_name = joint.get("name", f"joint_{j}")
        link = joint.get("link")
        if link not in link_index:
            raise HandConfigError(f"{field}.link", f"unknown link {link!r}")
        k = link_index[link]
        if parent_index[k] < 0:
            raise HandStructureError(f"joint '{joint_name}' cannot actuate the root link")
        if link_joint[k] >= 0:
            raise HandStructureError(f"link '{link}' carries more than one joint")
        axis = _vector(joint.get("axis"), 3, f"{field}.axis")
        axis_norm = np.linalg.norm(axis)
        if axis_norm == 0.0:
            raise HandConfigError(f"{field}.axis", "axis has zero length")
        lower = _number(joint.get("lower"), f"{field}.lower") * angle_scale
        upper = _number(joint.get("upper"), f"{field}.upper") * angle_scale
        if not lower < upper:
            raise HandStructureError(
                f"joint '{joint_name}' has lower limit {lower} not below upper limit {upper}"
            )
        link_joint[k] = j
        joint_names.append(str(joint_name))
        joint_links.append(k)
        axes.append(axis / axis_norm)
        lowers.append(lower)
        uppers.append(upper)
    if dof != len(joint_names):
        raise HandStructureError(f"dof is {dof} but {len(joint_names)} revolute joints are defined")

    # Capsules
    capsule_links, starts, ends, radii = [], [], [], []
    for c, capsule in enumerate(raw_capsules):
        field = f"capsules[{c}]"
        if not isinstance(capsule, dict):
            raise HandConfigError(field, "expected an object")
        link = capsule.get("link")
        if link not in link_index:
            raise HandConfigError(f"{field}.link", f"unknown link {link!r}")
        radius = _number(capsule.get("radius"), f"{field}.radius")
        if radius <= 0.0:
            raise HandStructureError(f"capsule {c} on link '{link}' has non-positive radius {radius}")
        capsule_links.append(link_index[link])
        starts.append(_vector(capsule.get("start"), 3, f"{field}.start"))
        ends.append(_vector(capsule.get("end"), 3, f"{field}.end"))
        radii.append(radius)
    if not capsule_links:
        raise HandStructureError("hand has no capsules")

    keypoint_radius = _number(
        document.get("keypoint_radius", DEFAULT_KEYPOINT_RADIUS), "keypoint_radius"
    )
    if keypoint_radius < 0.0:
        raise HandConfigError("keypoint_radius", "must be >= 0")

    # Keypoints: link origins, then capsule endpoints, then explicit extras
    kp_names, kp_links, kp_offsets, kp_radii, kp_excludes = [], [], [], [], []

    def add_keypoint(kp_name, link, offset, radius=keypoint_radius, exclude=()):
        for i in range(len(kp_links)):
            if kp_links[i] == link and np.allclose(kp_offsets[i], offset, rtol=0.0, atol=MERGE_TOLERANCE):
                return i
        kp_names.append(kp_name)
        kp_links.append(link)
        kp_offsets.append(np.asarray(offset, dtype=float))
        kp_radii.append(radius)
        kp_excludes.append(set(exclude))
        return len(kp_names) - 1

    for k, link_name in enumerate(link_names):
        add_keypoint(f"{link_name}_origin", k, np.zeros(3))
    capsule_keypoints = []
    counts = {}
    for c, k in enumerate(capsule_links):
        n = counts.get(k, 0)
        counts[k] = n + 1
        start = add_keypoint(f"{link_names[k]}_cap{n}_start", k, starts[c])
        end = add_keypoint(f"{link_names[k]}_cap{n}_end", k, ends[c])
        capsule_keypoints.append((start, end))
    for i, extra in enumerate(raw_keypoints):
        field = f"keypoints[{i}]"
        if not isinstance(extra, dict):
            raise HandConfigError(field, "expected an object")
        link = extra.get("link")
        if link not in link_index:
            raise HandConfigError(f"{field}.link", f"unknown link {link!r}")
        radius = _number(extra.get("radius", keypoint_radius), f"{field}.radius")
        exclude = _name_list(extra.get("exclude"), f"{field}.exclude")
        for other in exclude:
            if other not in link_index:
                raise HandConfigError(f"{field}.exclude", f"unknown link '{other}'")
        add_keypoint(
            str(extra.get("name", f"{link}_extra{i}")),
            link_index[link],
            _vector(extra.get("offset"), 3, f"{field}.offset"),
            radius,
            {link_index[o] for o in exclude},
        )

    # Self-penetration pairs: everything except same link, parent-child and configured exclusions
    link_exclusions = [{link_index[o] for o in exclude} for exclude in link_excludes]

    def excluded(a, b):
        la, lb = kp_links[a], kp_links[b]
        if la == lb or parent_index[la] == lb or parent_index[lb] == la:
            return True
        if lb in link_exclusions[la] or la in link_exclusions[lb]:
            return True
        return lb in kp_excludes[a] or la in kp_excludes[b]

    pairs = [
        (a, b)
        for a in range(len(kp_names))
        for b in range(a + 1, len(kp_names))
        if not excluded(a, b)
    ]

    lower = _vector(box.get("lower"), 3, "workspace_box.lower")
    upper = _vector(box.get("upper"), 3, "workspace_box.upper")
    if np.any(lower >= upper):
        raise HandStructureError("workspace_box lower bound must be below upper bound on every axis")
    frame = document.get("grasp_frame") or {}
    if not isinstance(frame, dict):
        raise HandConfigError("grasp_frame", "expected an object")
    center = _vector(frame.get("center", [0.0, 0.0, 0.0]), 3, "grasp_frame.center")
    approach = _vector(frame.get("approach", [0.0, 0.0, 1.0]), 3, "grasp_frame.approach")
    if np.linalg.norm(approach) == 0.0:
        raise HandConfigError("grasp_frame.approach", "approach has zero length")

    model = HandModel(
        name=name,
        link_names=link_names,
        parents=parent_index,
        rest_rotations=rest_rotations,
        rest_origins=rest_origins,
        link_joint=link_joint,
        joint_names=tuple(joint_names),
        joint_links=np.array(joint_links, dtype=int),
        joint_axes=np.array(axes).reshape(-1, 3),
        joint_lower=np.array(lowers, dtype=float),
        joint_upper=np.array(uppers, dtype=float),
        capsule_links=np.array(capsule_links, dtype=int),
        capsule_starts=np.array(starts),
        capsule_ends=np.array(ends),
        capsule_radii=np.array(radii),
        capsule_keypoints=np.array(capsule_keypoints, dtype=int),
        keypoint_names=tuple(kp_names),
        keypoint_links=np.array(kp_links, dtype=int),
        keypoint_offsets=np.array(kp_offsets),
        keypoint_radii=np.array(kp_radii),
        spen_pairs=np.array(pairs, dtype=int).reshape(-1, 2),
        workspace_lower=lower,
        workspace_upper=upper,
        grasp_center=center,
        grasp_approach=approach / np.linalg.norm(approach),
    )
    for array in (
        model.parents, model.rest_rotations, model.rest_origins, model.link_joint,
        model.joint_links, model.joint_axes, model.joint_lower, model.joint_upper,
        model.capsule_links, model.capsule_starts, model.capsule_ends, model.capsule_radii,
        model.capsule_keypoints, model.keypoint_links, model.keypoint_offsets,
        model.keypoint_radii, model.spen_pairs, model.workspace_lower, model.workspace_upper,
        model.grasp_center, model.grasp_approach,
    ):
        array.flags.writeable = False
    return model


def load_hand_file(path):
    """Load a hand config from a file path or the name of a shipped config."""
    path = resolve_hand_path(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise HandConfigError("document", f"cannot read {path}: {e}")
    model = load_hand_config(text)
    logger.info(
        f"Loaded hand '{model.name}' from {path}: {model.link_count} links, "
        f"{model.dof} joints, {model.keypoint_count} keypoints, {len(model.capsule_radii)} capsules"
    )
    return model


def main():
    configure_logging()
    for name in ("pinch2", "shadow22"):
        load_hand_file(name)


if __name__ == "__main__":
    main()
