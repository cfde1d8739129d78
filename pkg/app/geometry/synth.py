import argparse
import logging

import numpy as np

from app.config import SYNTH_KINDS, configure_logging
from app.geometry.cloud import build_cloud, write_cloud
from app.models import ObjectCloud

logger = logging.getLogger(__name__)

AXES = {"x": 0, "y": 1, "z": 2}


def fibonacci_sphere(samples):
    """Near-uniform unit directions on the sphere (golden-angle spiral)."""
    i = np.arange(samples, dtype=float)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    y = 1.0 - 2.0 * (i + 0.5) / samples
    radius = np.sqrt(1.0 - y * y)
    theta = golden * i
    return np.stack([np.cos(theta) * radius, y, np.sin(theta) * radius], axis=1)


def _unit_directions(rng, count):
    directions = rng.normal(size=(count, 3))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def _sphere(rng, count, radius):
    normals = _unit_directions(rng, count)
    return radius * normals, normals


def _box(rng, count, half):
    half = np.asarray(half, dtype=float)
    hx, hy, hz = half
    face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=count, p=face_areas / face_areas.sum())
    points = (rng.random((count, 3)) * 2.0 - 1.0) * half
    normals = np.zeros((count, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    rows = np.arange(count)
    points[rows, axis] = sign * half[axis]
    normals[rows, axis] = sign
    return points, normals


def _cylinder(rng, count, radius, half_height):
    wall = 2.0 * np.pi * radius * 2.0 * half_height
    cap = np.pi * radius**2
    part = rng.choice(3, size=count, p=np.array([wall, cap, cap]) / (wall + 2.0 * cap))
    phi = rng.random(count) * 2.0 * np.pi
    # sqrt keeps cap samples uniform over the disc area
    rho = np.where(part == 0, radius, radius * np.sqrt(rng.random(count)))
    height = rng.random(count) * 2.0 * half_height - half_height
    z = np.where(part == 0, height, np.where(part == 1, half_height, -half_height))
    points = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    normals = np.zeros((count, 3))
    normals[part == 0, 0] = np.cos(phi[part == 0])
    normals[part == 0, 1] = np.sin(phi[part == 0])
    normals[part == 1, 2] = 1.0
    normals[part == 2, 2] = -1.0
    return points, normals


def synth_object(kind, size, point_count, seed, center=(0.0, 0.0, 0.0), axis="z", name=None) -> ObjectCloud:
    """Sample a primitive's surface with exact analytic normals.

    size: sphere radius, box half extents (3 values) or cylinder (radius, half height).
    axis: symmetry axis of the cylinder.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown object kind '{kind}'")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        points, normals = _sphere(rng, point_count, float(np.ravel(size)[0]))
    elif kind == "box":
        half = np.broadcast_to(np.asarray(size, dtype=float), (3,))
        points, normals = _box(rng, point_count, half)
    else:
        radius, half_height = np.broadcast_to(np.asarray(size, dtype=float), (2,))
        points, normals = _cylinder(rng, point_count, radius, half_height)
        if axis != "z":
            order = {"x": [2, 0, 1], "y": [1, 2, 0]}[axis]
            points = points[:, order]
            normals = normals[:, order]
    points = points + np.asarray(center, dtype=float)
    return build_cloud(points, normals, name=name or kind)


def analytic_sdf(kind, size, points, center=(0.0, 0.0, 0.0), axis="z"):
    """Exact signed distance of points to the primitive surface."""
    p = np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(center, dtype=float)
    if kind == "sphere":
        return np.linalg.norm(p, axis=1) - float(np.ravel(size)[0])
    if kind == "box":
        q = np.abs(p) - np.broadcast_to(np.asarray(size, dtype=float), (3,))
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)
    radius, half_height = np.broadcast_to(np.asarray(size, dtype=float), (2,))
    k = AXES[axis]
    radial = np.linalg.norm(np.delete(p, k, axis=1), axis=1)
    q = np.stack([radial - radius, np.abs(p[:, k]) - half_height], axis=1)
    return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)


def main():
    configure_logging()
    parser = argparse.ArgumentParser(description="Write a synthetic object cloud")
    parser.add_argument("kind", choices=SYNTH_KINDS)
    parser.add_argument("--size", type=float, nargs="+", default=[0.04])
    parser.add_argument("--points", type=int, default=2048)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()
    cloud = synth_object(args.kind, args.size, args.points, args.seed)
    write_cloud(args.out, cloud)


if __name__ == "__main__":
    main()
