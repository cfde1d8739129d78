import io
import logging
from pathlib import Path

import numpy as np
import open3d as o3d
import pandas as pd
from scipy.spatial import cKDTree

from app.errors import CloudError
from app.models import ObjectCloud
from app.storage.files import atomic_write_text

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-6


def build_cloud(points, normals=None, name="") -> ObjectCloud:
    """Validate points (and normals) and build the exact nearest-neighbour index eagerly."""
    points = np.array(points, dtype=float)
    if points.size == 0:
        raise CloudError(f"cloud '{name}' is empty")
    points = points.reshape(-1, 3) if points.ndim == 1 else points
    if points.ndim != 2 or points.shape[1] != 3:
        raise CloudError(f"cloud '{name}': expected an M x 3 array, got shape {points.shape}")
    bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
    if bad.size:
        raise CloudError(f"cloud '{name}': non-finite coordinate in row {int(bad[0])}")

    if normals is not None:
        normals = np.array(normals, dtype=float).reshape(-1, 3)
        if normals.shape != points.shape:
            raise CloudError(
                f"cloud '{name}': {normals.shape[0]} normals for {points.shape[0]} points"
            )
        norms = np.linalg.norm(normals, axis=1)
        bad = np.flatnonzero(~np.isfinite(norms) | (norms == 0.0))
        if bad.size:
            raise CloudError(f"cloud '{name}': zero or non-finite normal in row {int(bad[0])}")
        off = np.abs(norms - 1.0) > NORMAL_TOLERANCE
        if off.any():
            logger.warning(f"Cloud '{name}': renormalized {int(off.sum())} non-unit normals")
        normals = normals / norms[:, None]
        normals.flags.writeable = False

    points.flags.writeable = False
    return ObjectCloud(points=points, normals=normals, index=cKDTree(points), name=name)


def transform_cloud(cloud: ObjectCloud, rotation, translation) -> ObjectCloud:
    """Rigidly move a cloud (rotation matrix, then translation)."""
    rotation = np.asarray(rotation, dtype=float)
    points = cloud.points @ rotation.T + np.asarray(translation, dtype=float)
    normals = None if cloud.normals is None else cloud.normals @ rotation.T
    return build_cloud(points, normals, cloud.name)


def _read_table(text, source):
    try:
        df = pd.read_csv(io.StringIO(text), sep=r"\s+", header=None, comment="#", engine="python")
    except pd.errors.EmptyDataError:
        raise CloudError(f"{source}: no vertices")
    except Exception as e:
        raise CloudError(f"{source}: cannot parse ({e})")
    return df


def _read_mesh_vertices(path):
    """PLY through open3d's point-cloud reader (ASCII or binary), OBJ through its mesh reader (vertices only)."""
    try:
        if path.suffix.lower() == ".ply":
            pcd = o3d.io.read_point_cloud(str(path), format="ply")
            points = np.asarray(pcd.points)
            normals = np.asarray(pcd.normals) if pcd.has_normals() else None
        else:
            mesh = o3d.io.read_triangle_mesh(str(path))
            points, normals = np.asarray(mesh.vertices), None
    except Exception as e:
        raise CloudError(f"{path}: cannot parse ({e})")
    if points.shape[0] == 0:
        # open3d reports malformed files as empty geometry
        raise CloudError(f"{path}: no readable vertices")
    return points, normals


def read_cloud(path, scale=1.0) -> ObjectCloud:
    """Read a PLY, OBJ (vertices only) or whitespace XYZ cloud; coordinates multiplied by scale."""
    path = Path(path)
    if not path.is_file():
        raise CloudError(f"cloud file not found: {path}")
    normals = None

    if path.suffix.lower() in (".ply", ".obj"):
        points, normals = _read_mesh_vertices(path)
    else:
        df = _read_table(path.read_text(encoding="utf-8", errors="replace"), path)
        if df.shape[1] not in (3, 6):
            raise CloudError(f"{path}: expected 3 or 6 columns, found {df.shape[1]}")
        points = df.iloc[:, :3].to_numpy(dtype=float)
        if df.shape[1] == 6:
            normals = df.iloc[:, 3:6].to_numpy(dtype=float)

    cloud = build_cloud(points * float(scale), normals, name=path.stem)
    logger.info(f"Read {cloud.size} points from {path} (normals={cloud.has_normals}, scale={scale})")
    return cloud


def _format_rows(cloud: ObjectCloud):
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    df = pd.DataFrame(data)
    return df.to_csv(sep=" ", header=False, index=False, float_format="%.12g", lineterminator="\n")


def write_cloud(path, cloud: ObjectCloud):
    """Write a cloud as ASCII PLY or XYZ depending on the suffix."""
    path = Path(path)
    rows = _format_rows(cloud)
    if path.suffix.lower() == ".ply":
        header = ["ply", "format ascii 1.0", f"element vertex {cloud.size}"]
        header += [f"property double {c}" for c in ("x", "y", "z")]
        if cloud.has_normals:
            header += [f"property double {c}" for c in ("nx", "ny", "nz")]
        header.append("end_header")
        text = "\n".join(header) + "\n" + rows
    else:
        text = rows
    atomic_write_text(path, text)
    logger.info(f"Wrote {cloud.size} points to {path}")
    return path
