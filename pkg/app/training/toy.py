import logging
from pathlib import Path

from app.config import ObjectSpec, RunConfig
from app.geometry.cloud import read_cloud
from app.geometry.synth import synth_object
from app.models import GraspSet, HandModel, ObjectCloud
from app.storage.grasp_files import read_grasp_set, write_grasp_set
from app.training.targets import generate_targets

logger = logging.getLogger(__name__)


def load_object(spec: ObjectSpec, seed: int) -> ObjectCloud:
    """Cloud for a run-config object entry: a file on disk or a synthetic primitive."""
    if spec.path is not None:
        cloud = read_cloud(spec.path, spec.scale)
        return ObjectCloud(cloud.points, cloud.normals, cloud.index, spec.name)
    return synth_object(spec.kind, spec.size, spec.points, seed, spec.center, spec.axis, name=spec.name)


def load_objects(config: RunConfig) -> dict:
    return {spec.name: load_object(spec, config.seed) for spec in config.objects}


def object_targets(model: HandModel, spec: ObjectSpec, cloud: ObjectCloud, config: RunConfig, out_dir=None) -> GraspSet:
    """Frozen targets from the object entry's file, or freshly generated ones written under out_dir/targets."""
    if spec.targets is not None:
        return read_grasp_set(spec.targets, model)
    targets = generate_targets(model, cloud, config.target_count, config.seed, config.tta, config.q1)
    if out_dir is not None:
        write_grasp_set(Path(out_dir) / "targets" / f"{spec.name}.json", targets)
    return targets


def load_targets(model: HandModel, config: RunConfig, clouds: dict, out_dir=None) -> dict:
    return {spec.name: object_targets(model, spec, clouds[spec.name], config, out_dir) for spec in config.objects}
