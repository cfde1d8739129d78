class GraspToolkitError(Exception):
    """Base class for every error raised by the grasp pipelines."""


class HandConfigError(GraspToolkitError):
    """Malformed hand-config document. The message names the offending field."""

    def __init__(self, field: str, problem: str):
        self.field = field
        super().__init__(f"{field}: {problem}")


class HandStructureError(GraspToolkitError):
    """Well-formed hand document describing an invalid kinematic structure."""


class PoseError(GraspToolkitError):
    """Pose parameters that violate HandPose invariants."""


class CloudError(GraspToolkitError):
    """Object point cloud that cannot be built or read."""


class FileFormatError(GraspToolkitError):
    """Grasp-set, snapshot or report file that does not match its schema."""


class ConfigError(GraspToolkitError):
    """Run configuration that fails validation."""


class GeometryError(GraspToolkitError):
    """Degenerate geometry a metric cannot be evaluated on, such as a zero-radius object."""


class TargetGenerationError(GraspToolkitError):
    """No acceptable target grasp was found within the attempt budget."""


VALIDATION_ERRORS = (
    HandConfigError,
    HandStructureError,
    PoseError,
    CloudError,
    FileFormatError,
    ConfigError,
    GeometryError,
)
