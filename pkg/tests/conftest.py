import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.geometry.synth import synth_object
from app.kinematics.hand_config import load_hand_file
from app.models import HandPose


@pytest.fixture(scope="session")
def pinch():
    return load_hand_file("pinch2")


@pytest.fixture(scope="session")
def shadow():
    return load_hand_file("shadow22")


@pytest.fixture(scope="session")
def sphere():
    return synth_object("sphere", 0.03, 2048, seed=0, center=(0.015, 0.0, 0.05), name="sphere")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(model, rng, spread=0.05):
    """Uniform rotation, translation near the origin, joints strictly inside their limits."""
    quaternion = Rotation.random(random_state=rng).as_quat()[[3, 0, 1, 2]]
    translation = rng.uniform(-spread, spread, 3)
    joints = rng.uniform(model.joint_lower + 0.05 * model.joint_range, model.joint_upper - 0.05 * model.joint_range)
    return HandPose(quaternion, translation, joints)


def straight_pinch_pose():
    """pinch2 with straight fingers at the origin; finger_a sits 5 mm inside the sphere fixture."""
    return HandPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.zeros(2))


def finite_difference(function, pose: HandPose, steps=(1e-5, 5e-6)):
    """Central differences of function(pose) over the 7+J vector (r renormalized).

    Returns (estimate at the first step, mask of coordinates where both step sizes agree).
    Coordinates where they disagree straddle a kink and are left out of comparisons.
    """
    base = pose.as_vector()
    estimates = []
    for h in steps:
        gradient = np.zeros_like(base)
        for k in range(base.shape[0]):
            plus, minus = base.copy(), base.copy()
            plus[k] += h
            minus[k] -= h
            gradient[k] = (
                function(HandPose.from_vector(plus, pose.dof)) - function(HandPose.from_vector(minus, pose.dof))
            ) / (2.0 * h)
        estimates.append(gradient)
    first, second = estimates
    scale = max(np.abs(first).max(), 1e-12)
    smooth = np.abs(first - second) <= 1e-3 * np.maximum(np.abs(first), 1e-3 * scale)
    return first, smooth


def assert_gradient_matches(analytic, function, pose, rtol=1e-4):
    numeric, smooth = finite_difference(function, pose)
    scale = max(np.abs(numeric).max(), 1e-12)
    error = np.abs(analytic - numeric)
    allowed = rtol * np.maximum(np.abs(numeric), 1e-3 * scale)
    assert np.all(error[smooth] <= allowed[smooth]), (analytic, numeric, smooth)
