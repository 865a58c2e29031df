import numpy as np
import pytest

from backend.core import autodiff as ad
from backend.core.autodiff import Tape, Tensor
from backend.core.biomech import bio_penalty, clamp_to_limits
from backend.core.errors import ShapeError
from backend.models import JointLimits

LIMITS = JointLimits()
MID = np.asarray(LIMITS.midpoints())


def single_frame(**overrides) -> np.ndarray:
    index = {"head_pitch": 3, "head_yaw": 4, "jaw_pitch": 6}
    pose = MID.copy()
    for name, value in overrides.items():
        pose[index[name]] = value
    return pose.reshape(1, 1, 9)


class TestJointLimits:
    def test_default_table(self):
        assert LIMITS.lower == (-1.05, -1.05, -0.70, -0.52, -0.79, -0.52, 0.0, -0.17, -0.17)
        assert LIMITS.upper == (1.05, 1.05, 0.70, 0.52, 0.79, 0.52, 0.52, 0.17, 0.17)

    def test_per_joint_override(self):
        limits = JointLimits.model_validate({"jaw": [[0.0, 0.6], [-0.2, 0.2], [-0.2, 0.2]]})
        assert limits.upper[6] == 0.6
        assert limits.lower[:6] == LIMITS.lower[:6]

    def test_inverted_bounds_rejected(self):
        with pytest.raises(ValueError):
            JointLimits.model_validate({"head": [[0.5, -0.5], [-0.79, 0.79], [-0.52, 0.52]]})


class TestBioPenalty:
    def test_midpoints_give_zero(self):
        assert bio_penalty(np.tile(MID, (2, 3, 1))).item() == 0.0

    def test_upper_violation(self):
        assert bio_penalty(single_frame(head_pitch=0.62)).item() == pytest.approx(0.01 / 9, abs=1e-12)

    def test_lower_violation(self):
        assert bio_penalty(single_frame(jaw_pitch=-0.10)).item() == pytest.approx(0.01 / 9, abs=1e-12)

    def test_boundary_is_feasible(self):
        assert bio_penalty(single_frame(head_pitch=0.52)).item() == 0.0

    def test_monotone_above_limit(self):
        values = [bio_penalty(single_frame(head_yaw=v)).item() for v in (0.8, 0.9, 1.0)]
        assert values[0] < values[1] < values[2]

    def test_gradient(self):
        y = Tensor(np.concatenate([single_frame(head_pitch=0.62), single_frame(jaw_pitch=-0.10)]), requires_grad=True)
        with Tape() as tape:
            tape.backward(bio_penalty(y))
        expected = np.zeros((2, 1, 9))
        expected[0, 0, 3] = 2 * 0.10 / 18
        expected[1, 0, 6] = -2 * 0.10 / 18
        np.testing.assert_allclose(y.grad, expected, atol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        y = Tensor(rng.uniform(-1.5, 1.5, size=(2, 3, 9)), requires_grad=True)
        report = ad.grad_check(lambda: bio_penalty(y), {"y": y}, tolerance=1e-6)
        assert report.passed

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            bio_penalty(np.zeros((2, 9)))


class TestClamp:
    def test_in_range_unchanged(self):
        np.testing.assert_array_equal(clamp_to_limits(MID), MID)

    def test_clips_both_sides(self):
        pose = MID.copy()
        pose[4], pose[6] = 1.2, -0.3
        out = clamp_to_limits(pose)
        assert out[4] == 0.79
        assert out[6] == 0.0

    def test_idempotent_and_feasible(self, rng):
        poses = rng.uniform(-2, 2, size=(4, 5, 9))
        once = clamp_to_limits(poses)
        np.testing.assert_array_equal(clamp_to_limits(once), once)
        assert bio_penalty(once).item() == 0.0
