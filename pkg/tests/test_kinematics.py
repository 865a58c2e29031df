import math

import numpy as np
import pytest

from backend.core.errors import InvalidInputError, ShapeError
from backend.core.kinematics import (
    Skeleton,
    VertexCloud,
    compose_error,
    forward_kinematics,
    generate_cloud,
    mpjpe,
    mpjpe_per_joint,
    mpve,
    mpve_per_joint,
    skin_vertices,
    vertex_errors,
    world_transforms,
)
from backend.models import CloudConfig

SKELETON = Skeleton()


def rodrigues(vector):
    angle = math.sqrt(sum(c * c for c in vector))
    if angle == 0.0:
        return np.eye(3)
    x, y, z = (c / angle for c in vector)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def oracle_frame(pose, skeleton=SKELETON):
    rotations, positions = [], []
    for j, parent in enumerate(skeleton.parents):
        local = rodrigues(pose[3 * j:3 * j + 3])
        if parent < 0:
            rotations.append(local)
            positions.append(skeleton.offsets[j].copy())
        else:
            rotations.append(rotations[parent] @ local)
            positions.append(positions[parent] + rotations[parent] @ skeleton.offsets[j])
    return rotations, positions


def oracle_mpjpe(gt, pred):
    total, count = 0.0, 0
    for g, p in zip(gt.reshape(-1, 9), pred.reshape(-1, 9)):
        _, gp = oracle_frame(g)
        _, pp = oracle_frame(p)
        for j in range(3):
            total += math.dist(gp[j], pp[j]) * 1000.0
            count += 1
    return total / count


def oracle_vertices(pose, cloud):
    rotations, positions = oracle_frame(pose)
    rest = SKELETON.rest_positions()
    out = []
    for v, w in zip(cloud.rest, cloud.weights):
        point = np.zeros(3)
        for j in range(3):
            point += w[j] * (rotations[j] @ (v - rest[j]) + positions[j])
        out.append(point)
    return out


def oracle_mpve(gt, pred, cloud):
    total, count = 0.0, 0
    for g, p in zip(gt.reshape(-1, 9), pred.reshape(-1, 9)):
        for a, b in zip(oracle_vertices(g, cloud), oracle_vertices(p, cloud)):
            total += math.dist(a, b) * 1000.0
            count += 1
    return total / count


@pytest.fixture
def small_cloud():
    return generate_cloud(CloudConfig(n_vertices=12, seed=4))


class TestForwardKinematics:
    def test_zero_pose_is_rest(self):
        np.testing.assert_array_equal(forward_kinematics(np.zeros(9)), SKELETON.rest_positions())

    def test_neck_yaw_quarter_turn(self):
        pose = np.zeros(9)
        pose[1] = math.pi / 2
        joints = forward_kinematics(pose)
        head_offset = rodrigues([0.0, math.pi / 2, 0.0]) @ np.array([0.0, 0.10, 0.0])
        np.testing.assert_allclose(joints[1], joints[0] + head_offset, atol=1e-15)

    def test_neck_pitch_swings_head_forward(self):
        pose = np.zeros(9)
        pose[0] = math.pi / 2
        np.testing.assert_allclose(forward_kinematics(pose)[1], [0.0, 0.0, 0.10], atol=1e-15)

    def test_jaw_rotation_leaves_parents(self, rng):
        pose = rng.uniform(-0.5, 0.5, size=9)
        moved = pose.copy()
        moved[6:] = [0.4, -0.1, 0.1]
        np.testing.assert_array_equal(forward_kinematics(moved)[:2], forward_kinematics(pose)[:2])

    def test_batch_shape(self, rng):
        assert forward_kinematics(rng.normal(size=(2, 5, 9)) * 0.3).shape == (2, 5, 3, 3)

    def test_bad_width(self):
        with pytest.raises(ShapeError):
            forward_kinematics(np.zeros(8))

    def test_matches_oracle(self, rng):
        for pose in rng.uniform(-1.0, 1.0, size=(20, 9)):
            _, expected = oracle_frame(pose)
            np.testing.assert_allclose(forward_kinematics(pose), np.array(expected), atol=1e-12)


class TestSkinning:
    def test_zero_pose_gives_rest_vertices(self, small_cloud):
        np.testing.assert_allclose(skin_vertices(np.zeros(9), cloud=small_cloud), small_cloud.rest, atol=1e-15)

    def test_head_only_vertex_is_rigid(self, rng):
        vertex = np.array([[0.02, 0.13, 0.01]])
        cloud = VertexCloud(rest=vertex, weights=np.array([[0.0, 1.0, 0.0]]))
        pose = rng.uniform(-0.6, 0.6, size=9)
        rotations, positions = world_transforms(pose)
        expected = rotations[1] @ (vertex[0] - SKELETON.rest_positions()[1]) + positions[1]
        np.testing.assert_allclose(skin_vertices(pose, cloud=cloud)[0], expected, atol=1e-14)

    def test_half_head_half_jaw_is_midpoint(self, rng):
        vertex = np.array([[0.0, 0.08, 0.04]])
        cloud = VertexCloud(rest=vertex, weights=np.array([[0.0, 0.5, 0.5]]))
        pose = rng.uniform(-0.4, 0.4, size=9)
        rotations, positions = world_transforms(pose)
        rest = SKELETON.rest_positions()
        head = rotations[1] @ (vertex[0] - rest[1]) + positions[1]
        jaw = rotations[2] @ (vertex[0] - rest[2]) + positions[2]
        np.testing.assert_allclose(skin_vertices(pose, cloud=cloud)[0], (head + jaw) / 2, atol=1e-14)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InvalidInputError):
            VertexCloud(rest=np.zeros((1, 3)), weights=np.array([[0.5, 0.4, 0.0]]))

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidInputError):
            VertexCloud(rest=np.zeros((1, 3)), weights=np.array([[1.2, -0.2, 0.0]]))

    def test_generated_cloud(self):
        cloud = generate_cloud(CloudConfig(n_vertices=30, seed=1))
        assert cloud.n_vertices == 30
        np.testing.assert_allclose(cloud.weights.sum(axis=1), 1.0, atol=1e-12)
        assert set(cloud.dominant_joint()) == {0, 1, 2}
        np.testing.assert_array_equal(generate_cloud(CloudConfig(n_vertices=30, seed=1)).rest, cloud.rest)

    def test_generated_cloud_keeps_round_robin_assignment(self):
        cloud = generate_cloud(CloudConfig(n_vertices=3, seed=5))
        np.testing.assert_array_equal(cloud.dominant_joint(), [0, 1, 2])

    def test_assignment_must_name_a_joint(self):
        with pytest.raises(InvalidInputError):
            VertexCloud(rest=np.zeros((1, 3)), weights=np.array([[1.0, 0.0, 0.0]]), assignment=[3])


class TestMetrics:
    def test_identical_poses(self, rng, small_cloud):
        pose = rng.uniform(-0.5, 0.5, size=(2, 3, 9))
        assert mpjpe(pose, pose) == 0.0
        assert mpve(pose, pose, cloud=small_cloud) == 0.0

    def test_constant_joint_displacement(self, rng):
        pose = rng.uniform(-0.5, 0.5, size=(2, 3, 9))
        assert mpjpe(pose, pose, pred_root_translation=[0.005, 0.0, 0.0]) == pytest.approx(5.0, abs=1e-9)

    def test_rigid_vertex_translation(self, rng, small_cloud):
        pose = rng.uniform(-0.5, 0.5, size=(2, 3, 9))
        value = mpve(pose, pose, cloud=small_cloud, pred_root_translation=[0.0, 0.003, 0.0])
        assert value == pytest.approx(3.0, abs=1e-9)

    def test_loop_oracles(self, rng, small_cloud):
        for _ in range(100):
            gt = rng.uniform(-0.8, 0.8, size=(2, 3, 9))
            pred = rng.uniform(-0.8, 0.8, size=(2, 3, 9))
            assert mpjpe(gt, pred) == pytest.approx(oracle_mpjpe(gt, pred), abs=1e-9)
            assert mpve(gt, pred, cloud=small_cloud) == pytest.approx(oracle_mpve(gt, pred, small_cloud), abs=1e-9)

    def test_shared_translation_is_invariant(self, rng):
        gt = rng.uniform(-0.5, 0.5, size=(4, 9))
        pred = rng.uniform(-0.5, 0.5, size=(4, 9))
        shift = np.array([0.3, -0.2, 1.5])
        moved = np.linalg.norm(
            forward_kinematics(gt, root_translation=shift) - forward_kinematics(pred, root_translation=shift),
            axis=-1,
        ).mean() * 1000.0
        assert moved == pytest.approx(mpjpe(gt, pred), abs=1e-9)

    def test_per_joint_breakdown(self, rng, small_cloud):
        gt = rng.uniform(-0.5, 0.5, size=(3, 9))
        pred = gt.copy()
        pred[:, 6] += 0.2
        per_joint = mpjpe_per_joint(gt, pred)
        assert per_joint[0] == 0.0 and per_joint[1] == 0.0 and per_joint[2] > 0.0
        assert mpjpe(gt, pred) == pytest.approx(per_joint.mean())
        per_vertex_joint = mpve_per_joint(gt, pred, cloud=small_cloud)
        assert per_vertex_joint.shape == (3,)
        assert np.all(np.isfinite(per_vertex_joint))
        assert per_vertex_joint[2] > per_vertex_joint[0]

    def test_per_joint_vertex_error_for_joint_without_vertices(self, rng):
        cloud = VertexCloud(
            rest=np.array([[0.0, 0.0, 0.01], [0.0, 0.10, 0.02]]),
            weights=np.array([[0.6, 0.3, 0.1], [0.1, 0.6, 0.3]]),
        )
        gt = rng.uniform(-0.3, 0.3, size=(2, 9))
        pred = gt + 0.05
        per_vertex = vertex_errors(gt, pred, cloud=cloud).mean(axis=0)
        per_joint = mpve_per_joint(gt, pred, cloud=cloud)
        assert per_joint[0] == pytest.approx(per_vertex[0])
        assert per_joint[1] == pytest.approx(per_vertex[1])
        assert per_joint[2] == pytest.approx((0.1 * per_vertex[0] + 0.3 * per_vertex[1]) / 0.4)

    def test_per_joint_vertex_error_needs_every_joint_weighted(self, rng):
        cloud = VertexCloud(rest=np.zeros((2, 3)), weights=np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]))
        pose = rng.uniform(-0.3, 0.3, size=(2, 9))
        with pytest.raises(InvalidInputError, match="jaw"):
            mpve_per_joint(pose, pose + 0.05, cloud=cloud)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mpjpe(np.zeros((2, 9)), np.zeros((3, 9)))


class TestComposeError:
    def test_reported_inputs(self):
        value = compose_error(24.9, 6.7)
        assert value == pytest.approx(25.786, abs=1e-3)
        assert abs(25.9 - value) <= 0.15

    @pytest.mark.parametrize("a,b,expected", [(3.0, 4.0, 5.0), (0.0, 7.5, 7.5), (2.0, 0.0, 2.0)])
    def test_values(self, a, b, expected):
        assert compose_error(a, b) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("a,b", [(-1.0, 2.0), (1.0, float("nan"))])
    def test_invalid(self, a, b):
        with pytest.raises(InvalidInputError):
            compose_error(a, b)
