import math

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from app.src.geometry import mesh as mesh_ops
from app.src.geometry.rotations import (
    axis_angle_to_euler,
    euler_to_axis_angle,
    euler_to_quaternion,
    quaternion_to_matrix,
)
from app.src.models.body_model import (
    DisplacementField,
    PoseParams,
    apply_displacements,
    clamp_pose,
    hand_pose_vector,
    skin,
    upsample_mesh,
)
from app.src.models.rig_io import load_rig, save_rig
from app.src.schemas.base import PoseRecord, Segment


def random_pose(template, seed: int = 0) -> PoseParams:
    gen = torch.Generator().manual_seed(seed)
    pose = PoseParams.identity(template)
    pose.theta = 0.3 * torch.randn(template.n_joints, 3, generator=gen, dtype=torch.float64)
    pose.beta = torch.randn(template.n_shape, generator=gen, dtype=torch.float64)
    pose.psi = torch.randn(template.n_expression, generator=gen, dtype=torch.float64)
    return pose


class TestSkinning:
    def test_identity_pose_returns_rest_vertices(self, small_toy_rig):
        mesh = skin(small_toy_rig, PoseParams.identity(small_toy_rig))
        torch.testing.assert_close(mesh.vertices, small_toy_rig.rest_vertices, atol=1e-12, rtol=0)
        torch.testing.assert_close(mesh.joints, small_toy_rig.joints, atol=1e-12, rtol=0)

    def test_global_transform_is_rigid(self, small_toy_rig):
        pose = random_pose(small_toy_rig)
        local = skin(small_toy_rig, pose)
        q = torch.as_tensor(euler_to_quaternion(np.array([0.4, -0.2, 1.1])))
        t = torch.tensor([0.3, -0.1, 2.0], dtype=torch.float64)
        pose.global_rot = q
        pose.global_trans = t
        moved = skin(small_toy_rig, pose)
        expected = local.vertices @ quaternion_to_matrix(q).T + t
        torch.testing.assert_close(moved.vertices, expected, atol=1e-9, rtol=0)

    def test_bent_elbow_rotates_forearm(self, elbow_rig):
        pose = PoseParams.identity(elbow_rig)
        pose.theta[1] = torch.tensor([0.0, 0.0, math.pi / 2])
        mesh = skin(elbow_rig, pose)
        torch.testing.assert_close(
            mesh.vertices[0], torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-9, rtol=0
        )

    def test_pose_dimension_mismatch_is_rejected(self, small_toy_rig):
        pose = PoseParams.identity(small_toy_rig)
        pose.theta = torch.zeros(small_toy_rig.n_joints + 1, 3, dtype=torch.float64)
        with pytest.raises(ValueError, match="theta"):
            skin(small_toy_rig, pose)

    def test_non_unit_quaternion_record_is_rejected(self):
        record = PoseRecord(theta=[[0.0, 0.0, 0.0]], global_rot=[2.0, 0.0, 0.0, 0.0])
        with pytest.raises(ValueError, match="unit norm"):
            PoseParams.from_record(record)


class TestClampPose:
    def test_values_inside_limits_are_kept_and_outside_clipped(self, template_factory):
        limits = torch.tensor([[[-0.5, 0.5]] * 3], dtype=torch.float64)
        rig = template_factory(
            vertices=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces=[[0, 1, 2]],
            joints=[[0.0, 0.0, 0.0]],
            parents=[-1],
            weights=[[1.0]] * 3,
            limits=limits,
        )
        pose = PoseParams.identity(rig)
        pose.theta[0] = torch.tensor([0.2, 1.2, -0.9])
        clamped = clamp_pose(rig, pose)
        torch.testing.assert_close(clamped.theta[0], torch.tensor([0.2, 0.5, -0.5], dtype=torch.float64))
        again = clamp_pose(rig, clamped)
        assert torch.equal(again.theta, clamped.theta)

    def test_locked_axes_become_zero(self, small_toy_rig):
        pose = PoseParams.identity(small_toy_rig)
        pose.theta.fill_(0.7)
        clamped = clamp_pose(small_toy_rig, pose)
        assert bool((clamped.theta[small_toy_rig.locked] == 0).all())
        tip = small_toy_rig.joint_names.index("left_tip")
        assert float(clamped.theta[tip, 2]) == pytest.approx(0.7)


class TestHandPose:
    def test_toy_hand_has_three_values_per_joint(self, small_toy_rig):
        pose = random_pose(small_toy_rig)
        vector = hand_pose_vector(small_toy_rig, pose, Segment.LEFT_HAND)
        assert vector.shape == (3 * len(small_toy_rig.joints_in_segment(Segment.LEFT_HAND)),)

    def test_fifteen_joint_hand_gives_45_values(self, template_factory):
        joints = [[0.0, 0.0, 0.0]] + [[0.1 * (j + 1), 0.0, 0.0] for j in range(15)]
        parents = [-1] + list(range(15))
        rig = template_factory(
            vertices=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces=[[0, 1, 2]],
            joints=joints,
            parents=parents,
            weights=[[1.0] + [0.0] * 15] * 3,
            joint_segments=[Segment.BODY] + [Segment.LEFT_HAND] * 15,
        )
        pose = PoseParams.identity(rig)
        pose.theta = torch.arange(48, dtype=torch.float64).reshape(16, 3)
        vector = hand_pose_vector(rig, pose, Segment.LEFT_HAND)
        assert vector.shape == (45,)
        assert torch.equal(vector, torch.arange(3, 48, dtype=torch.float64))

    def test_body_segment_is_not_a_hand(self, small_toy_rig):
        with pytest.raises(ValueError):
            hand_pose_vector(small_toy_rig, PoseParams.identity(small_toy_rig), Segment.BODY)


class TestEulerConversion:
    def test_zero_rotation(self):
        rotvec, flagged = euler_to_axis_angle(np.zeros(3))
        np.testing.assert_allclose(rotvec, np.zeros(3), atol=1e-12)
        assert not flagged

    def test_quarter_turn_about_x(self):
        rotvec, _ = euler_to_axis_angle(np.array([math.pi / 2, 0.0, 0.0]))
        np.testing.assert_allclose(rotvec, [math.pi / 2, 0.0, 0.0], atol=1e-9)

    def test_round_trip_away_from_gimbal_lock(self):
        rng = np.random.default_rng(3)
        euler = rng.uniform(-1.0, 1.0, size=(20, 3))
        rotvec, _ = euler_to_axis_angle(euler)
        back, flagged = axis_angle_to_euler(rotvec)
        assert not flagged
        np.testing.assert_allclose(back, euler, atol=1e-9)

    def test_gimbal_lock_is_flagged_and_rotation_preserved(self):
        euler = np.array([0.1, math.pi / 2, 0.2])
        rotvec, flagged = euler_to_axis_angle(euler)
        assert flagged
        back, flagged_back = axis_angle_to_euler(rotvec)
        assert flagged_back
        np.testing.assert_allclose(
            Rotation.from_euler("XYZ", back).as_matrix(),
            Rotation.from_euler("XYZ", euler).as_matrix(),
            atol=1e-6,
        )

    def test_non_finite_angles_are_rejected(self):
        with pytest.raises(ValueError):
            euler_to_axis_angle(np.array([np.nan, 0.0, 0.0]))


class TestUpsample:
    def test_large_thresholds_leave_the_rig_untouched(self, triangle_rig):
        assert upsample_mesh(triangle_rig, 10.0, 10.0) is triangle_rig

    def test_large_face_gets_a_centroid(self, triangle_rig):
        up = upsample_mesh(triangle_rig, 0.1, 10.0)
        assert up.n_vertices == 4
        assert up.faces.shape == (3, 3)
        torch.testing.assert_close(up.rest_vertices[3], torch.tensor([1 / 3, 1 / 3, 0.0], dtype=torch.float64))
        assert up.n_original_vertices == 3

    def test_long_edges_get_midpoints(self, small_toy_rig):
        faces = small_toy_rig.faces.numpy()
        rest = small_toy_rig.rest_vertices.numpy()
        edges, _ = mesh_ops.unique_edges(faces)
        lengths = np.linalg.norm(rest[edges[:, 1]] - rest[edges[:, 0]], axis=1)
        threshold = float(np.median(lengths))
        up = upsample_mesh(small_toy_rig, 1e6, threshold)
        assert up.n_vertices == small_toy_rig.n_vertices + int((lengths > threshold).sum())
        torch.testing.assert_close(
            up.skin_weights.sum(dim=1), torch.ones(up.n_vertices, dtype=torch.float64), atol=1e-9, rtol=0
        )
        assert torch.equal(up.rest_vertices[: small_toy_rig.n_vertices], small_toy_rig.rest_vertices)

    def test_thresholds_must_be_positive(self, triangle_rig):
        with pytest.raises(ValueError):
            upsample_mesh(triangle_rig, 0.0, 1.0)


class TestDisplacements:
    def test_zero_field_keeps_vertices(self, triangle_rig):
        mesh = skin(triangle_rig, PoseParams.identity(triangle_rig))
        displaced = apply_displacements(mesh, DisplacementField.zeros(3, dtype=torch.float64))
        assert torch.equal(displaced.vertices, mesh.vertices)

    def test_displacement_moves_along_the_normal(self, triangle_rig):
        mesh = skin(triangle_rig, PoseParams.identity(triangle_rig))
        d = torch.zeros(3, 3, dtype=torch.float64)
        d[0] = torch.tensor([0.5, 0.5, 0.01])
        displaced = apply_displacements(mesh, DisplacementField(d))
        torch.testing.assert_close(
            displaced.vertices[0], torch.tensor([0.0, 0.0, 0.01], dtype=torch.float64), atol=1e-12, rtol=0
        )

    def test_uniform_displacement_inflates_by_the_normal(self, triangle_rig):
        mesh = skin(triangle_rig, PoseParams.identity(triangle_rig))
        displaced = apply_displacements(mesh, DisplacementField(torch.full((3, 3), 0.02, dtype=torch.float64)))
        torch.testing.assert_close(displaced.vertices, mesh.vertices + 0.02 * mesh.vertex_normals)

    def test_caps_bound_the_offset(self, triangle_rig):
        mesh = skin(triangle_rig, PoseParams.identity(triangle_rig))
        d = torch.zeros(3, 3, dtype=torch.float64)
        d[0] = torch.tensor([0.5, 0.5, 0.01])
        cap = 0.001
        displaced = apply_displacements(mesh, DisplacementField(d), caps=[cap] * 4)
        assert displaced.clamped_displacements == 1
        assert float((displaced.vertices - mesh.vertices).norm(dim=-1).max()) <= cap + 1e-12

    def test_field_must_cover_original_vertices(self, triangle_rig):
        mesh = skin(triangle_rig, PoseParams.identity(triangle_rig))
        with pytest.raises(ValueError):
            apply_displacements(mesh, DisplacementField.zeros(4, dtype=torch.float64))


class TestRigFile:
    def test_saved_rig_skins_identically(self, small_toy_rig, tmp_path):
        path = tmp_path / "rig.json"
        save_rig(small_toy_rig, path)
        loaded = load_rig(path, dtype=torch.float64)
        pose = random_pose(small_toy_rig, seed=5)
        torch.testing.assert_close(skin(loaded, pose).vertices, skin(small_toy_rig, pose).vertices)
        assert torch.equal(loaded.locked, small_toy_rig.locked)
