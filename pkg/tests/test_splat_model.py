import math

import pytest
import torch
from torch import nn

from app.src.models.body_model import PoseParams, PosedMesh, skin
from app.src.models.predictor import AttributePredictor, DisplacementPredictor
from app.src.models.splat_model import (
    GaussianAttributes,
    SplatAnchor,
    SplatModel,
    anchor_position,
    anchor_positions,
    build_covariance,
    covariance_from,
    eval_gaussian,
    predict_attributes,
    realized_scale,
)
from app.src.rendering.sh import SH_C0, eval_sh

S_MAX = [0.06, 0.04, 0.015, 0.015]


@pytest.fixture
def triangle_mesh(triangle_rig) -> PosedMesh:
    return skin(triangle_rig, PoseParams.identity(triangle_rig))


def random_attributes(n: int, seed: int = 0) -> GaussianAttributes:
    gen = torch.Generator().manual_seed(seed)
    rotation = torch.randn(n, 4, generator=gen, dtype=torch.float64)
    return GaussianAttributes(
        log_scale=torch.randn(n, 3, generator=gen, dtype=torch.float64),
        rotation=rotation / rotation.norm(dim=-1, keepdim=True),
        opacity_logit=torch.randn(n, generator=gen, dtype=torch.float64),
        sh=torch.randn(n, 16, 3, generator=gen, dtype=torch.float64),
    )


class TestAnchors:
    def test_corner_coefficients_pick_the_vertex(self, triangle_mesh):
        position = anchor_position(SplatAnchor(face_id=0, k=torch.tensor([1.0, 0.0, 0.0])), triangle_mesh)
        torch.testing.assert_close(position, triangle_mesh.vertices[0])

    def test_centroid(self, triangle_mesh):
        position = anchor_position(SplatAnchor(face_id=0, k=torch.full((3,), 1 / 3)), triangle_mesh)
        torch.testing.assert_close(position, triangle_mesh.vertices.mean(dim=0))

    def test_offset_along_the_face_normal(self, triangle_mesh):
        anchor = SplatAnchor(face_id=0, k=torch.tensor([0.2, 0.3, 0.5]), l=0.1)
        position = anchor_position(anchor, triangle_mesh)
        torch.testing.assert_close(position, torch.tensor([0.3, 0.5, 0.1], dtype=torch.float64))

    def test_unknown_face_is_rejected(self, triangle_mesh):
        with pytest.raises(ValueError, match="face_id"):
            anchor_position(SplatAnchor(face_id=1, k=torch.tensor([1.0, 0.0, 0.0])), triangle_mesh)

    def test_anchors_follow_rigid_motion(self, small_toy_rig):
        model = SplatModel.create_from_template(small_toy_rig, S_MAX)
        pose = PoseParams.identity(small_toy_rig)
        pose.theta = 0.2 * torch.ones(small_toy_rig.n_joints, 3, dtype=torch.float64)
        local = skin(small_toy_rig, pose)
        angle = 0.7
        pose.global_rot = torch.tensor([math.cos(angle / 2), 0.0, math.sin(angle / 2), 0.0], dtype=torch.float64)
        pose.global_trans = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
        moved = skin(small_toy_rig, pose)
        rotation = torch.tensor(
            [[math.cos(angle), 0.0, math.sin(angle)], [0.0, 1.0, 0.0], [-math.sin(angle), 0.0, math.cos(angle)]],
            dtype=torch.float64,
        )
        ids = model.active_ids()
        k = model.convex_k(ids).detach()
        l = torch.full((len(ids),), 0.005, dtype=torch.float64)

        def positions(mesh: PosedMesh) -> torch.Tensor:
            return anchor_positions(model.face_id[ids], k, l, mesh.vertices, mesh.faces, mesh.face_normals)

        expected = positions(local) @ rotation.T + pose.global_trans
        torch.testing.assert_close(positions(moved), expected, atol=1e-9, rtol=0)


class TestSplatModel:
    def test_one_original_splat_per_vertex(self, small_toy_rig):
        model = SplatModel.create_from_template(small_toy_rig, S_MAX)
        assert model.capacity == small_toy_rig.n_vertices
        ids = model.active_ids()
        positions = anchor_positions(
            model.face_id[ids],
            model.convex_k(ids),
            model.offsets(ids),
            small_toy_rig.rest_vertices,
            small_toy_rig.faces,
            skin(small_toy_rig, PoseParams.identity(small_toy_rig)).face_normals,
        )
        torch.testing.assert_close(positions, small_toy_rig.rest_vertices, atol=1e-12, rtol=0)

    def test_initial_scales_stay_below_their_limit(self, small_toy_rig):
        model = SplatModel.create_from_template(small_toy_rig, S_MAX)
        scale = realized_scale(model.log_scale, model.segment, S_MAX)
        limit = torch.tensor(S_MAX, dtype=torch.float64)[model.segment].unsqueeze(-1)
        assert bool((scale < limit).all())
        assert bool((scale > 0).all())

    def test_project_constraints_restores_offsets_and_unit_quaternions(self, small_toy_rig):
        model = SplatModel.create_from_template(small_toy_rig, S_MAX, l_max=0.02)
        with torch.no_grad():
            model.l.fill_(1.0)
            model.rotation.mul_(3.0)
        model.project_constraints()
        assert float(model.l.max()) == pytest.approx(0.02)
        torch.testing.assert_close(model.rotation.norm(dim=-1), torch.ones(model.capacity, dtype=torch.float64))


class TestCovariance:
    def test_identity_rotation_gives_a_diagonal(self):
        cov = covariance_from(torch.tensor([[0.1, 0.2, 0.3]]), torch.tensor([[1.0, 0.0, 0.0, 0.0]]))
        torch.testing.assert_close(cov[0], torch.diag(torch.tensor([0.01, 0.04, 0.09])))

    def test_quarter_turn_about_z_swaps_x_and_y(self):
        half = math.sqrt(0.5)
        cov = covariance_from(
            torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64),
            torch.tensor([[half, 0.0, 0.0, half]], dtype=torch.float64),
        )
        torch.testing.assert_close(cov[0], torch.diag(torch.tensor([0.04, 0.01, 0.09], dtype=torch.float64)))

    def test_eigenvalues_are_squared_realized_scales(self):
        attrs = random_attributes(8)
        segment = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3])
        cov = build_covariance(attrs, segment, S_MAX)
        scale = realized_scale(attrs.log_scale, segment, S_MAX)
        eigen = torch.linalg.eigvalsh(cov)
        torch.testing.assert_close(eigen, torch.sort(scale**2, dim=-1).values, atol=1e-12, rtol=1e-9)
        torch.testing.assert_close(cov, cov.transpose(-1, -2))

    def test_zero_quaternion_is_rejected(self):
        with pytest.raises(ValueError, match="zero quaternion"):
            covariance_from(torch.ones(1, 3), torch.zeros(1, 4))


class TestEvalGaussian:
    def test_peak_is_one(self):
        mu = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
        assert float(eval_gaussian(mu, torch.eye(3, dtype=torch.float64), mu)) == pytest.approx(1.0)

    def test_unit_distance_under_identity(self):
        value = eval_gaussian(torch.zeros(3), torch.eye(3), torch.tensor([1.0, 0.0, 0.0]))
        assert float(value) == pytest.approx(math.exp(-0.5), rel=1e-6)

    def test_stretched_axis(self):
        cov = torch.diag(torch.tensor([4.0, 1.0, 1.0], dtype=torch.float64))
        value = eval_gaussian(torch.zeros(3, dtype=torch.float64), cov, torch.tensor([2.0, 0.0, 0.0]))
        assert float(value) == pytest.approx(math.exp(-0.5), rel=1e-9)

    def test_indefinite_covariance_is_rejected(self):
        with pytest.raises(ValueError, match="singular"):
            eval_gaussian(torch.zeros(3), -torch.eye(3), torch.zeros(3))


class TestSphericalHarmonics:
    def test_degree_zero_colour(self):
        sh = torch.zeros(1, 16, 3, dtype=torch.float64)
        sh[0, 0] = torch.tensor([0.1, -0.2, 0.3])
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        color = eval_sh(sh, dirs, 0)
        torch.testing.assert_close(color[0], SH_C0 * sh[0, 0] + 0.5)

    def test_higher_bands_are_ignored_below_their_degree(self):
        sh = torch.zeros(1, 16, 3)
        sh[0, 5:] = 1.0
        color = eval_sh(sh, torch.tensor([[0.0, 1.0, 0.0]]), 1)
        torch.testing.assert_close(color, torch.full((1, 3), 0.5))

    def test_degree_out_of_range(self):
        with pytest.raises(ValueError):
            eval_sh(torch.zeros(1, 16, 3), torch.tensor([[0.0, 0.0, 1.0]]), 4)


class TestPredictors:
    def test_zero_heads_return_base_attributes(self, small_toy_rig):
        canonical = skin(small_toy_rig, PoseParams.identity(small_toy_rig))
        pose = PoseParams.identity(small_toy_rig)
        pose.theta.fill_(0.3)
        posed = skin(small_toy_rig, pose)
        predictor = AttributePredictor().double()
        base = random_attributes(small_toy_rig.n_vertices)
        out = predict_attributes(predictor, canonical, posed, base)
        assert torch.equal(out.log_scale, base.log_scale)
        assert torch.equal(out.opacity_logit, base.opacity_logit)
        assert torch.equal(out.sh, base.sh)
        torch.testing.assert_close(out.rotation, base.rotation)

    def test_receptive_field_is_local_in_index_order(self, small_toy_rig):
        torch.manual_seed(0)
        predictor = AttributePredictor(hidden_width=8, kernel_size=5).double()
        for head in predictor.heads.values():
            nn.init.normal_(head.weight)
        canonical = skin(small_toy_rig, PoseParams.identity(small_toy_rig))
        pose = PoseParams.identity(small_toy_rig)
        pose.theta.fill_(0.2)
        posed = skin(small_toy_rig, pose)
        touched = 30
        vertices = posed.vertices.clone()
        vertices[touched] += torch.tensor([0.05, -0.02, 0.03], dtype=torch.float64)
        perturbed = PosedMesh.from_vertices(vertices, posed.faces, posed.segment, posed.n_original_vertices)
        with torch.no_grad():
            before = predictor(canonical, posed).log_scale
            after = predictor(canonical, perturbed).log_scale
        changed = torch.nonzero((before - after).abs().amax(dim=-1) > 0).squeeze(-1)
        assert touched in changed.tolist()
        # Two layers of kernel 5 reach four neighbours to each side.
        assert int(changed.min()) >= touched - 4
        assert int(changed.max()) <= touched + 4

    def test_topology_mismatch_is_rejected(self, small_toy_rig, triangle_rig):
        predictor = AttributePredictor().double()
        canonical = skin(small_toy_rig, PoseParams.identity(small_toy_rig))
        other = skin(triangle_rig, PoseParams.identity(triangle_rig))
        with pytest.raises(ValueError, match="topology"):
            predictor(canonical, other)

    def test_displacement_residual_covers_original_vertices(self, small_toy_rig):
        canonical = skin(small_toy_rig, PoseParams.identity(small_toy_rig))
        out = DisplacementPredictor().double()(canonical, canonical)
        assert out.shape == (small_toy_rig.n_original_vertices, 3)
        assert bool((out == 0).all())
