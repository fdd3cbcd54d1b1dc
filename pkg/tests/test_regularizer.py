import numpy as np
import pytest
import torch

from app.src.models.splat_model import SplatModel
from app.src.schemas.base import Segment
from app.src.schemas.config import RegularizerConfig
from app.src.training.losses import (
    image_loss,
    l1,
    loss,
    psnr,
    register_perceptual_term,
    ssim,
    unregister_perceptual_term,
)
from app.src.training.regularizer import (
    Regularizer,
    align_hemisphere,
    build_neighborhoods,
    displacement_penalty,
    sh_active_degree,
    variance_loss,
)

S_MAX = [0.06, 0.04, 0.015, 0.015]
CAPS = [0.02, 0.01, 0.003, 0.003]


class TestVarianceLoss:
    def test_two_members(self):
        assert float(variance_loss(torch.tensor([0.0, 2.0], dtype=torch.float64))) == pytest.approx(2.0, abs=1e-9)

    def test_identical_members(self):
        values = torch.ones(5, 3, dtype=torch.float64) * 0.7
        assert float(variance_loss(values)) == pytest.approx(0.0, abs=1e-12)

    def test_single_member(self):
        assert float(variance_loss(torch.tensor([[0.3, -1.0]]))) == 0.0

    def test_order_and_mean_duplicate_invariance(self):
        values = torch.tensor([[0.1, 0.5], [0.4, -0.2], [0.9, 0.3]], dtype=torch.float64)
        shuffled = values[[2, 0, 1]]
        with_mean = torch.cat([values, values.mean(dim=0, keepdim=True)])
        reference = variance_loss(values)
        torch.testing.assert_close(variance_loss(shuffled), reference)
        torch.testing.assert_close(variance_loss(with_mean), reference)

    def test_mask_ignores_padding(self):
        values = torch.tensor([[0.0], [2.0], [100.0]], dtype=torch.float64)
        mask = torch.tensor([True, True, False])
        assert float(variance_loss(values, mask)) == pytest.approx(2.0)

    def test_gradient_matches_finite_differences(self):
        values = torch.tensor([[0.1, 0.5], [0.4, -0.2], [0.9, 0.3]], dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(variance_loss, (values,))

    def test_hemisphere_alignment(self):
        q = torch.tensor([[0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, -1.0]], dtype=torch.float64)
        aligned = align_hemisphere(q, q[:1])
        assert float(variance_loss(aligned)) == pytest.approx(0.0)


class TestNeighborhoods:
    def test_segments_are_kept_apart(self):
        # Two faces sharing an edge; splat 2 carries a head label.
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        positions = np.array([[0.0, 0.0, 0.0], [0.001, 0.0, 0.0], [0.0, 0.001, 0.0], [0.5, 0.5, 0.0]])
        face_ids = np.array([0, 1, 0, 1])
        segment = np.array([Segment.BODY.code, Segment.BODY.code, Segment.HEAD.code, Segment.BODY.code])
        nbr = build_neighborhoods(positions, face_ids, segment, faces, radius=[0.01, 0.01, 0.01, 0.01])
        members = [nbr.members[i][nbr.mask[i]].tolist() for i in range(len(nbr))]
        assert members[0] == [0, 1]
        assert members[2] == [2]
        assert members[3] == [3]

    def test_center_comes_first(self, small_toy_rig):
        splats = SplatModel.create_from_template(small_toy_rig, S_MAX)
        regularizer = Regularizer(RegularizerConfig(radius_body=0.2, radius_detail=0.05), CAPS)
        nbr = regularizer.rebuild(splats, small_toy_rig.rest_vertices, small_toy_rig.faces)
        assert len(nbr) == splats.n_active
        assert torch.equal(nbr.members[:, 0], torch.arange(len(nbr)))
        assert bool((nbr.sizes >= 1).all())


class TestRegularizer:
    def test_uniform_splats_have_no_variance(self, small_toy_rig):
        splats = SplatModel.create_from_template(small_toy_rig, S_MAX)
        with torch.no_grad():
            splats.log_scale.fill_(-1.0)
        regularizer = Regularizer(RegularizerConfig(), CAPS)
        regularizer.rebuild(splats, small_toy_rig.rest_vertices, small_toy_rig.faces)
        terms = regularizer(splats, torch.zeros(small_toy_rig.n_vertices, 3, dtype=torch.float64), small_toy_rig.segment)
        assert float(terms.total) == pytest.approx(0.0, abs=1e-12)

    def test_large_weight_pulls_two_splats_together(self, triangle_rig):
        splats = SplatModel.create_from_template(triangle_rig, S_MAX)
        with torch.no_grad():
            splats.log_scale[0] = -2.0
            splats.log_scale[1] = 1.0
        cfg = RegularizerConfig(lambda_scale=100.0, radius_body=5.0)
        regularizer = Regularizer(cfg, CAPS)
        regularizer.rebuild(splats, triangle_rig.rest_vertices, triangle_rig.faces)
        optimizer = torch.optim.SGD([splats.log_scale], lr=1e-3)
        zero = torch.zeros(3, 3, dtype=torch.float64)
        for _ in range(200):
            optimizer.zero_grad()
            regularizer(splats, zero, triangle_rig.segment).total.backward()
            optimizer.step()
        spread = splats.log_scale.detach().max(dim=0).values - splats.log_scale.detach().min(dim=0).values
        assert float(spread.max()) < 1e-3

    def test_rebuild_is_required(self, small_toy_rig):
        splats = SplatModel.create_from_template(small_toy_rig, S_MAX)
        regularizer = Regularizer(RegularizerConfig(), CAPS)
        with pytest.raises(ValueError, match="rebuild"):
            regularizer(splats, torch.zeros(small_toy_rig.n_vertices, 3), small_toy_rig.segment)

    def test_disabled_regularizer_is_zero(self, small_toy_rig):
        splats = SplatModel.create_from_template(small_toy_rig, S_MAX)
        terms = Regularizer(RegularizerConfig(enabled=False), CAPS)(
            splats, torch.ones(small_toy_rig.n_vertices, 3), small_toy_rig.segment
        )
        assert float(terms.total) == 0.0


class TestDisplacementPenalty:
    def test_inside_and_on_the_cap_is_free(self):
        d = torch.tensor([[0.01, 0.0, 0.0], [0.0, 0.02, 0.0]], dtype=torch.float64)
        segment = torch.tensor([Segment.BODY.code, Segment.BODY.code])
        assert float(displacement_penalty(d, segment, CAPS)) == 0.0

    def test_excess_is_squared(self):
        d = torch.tensor([[0.0, 0.0, 0.013]], dtype=torch.float64)
        segment = torch.tensor([Segment.LEFT_HAND.code])
        assert float(displacement_penalty(d, segment, CAPS)) == pytest.approx(0.01**2)


class TestShSchedule:
    @pytest.mark.parametrize(
        "iteration, degree", [(0, 0), (6999, 0), (7000, 1), (8000, 2), (9000, 3), (10000, 3)]
    )
    def test_degree_steps_at_schedule_fractions(self, iteration, degree):
        assert sh_active_degree(iteration, 10000, [0.7, 0.8, 0.9]) == degree

    def test_iteration_past_the_end(self):
        with pytest.raises(ValueError):
            sh_active_degree(11, 10, [0.7, 0.8, 0.9])

    def test_schedule_must_increase(self):
        with pytest.raises(ValueError):
            RegularizerConfig(sh_schedule=[0.8, 0.7])


class TestImageLoss:
    def test_identical_images(self):
        image = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        report = loss(image, image, with_metrics=True)
        assert report.l1 == 0.0
        assert report.dssim == pytest.approx(0.0, abs=1e-9)
        assert report.psnr == 100.0
        assert report.ssim == pytest.approx(1.0, abs=1e-9)

    def test_constant_offset(self):
        gt = torch.full((12, 12, 3), 0.5, dtype=torch.float64)
        pred = gt + 0.1
        assert float(l1(pred, gt)) == pytest.approx(0.1)
        assert psnr(pred, gt) == pytest.approx(20.0)

    def test_weights_and_extra_terms_add_up(self):
        gen = torch.Generator().manual_seed(1)
        gt = torch.rand(16, 16, 3, generator=gen, dtype=torch.float64)
        pred = torch.rand(16, 16, 3, generator=gen, dtype=torch.float64)
        report = loss(pred, gt, 0.8, 0.2, variance=0.5, displacement=0.25)
        expected = 0.8 * float(l1(pred, gt)) + 0.2 * (1 - float(ssim(pred, gt))) / 2 + 0.75
        assert report.total == pytest.approx(expected)

    def test_perceptual_terms_are_pluggable(self):
        gt = torch.zeros(16, 16, 3, dtype=torch.float64)
        register_perceptual_term("mean", lambda pred, target: (pred - target).mean(), weight=2.0)
        try:
            terms = image_loss(gt + 0.1, gt)
            assert float(terms.perceptual) == pytest.approx(0.2)
            with pytest.raises(ValueError):
                register_perceptual_term("mean", lambda pred, target: pred.sum())
        finally:
            unregister_perceptual_term("mean")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            l1(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))
