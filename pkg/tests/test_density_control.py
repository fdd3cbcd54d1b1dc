import pytest
import torch

from app.src.geometry.mesh import vertex_face_rings
from app.src.models.splat_model import SplatModel, realized_scale
from app.src.rendering.rasterizer import ScreenGradAccumulator
from app.src.schemas.config import DensifyPolicy, PrunePolicy
from app.src.training.density_control import (
    CHILD_SCALE_DIVISOR,
    densify,
    expansion_sizes,
    prune,
    select_candidates,
)

S_MAX = [0.06, 0.04, 0.015, 0.015]


def accumulator_with(magnitudes) -> ScreenGradAccumulator:
    acc = ScreenGradAccumulator(len(magnitudes), dtype=torch.float64)
    acc.add(torch.arange(len(magnitudes)), torch.tensor(magnitudes, dtype=torch.float64))
    return acc


@pytest.fixture
def splats(small_toy_rig) -> SplatModel:
    return SplatModel.create_from_template(small_toy_rig, S_MAX)


class TestSelectCandidates:
    def test_threshold_and_descending_order(self):
        acc = accumulator_with([3e-4, 2.5e-4, 1e-4])
        assert select_candidates(acc, DensifyPolicy(grad_threshold=2e-4)) == [0, 1]

    def test_ties_keep_id_order(self):
        acc = accumulator_with([1e-4, 5e-4, 3e-4, 5e-4])
        assert select_candidates(acc, DensifyPolicy(grad_threshold=2e-4)) == [1, 3, 2]

    def test_unobserved_and_inactive_splats_are_ignored(self):
        acc = ScreenGradAccumulator(3, dtype=torch.float64)
        acc.add(torch.tensor([0, 1]), torch.tensor([1.0, 1.0], dtype=torch.float64))
        active = torch.tensor([False, True, True])
        assert select_candidates(acc, DensifyPolicy(), active=active) == [1]

    def test_gradients_are_averaged_over_observations(self):
        acc = ScreenGradAccumulator(1, dtype=torch.float64)
        for magnitude in (3e-4, 0.0, 0.0):
            acc.add(torch.tensor([0]), torch.tensor([magnitude], dtype=torch.float64))
        assert select_candidates(acc, DensifyPolicy(grad_threshold=2e-4)) == []

    def test_expansion_budget_cuts_the_list(self):
        acc = accumulator_with([5e-4, 4e-4, 3e-4])
        policy = DensifyPolicy(grad_threshold=2e-4, max_splats=16)
        kept = select_candidates(acc, policy, expansion=[6, 6, 6], n_active=3)
        assert kept == [0, 1]


class TestDensify:
    def test_children_cover_the_faces_around_the_anchor_vertex(self, small_toy_rig, splats):
        rings = vertex_face_rings(small_toy_rig.faces.numpy(), small_toy_rig.n_vertices)
        before = splats.capacity
        result = densify([0], splats, small_toy_rig.rest_vertices, small_toy_rig.faces, S_MAX, DensifyPolicy())
        assert result.parents == [0]
        assert len(result.new_ids) == len(rings[0])
        new = torch.tensor(result.new_ids)
        assert splats.capacity == before + len(rings[0])
        assert sorted(splats.face_id[new].tolist()) == sorted(rings[0])
        assert not bool(splats.is_original[new].any())
        torch.testing.assert_close(
            splats.convex_k(new), torch.full((len(new), 3), 1 / 3, dtype=torch.float64)
        )
        parent_scale = realized_scale(splats.log_scale[:1], splats.segment[:1], S_MAX)
        child_scale = realized_scale(splats.log_scale[new], splats.segment[new], S_MAX)
        torch.testing.assert_close(child_scale, (parent_scale / CHILD_SCALE_DIVISOR).expand_as(child_scale))

    def test_cap_skips_candidates(self, small_toy_rig, splats):
        policy = DensifyPolicy(max_splats=splats.n_active + 1)
        result = densify([0, 1], splats, small_toy_rig.rest_vertices, small_toy_rig.faces, S_MAX, policy)
        assert result.new_ids == []
        assert result.skipped == [0, 1]
        assert splats.n_active == small_toy_rig.n_vertices

    def test_accumulator_grows_and_parents_restart(self, small_toy_rig, splats):
        acc = accumulator_with([1.0] * splats.capacity)
        result = densify(
            [2], splats, small_toy_rig.rest_vertices, small_toy_rig.faces, S_MAX, DensifyPolicy(), accumulator=acc
        )
        assert acc.capacity == splats.capacity
        assert int(acc.count[2]) == 0
        assert int(acc.count[3]) == 1
        assert bool((acc.count[torch.tensor(result.new_ids)] == 0).all())

    def test_optimizer_state_grows_with_zero_moments(self, small_toy_rig, splats):
        optimizer = torch.optim.Adam(
            [{"params": [p], "name": name, "lr": 1e-3} for name, p in splats.parameter_tensors().items()]
        )
        splats.log_scale.grad = torch.ones_like(splats.log_scale)
        optimizer.step()
        result = densify(
            [0], splats, small_toy_rig.rest_vertices, small_toy_rig.faces, S_MAX, DensifyPolicy(), optimizer
        )
        group = next(g for g in optimizer.param_groups if g["name"] == "log_scale")
        assert group["params"][0] is splats.log_scale
        state = optimizer.state[splats.log_scale]
        assert state["exp_avg"].shape == splats.log_scale.shape
        assert bool((state["exp_avg"][torch.tensor(result.new_ids)] == 0).all())

    def test_expansion_sizes_match_vertex_rings(self, small_toy_rig, splats):
        rings = vertex_face_rings(small_toy_rig.faces.numpy(), small_toy_rig.n_vertices)
        sizes = expansion_sizes(splats, small_toy_rig.rest_vertices, small_toy_rig.faces)
        assert sizes == [len(ring) for ring in rings]


class TestPrune:
    def test_transparent_children_are_deactivated_and_originals_reset(self, small_toy_rig, splats):
        result = densify([0], splats, small_toy_rig.rest_vertices, small_toy_rig.faces, S_MAX, DensifyPolicy())
        child = result.new_ids[0]
        with torch.no_grad():
            splats.opacity[child] = -20.0
            splats.opacity[5] = -20.0
        removed = prune(splats, PrunePolicy(), S_MAX)
        assert removed == [child]
        assert not bool(splats.active[child])
        assert bool(splats.active[5])
        assert float(torch.sigmoid(splats.opacity[5])) == pytest.approx(0.1)

    def test_saturated_children_are_deactivated(self, small_toy_rig, splats):
        result = densify([0], splats, small_toy_rig.rest_vertices, small_toy_rig.faces, S_MAX, DensifyPolicy())
        child = result.new_ids[-1]
        with torch.no_grad():
            splats.log_scale[child, 1] = 50.0
        assert prune(splats, PrunePolicy(), S_MAX) == [child]

    def test_original_splats_always_stay_active(self, splats):
        with torch.no_grad():
            splats.opacity.fill_(-20.0)
            splats.log_scale.fill_(50.0)
        assert prune(splats, PrunePolicy(), S_MAX) == []
        assert splats.n_active == splats.capacity

    def test_saturated_originals_are_released_once(self, splats):
        with torch.no_grad():
            splats.log_scale[5, 1] = 50.0
        assert prune(splats, PrunePolicy(), S_MAX) == []
        assert float(torch.sigmoid(splats.opacity[5])) == pytest.approx(0.1)
        assert float(torch.sigmoid(splats.log_scale[5, 1])) == pytest.approx(0.99)
        with torch.no_grad():
            splats.opacity[5] = 0.0
        prune(splats, PrunePolicy(), S_MAX)
        assert float(splats.opacity[5]) == 0.0

    def test_disabled_policy_does_nothing(self, splats):
        with torch.no_grad():
            splats.opacity.fill_(-20.0)
        before = splats.opacity.detach().clone()
        assert prune(splats, PrunePolicy(enabled=False), S_MAX) == []
        assert torch.equal(splats.opacity.detach(), before)

    def test_unprotecting_originals_is_rejected(self):
        with pytest.raises(ValueError):
            PrunePolicy(protect_original=False)
