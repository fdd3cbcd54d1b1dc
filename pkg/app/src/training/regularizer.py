"""Constraint losses and schedules: neighborhood variance of splat parameters,
displacement caps and the spherical-harmonics degree schedule."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from app.src.geometry.mesh import face_adjacency
from app.src.models.body_model import segment_values
from app.src.models.splat_model import SplatModel
from app.src.schemas.config import RegularizerConfig

logger = logging.getLogger(__name__)

MAX_SH_DEGREE: int = 3


@dataclass
class Neighborhoods:
    """Padded neighborhoods. members[i] lists local splat indices (center first), mask
    marks the real entries."""

    members: torch.Tensor
    mask: torch.Tensor
    splat_ids: torch.Tensor

    def __len__(self) -> int:
        return int(self.members.shape[0])

    @property
    def sizes(self) -> torch.Tensor:
        return self.mask.sum(dim=1)


@dataclass
class RegularizerTerms:
    variance: torch.Tensor
    displacement: torch.Tensor
    per_class: Dict[str, torch.Tensor]

    @property
    def total(self) -> torch.Tensor:
        return self.variance + self.displacement


def neighborhood_radius(cfg: RegularizerConfig) -> List[float]:
    """Radius per segment code; head and hands use the detail radius."""
    return [cfg.radius_body, cfg.radius_detail, cfg.radius_detail, cfg.radius_detail]


def build_neighborhoods(
    positions: np.ndarray,
    face_ids: np.ndarray,
    segment: np.ndarray,
    faces: np.ndarray,
    radius: Sequence[float],
    splat_ids: Optional[np.ndarray] = None,
) -> Neighborhoods:
    """Groups splats whose anchors share a face or an edge-adjacent face, carry the same
    segment label and lie within the segment radius of the center (canonical space)."""
    positions = np.asarray(positions, dtype=np.float64)
    face_ids = np.asarray(face_ids)
    segment = np.asarray(segment)
    n: int = len(positions)
    adjacency: List[List[int]] = face_adjacency(np.asarray(faces))
    tree = cKDTree(positions) if n else None
    rows: List[List[int]] = []
    for center in range(n):
        allowed = {int(face_ids[center]), *adjacency[int(face_ids[center])]}
        r: float = float(radius[int(segment[center])])
        nearby = tree.query_ball_point(positions[center], r) if tree is not None else []
        row: List[int] = [center]
        for other in sorted(nearby):
            if other == center or segment[other] != segment[center]:
                continue
            if int(face_ids[other]) in allowed:
                row.append(other)
        rows.append(row)
    width: int = max((len(row) for row in rows), default=1)
    members = torch.zeros(n, width, dtype=torch.long)
    mask = torch.zeros(n, width, dtype=torch.bool)
    for i, row in enumerate(rows):
        members[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        mask[i, : len(row)] = True
    ids = torch.as_tensor(splat_ids if splat_ids is not None else np.arange(n), dtype=torch.long)
    return Neighborhoods(members=members, mask=mask, splat_ids=ids)


def align_hemisphere(quats: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Flips quaternions onto the hemisphere of their reference (broadcast on the
    leading axes)."""
    dot = (quats * reference).sum(dim=-1, keepdim=True)
    return torch.where(dot < 0, -quats, quats)


def variance_loss(values: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sum over members of squared deviation from the member mean, summed over
    attribute dimensions.

    Args:
        values (torch.Tensor): (M, D) or batched (B, M, D) member parameters.
        mask (Optional[torch.Tensor]): (M,) or (B, M) real-member flags.

    Returns:
        torch.Tensor: Scalar, or (B,) for batched input.
    """
    if values.dim() == 1:
        values = values.unsqueeze(-1)
    if mask is None:
        mask = torch.ones(values.shape[:-1], dtype=torch.bool)
    weight = mask.to(values.dtype).unsqueeze(-1)
    count = weight.sum(dim=-2, keepdim=True).clamp_min(1.0)
    mean = (values * weight).sum(dim=-2, keepdim=True) / count
    return (((values - mean) ** 2) * weight).sum(dim=(-2, -1))


def _neighborhood_variance(values: torch.Tensor, nbr: Neighborhoods) -> torch.Tensor:
    if len(nbr) == 0:
        return values.new_zeros(())
    if values.dim() == 1:
        values = values.unsqueeze(-1)
    return variance_loss(values[nbr.members], nbr.mask).mean()


def displacement_penalty(d: torch.Tensor, segment: torch.Tensor, caps: Sequence[float]) -> torch.Tensor:
    """Sum over vertices of max(0, |d| - cap(segment))^2; the boundary is inclusive."""
    cap = segment_values(caps, segment, d.dtype)
    excess = torch.relu(torch.linalg.vector_norm(d, dim=-1) - cap)
    return (excess * excess).sum()


def sh_active_degree(iteration: int, total_iterations: int, schedule: Sequence[float]) -> int:
    """Degree 0 until the first schedule fraction, +1 at every fraction reached."""
    if iteration > total_iterations:
        raise ValueError(f"iteration {iteration} exceeds total {total_iterations}")
    if total_iterations <= 0:
        return min(len(schedule), MAX_SH_DEGREE)
    progress: float = iteration / total_iterations
    return min(sum(1 for fraction in schedule if progress >= fraction), MAX_SH_DEGREE)


class Regularizer:
    """Weighted variance and displacement terms over a fixed set of neighborhoods."""

    def __init__(self, cfg: RegularizerConfig, caps: Sequence[float]):
        self.cfg: RegularizerConfig = cfg
        self.caps: List[float] = list(caps)
        self.neighborhoods: Optional[Neighborhoods] = None

    def rebuild(self, splats: SplatModel, canonical_positions: torch.Tensor, faces: torch.Tensor) -> Neighborhoods:
        """Recomputes neighborhoods of the active splats from their canonical positions."""
        ids = splats.active_ids()
        self.neighborhoods = build_neighborhoods(
            canonical_positions.detach().cpu().numpy(),
            splats.face_id[ids].cpu().numpy(),
            splats.segment[ids].cpu().numpy(),
            faces.cpu().numpy(),
            neighborhood_radius(self.cfg),
            splat_ids=ids.cpu().numpy(),
        )
        sizes = self.neighborhoods.sizes.double()
        logger.info(
            f"Built {len(self.neighborhoods)} neighborhoods, mean size {float(sizes.mean()):.2f}"
            if len(sizes)
            else "Built 0 neighborhoods"
        )
        return self.neighborhoods

    def variance_terms(self, splats: SplatModel) -> Dict[str, torch.Tensor]:
        if self.neighborhoods is None:
            raise ValueError("neighborhoods not built; call rebuild first")
        nbr = self.neighborhoods
        ids = nbr.splat_ids
        rotation = splats.rotation[ids]
        rotation = rotation / rotation.norm(dim=-1, keepdim=True)
        member_rot = rotation[nbr.members]
        member_rot = align_hemisphere(member_rot, member_rot[:, :1])
        rotation_var = (
            variance_loss(member_rot, nbr.mask).mean() if len(nbr) else rotation.new_zeros(())
        )
        return {
            "scale": _neighborhood_variance(splats.log_scale[ids], nbr),
            "rotation": rotation_var,
            "color": _neighborhood_variance(splats.sh_dc[ids, 0], nbr),
            "opacity": _neighborhood_variance(torch.sigmoid(splats.opacity[ids]), nbr),
        }

    def weighted_variance(self, per_class: Dict[str, torch.Tensor], zero: torch.Tensor) -> torch.Tensor:
        lambdas: Dict[str, float] = {
            "scale": self.cfg.lambda_scale,
            "rotation": self.cfg.lambda_rotation,
            "color": self.cfg.lambda_color,
            "opacity": self.cfg.lambda_opacity,
        }
        variance = zero
        for name, value in per_class.items():
            variance = variance + lambdas[name] * value
        return variance

    def displacement_term(self, displacement: torch.Tensor, vertex_segment: torch.Tensor) -> torch.Tensor:
        if not self.cfg.enabled:
            return displacement.new_zeros(())
        return self.cfg.lambda_disp * displacement_penalty(
            displacement, vertex_segment[: displacement.shape[0]], self.caps
        )

    def __call__(self, splats: SplatModel, displacement: torch.Tensor, vertex_segment: torch.Tensor) -> RegularizerTerms:
        cfg = self.cfg
        zero = displacement.new_zeros(())
        if not cfg.enabled:
            return RegularizerTerms(variance=zero, displacement=zero, per_class={})
        per_class = self.variance_terms(splats)
        variance = self.weighted_variance(per_class, zero)
        penalty = self.displacement_term(displacement, vertex_segment)
        return RegularizerTerms(variance=variance, displacement=penalty, per_class=per_class)
