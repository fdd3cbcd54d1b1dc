"""Adaptive density control for mesh-anchored splats.

Densification spawns children on the faces around a high-gradient splat's nearest anchor
vertex. Pruning deactivates transparent or saturated densified splats; splats on original
mesh vertices are never removed, only have their opacity reset.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from app.src.geometry.mesh import vertex_face_rings
from app.src.models.splat_model import SplatModel, inverse_sigmoid, realized_scale
from app.src.rendering.rasterizer import ScreenGradAccumulator
from app.src.schemas.config import DensifyPolicy, PrunePolicy

logger = logging.getLogger(__name__)

CHILD_SCALE_DIVISOR: float = 1.6
SATURATION_TOLERANCE: float = 1e-6
# Saturated original splats are pulled back to this fraction of their scale limit.
RELEASED_SCALE_FRACTION: float = 0.99


@dataclass
class DensifyResult:
    new_ids: List[int] = field(default_factory=list)
    parents: List[int] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)


def cat_tensors_to_optimizer(
    optimizer: Optional[torch.optim.Optimizer], tensors: Dict[str, torch.Tensor], current: Dict[str, nn.Parameter]
) -> Dict[str, nn.Parameter]:
    """Appends rows to named single-tensor parameter groups, growing Adam moments with
    zeros. Returns the new parameters by group name."""
    grown: Dict[str, nn.Parameter] = {}
    groups = {g["name"]: g for g in optimizer.param_groups} if optimizer is not None else {}
    for name, extension in tensors.items():
        old = current[name]
        param = nn.Parameter(torch.cat([old.detach(), extension.to(old.dtype)], dim=0).requires_grad_(True))
        group = groups.get(name)
        if group is not None:
            stored = optimizer.state.pop(group["params"][0], None)  # type: ignore[union-attr]
            if stored:
                stored["exp_avg"] = torch.cat([stored["exp_avg"], torch.zeros_like(extension)], dim=0)
                stored["exp_avg_sq"] = torch.cat([stored["exp_avg_sq"], torch.zeros_like(extension)], dim=0)
                optimizer.state[param] = stored  # type: ignore[union-attr]
            group["params"][0] = param
        grown[name] = param
    return grown


def reset_rows_in_optimizer(optimizer: Optional[torch.optim.Optimizer], param: torch.Tensor, rows: torch.Tensor) -> None:
    if optimizer is None:
        return
    stored = optimizer.state.get(param)
    if stored:
        stored["exp_avg"][rows] = 0
        stored["exp_avg_sq"][rows] = 0


def select_candidates(
    accumulator: ScreenGradAccumulator,
    policy: DensifyPolicy,
    active: Optional[torch.Tensor] = None,
    expansion: Optional[Sequence[int]] = None,
    n_active: int = 0,
) -> List[int]:
    """Splats whose mean screen-space gradient exceeds the threshold, by magnitude
    descending then id ascending.

    Args:
        accumulator (ScreenGradAccumulator): Gradient sums and counts since last reset.
        policy (DensifyPolicy): Threshold and splat cap.
        active (Optional[torch.Tensor]): Mask of splats that may be selected.
        expansion (Optional[Sequence[int]]): Children each splat would spawn; when given,
            the list is cut where n_active plus the children would exceed max_splats.
        n_active (int): Splats currently active.

    Returns:
        List[int]: Candidate splat ids.
    """
    mean = accumulator.mean().detach().double()
    eligible = (accumulator.count > 0) & (mean > policy.grad_threshold)
    if active is not None:
        eligible &= active
    ids = torch.nonzero(eligible, as_tuple=False).squeeze(-1)
    # ids ascend, so a stable sort on -magnitude keeps id order among ties.
    order = torch.argsort(-mean[ids], stable=True)
    ranked: List[int] = ids[order].tolist()
    if expansion is None:
        return ranked
    kept: List[int] = []
    budget: int = policy.max_splats - n_active
    for splat_id in ranked:
        cost: int = int(expansion[splat_id])
        if cost > budget:
            break
        budget -= cost
        kept.append(splat_id)
    return kept


def nearest_anchor_vertex(splats: SplatModel, splat_id: int, vertices: torch.Tensor, faces: torch.Tensor) -> int:
    """Vertex of the anchor face closest to the splat's anchor point on `vertices`."""
    face = faces[splats.face_id[splat_id]]
    corners = vertices[face]
    k = splats.convex_k(torch.tensor([splat_id]))[0].detach()
    point = k @ corners
    return int(face[torch.argmin((corners - point).norm(dim=-1))])


def expansion_sizes(splats: SplatModel, vertices: torch.Tensor, faces: torch.Tensor) -> List[int]:
    rings = vertex_face_rings(faces.cpu().numpy(), int(vertices.shape[0]))
    return [
        len(rings[nearest_anchor_vertex(splats, i, vertices, faces)]) for i in range(splats.capacity)
    ]


@torch.no_grad()
def densify(
    candidates: Sequence[int],
    splats: SplatModel,
    vertices: torch.Tensor,
    faces: torch.Tensor,
    s_max: Sequence[float],
    policy: DensifyPolicy,
    optimizer: Optional[torch.optim.Optimizer] = None,
    accumulator: Optional[ScreenGradAccumulator] = None,
) -> DensifyResult:
    """Adds one child per face around each candidate's nearest anchor vertex.

    Children start at the face centroid (k logits 0, l = 0) with the parent's attributes
    and a realized scale of parent / 1.6. Candidates that would push the active count
    above max_splats are skipped in order with a warning.
    """
    result = DensifyResult()
    if not candidates:
        return result
    rings = vertex_face_rings(faces.cpu().numpy(), int(vertices.shape[0]))
    n_active: int = splats.n_active
    new_faces: List[int] = []
    parents: List[int] = []
    for candidate in candidates:
        ring: List[int] = rings[nearest_anchor_vertex(splats, candidate, vertices, faces)]
        if n_active + len(ring) > policy.max_splats:
            result.skipped.append(candidate)
            continue
        n_active += len(ring)
        new_faces.extend(ring)
        parents.extend([candidate] * len(ring))
        result.parents.append(candidate)
    if result.skipped:
        logger.warning(
            f"Splat cap {policy.max_splats} reached; skipped {len(result.skipped)} densification candidates"
        )
    if not new_faces:
        return result

    parent_ids = torch.tensor(parents, dtype=torch.long)
    n_new: int = len(new_faces)
    dtype: torch.dtype = splats.log_scale.dtype
    segment = splats.segment[parent_ids]
    limit = realized_scale(torch.zeros(n_new, 3, dtype=dtype), segment, s_max) * 2.0
    child_scale = realized_scale(splats.log_scale[parent_ids], segment, s_max) / CHILD_SCALE_DIVISOR
    extension: Dict[str, torch.Tensor] = {
        "k_logits": torch.zeros(n_new, 3, dtype=dtype),
        "l": torch.zeros(n_new, dtype=dtype),
        "log_scale": inverse_sigmoid(child_scale / limit),
        "rotation": splats.rotation[parent_ids].clone(),
        "opacity": splats.opacity[parent_ids].clone(),
        "sh_dc": splats.sh_dc[parent_ids].clone(),
        "sh_rest": splats.sh_rest[parent_ids].clone(),
    }
    first_new: int = splats.capacity
    grown = cat_tensors_to_optimizer(optimizer, extension, splats.parameter_tensors())
    splats.replace_parameters(grown)
    splats.extend_buffers(
        face_id=torch.tensor(new_faces, dtype=torch.long),
        is_original=torch.zeros(n_new, dtype=torch.bool),
        segment=segment,
    )
    if accumulator is not None:
        accumulator.extend(n_new)
        accumulator.reset(torch.tensor(result.parents, dtype=torch.long))
    result.new_ids = list(range(first_new, first_new + n_new))
    logger.info(f"Densified {len(result.parents)} candidates into {n_new} new splats")
    return result


@torch.no_grad()
def prune(
    splats: SplatModel,
    policy: PrunePolicy,
    s_max: Sequence[float],
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> List[int]:
    """Deactivates transparent or scale-saturated densified splats and resets the
    opacity of original splats meeting the same criteria. Saturated original splats
    also have their scale pulled back below the limit so they are not flagged again.

    Returns:
        List[int]: Ids deactivated by this call.
    """
    if not policy.enabled:
        return []
    ids = splats.active_ids()
    opacity = torch.sigmoid(splats.opacity[ids])
    limit = realized_scale(torch.full_like(splats.log_scale[ids], float("inf")), splats.segment[ids], s_max)
    scale = realized_scale(splats.log_scale[ids], splats.segment[ids], s_max)
    saturated = ((limit - scale) <= SATURATION_TOLERANCE).any(dim=-1)
    flagged = (opacity < policy.opacity_eps) | saturated
    original = splats.is_original[ids]

    deactivate = ids[flagged & ~original]
    splats.active[deactivate] = False

    reset = ids[flagged & original]
    if reset.numel():
        splats.opacity.data[reset] = float(np.log(policy.reset_opacity / (1.0 - policy.reset_opacity)))
        reset_rows_in_optimizer(optimizer, splats.opacity, reset)
        logger.info(f"Reset opacity of {reset.numel()} original-vertex splats")
    released = ids[saturated & original]
    if released.numel():
        ceiling = float(np.log(RELEASED_SCALE_FRACTION / (1.0 - RELEASED_SCALE_FRACTION)))
        splats.log_scale.data[released] = splats.log_scale.data[released].clamp(max=ceiling)
        reset_rows_in_optimizer(optimizer, splats.log_scale, released)
    if deactivate.numel():
        logger.info(f"Deactivated {deactivate.numel()} splats; {splats.n_active} remain active")
    return deactivate.tolist()