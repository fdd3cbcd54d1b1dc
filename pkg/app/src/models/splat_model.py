"""Mesh-anchored Gaussian splats: anchors, base attributes, covariance construction and
point evaluation."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from app.src.geometry import mesh as mesh_ops
from app.src.geometry.rotations import quaternion_multiply, quaternion_to_matrix
from app.src.models.body_model import PosedMesh, SkinnedTemplate, segment_values
from app.src.models.predictor import AttributePredictor, AttributeResiduals
from app.src.schemas.base import SplatOrigin

logger = logging.getLogger(__name__)

SH_COEFFS: int = 16
# Logit placed on the owning corner of an original splat's anchor face.
ORIGINAL_CORNER_LOGIT: float = 4.0
COVARIANCE_JITTER: float = 1e-9
QUATERNION_EPS: float = 1e-12

# Per-splat tensors, in the order they are stored and checkpointed.
SPLAT_PARAMS: List[str] = ["k_logits", "l", "log_scale", "rotation", "opacity", "sh_dc", "sh_rest"]


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1 - x))


@dataclass
class SplatAnchor:
    face_id: int
    k: torch.Tensor
    l: float | torch.Tensor = 0.0
    origin: SplatOrigin = SplatOrigin.DENSIFIED


@dataclass
class GaussianAttributes:
    """Batched attributes. log_scale (N, 3) pre-sigmoid scale parameters, rotation (N, 4)
    wxyz, opacity_logit (N,), sh (N, 16, 3) coefficient-major."""

    log_scale: torch.Tensor
    rotation: torch.Tensor
    opacity_logit: torch.Tensor
    sh: torch.Tensor

    def __len__(self) -> int:
        return int(self.log_scale.shape[0])


@dataclass
class WorldGaussians:
    """Active splats in world space, ids ascending."""

    mu: torch.Tensor
    cov: torch.Tensor
    opacity: torch.Tensor
    sh: torch.Tensor
    ids: torch.Tensor
    segment: torch.Tensor

    def __len__(self) -> int:
        return int(self.mu.shape[0])


def convex_coefficients(k_logits: torch.Tensor, is_original: torch.Tensor) -> torch.Tensor:
    """Softmax of the logits for densified splats, the one-hot owning corner for
    original splats."""
    soft = torch.softmax(k_logits, dim=-1)
    hard = nn.functional.one_hot(k_logits.argmax(dim=-1), 3).to(k_logits.dtype)
    return torch.where(is_original.unsqueeze(-1), hard, soft)


def anchor_positions(
    face_ids: torch.Tensor,
    k: torch.Tensor,
    l: torch.Tensor,
    vertices: torch.Tensor,
    faces: torch.Tensor,
    face_normals: torch.Tensor,
) -> torch.Tensor:
    """v = k1 x + k2 y + k3 z + l n_f for every anchor."""
    corners = vertices[faces[face_ids]]
    return torch.einsum("nk,nkc->nc", k, corners) + l.unsqueeze(-1) * face_normals[face_ids]


def anchor_position(anchor: SplatAnchor, mesh: PosedMesh) -> torch.Tensor:
    """Position of one anchor on a posed mesh.

    Raises:
        ValueError: If the face id is outside the mesh.
    """
    n_faces: int = int(mesh.faces.shape[0])
    if not 0 <= anchor.face_id < n_faces:
        raise ValueError(f"face_id {anchor.face_id} out of range for a mesh with {n_faces} faces")
    k = torch.as_tensor(anchor.k, dtype=mesh.vertices.dtype).reshape(1, 3)
    l = torch.as_tensor(anchor.l, dtype=mesh.vertices.dtype).reshape(1)
    face = torch.tensor([anchor.face_id])
    return anchor_positions(face, k, l, mesh.vertices, mesh.faces, mesh.face_normals)[0]


def realized_scale(log_scale: torch.Tensor, segment: torch.Tensor, s_max: Sequence[float]) -> torch.Tensor:
    limit = segment_values(s_max, segment, log_scale.dtype)
    return limit.unsqueeze(-1) * torch.sigmoid(log_scale)


def covariance_from(scale: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T for (N, 3) scales and (N, 4) quaternions."""
    norms = rotation.norm(dim=-1)
    if bool((norms < QUATERNION_EPS).any()):
        raise ValueError("cannot build a covariance from a zero quaternion")
    rot = quaternion_to_matrix(rotation)
    m = rot * scale.unsqueeze(-2)
    cov = m @ m.transpose(-1, -2)
    return 0.5 * (cov + cov.transpose(-1, -2))


def build_covariance(attrs: GaussianAttributes, segment: torch.Tensor, s_max: Sequence[float]) -> torch.Tensor:
    """Covariances of the realized (limit-mapped) scales.

    Raises:
        ValueError: On a zero quaternion.
    """
    return covariance_from(realized_scale(attrs.log_scale, segment, s_max), attrs.rotation)


def eval_gaussian(mu: torch.Tensor, cov: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)).

    Raises:
        ValueError: If Sigma stays singular after adding jitter to the diagonal.
    """
    cov = torch.as_tensor(cov)
    chol, info = torch.linalg.cholesky_ex(cov)
    if int(info) != 0:
        cov = cov + COVARIANCE_JITTER * torch.eye(3, dtype=cov.dtype)
        chol, info = torch.linalg.cholesky_ex(cov)
        if int(info) != 0:
            raise ValueError("covariance is singular")
    diff = (torch.as_tensor(x, dtype=cov.dtype) - torch.as_tensor(mu, dtype=cov.dtype)).reshape(3, 1)
    solved = torch.linalg.solve_triangular(chol, diff, upper=False)
    return torch.exp(-0.5 * (solved * solved).sum())


class SplatModel(nn.Module):
    """Storage for every splat ever created. Deactivated splats stay in storage until
    `compact` and are skipped by `active_ids`."""

    def __init__(
        self,
        face_id: torch.Tensor,
        k_logits: torch.Tensor,
        l: torch.Tensor,
        log_scale: torch.Tensor,
        rotation: torch.Tensor,
        opacity: torch.Tensor,
        sh: torch.Tensor,
        is_original: torch.Tensor,
        segment: torch.Tensor,
        active: Optional[torch.Tensor] = None,
        l_max: float = 0.01,
    ):
        super().__init__()
        self.l_max: float = l_max
        self.k_logits = nn.Parameter(k_logits)
        self.l = nn.Parameter(l)
        self.log_scale = nn.Parameter(log_scale)
        self.rotation = nn.Parameter(rotation)
        self.opacity = nn.Parameter(opacity)
        self.sh_dc = nn.Parameter(sh[:, :1].contiguous())
        self.sh_rest = nn.Parameter(sh[:, 1:].contiguous())
        self.register_buffer("face_id", face_id.long())
        self.register_buffer("is_original", is_original.bool())
        self.register_buffer("segment", segment.long())
        self.register_buffer("active", torch.ones_like(face_id, dtype=torch.bool) if active is None else active.bool())

    @classmethod
    def create_from_template(
        cls,
        template: SkinnedTemplate,
        s_max: Sequence[float],
        init_opacity: float = 0.1,
        l_max: float = 0.01,
    ) -> "SplatModel":
        """One original splat per template vertex, anchored on the lowest-index incident
        face with its convex coefficients on the vertex's corner."""
        faces = template.faces.cpu().numpy()
        rings: List[List[int]] = mesh_ops.vertex_face_rings(faces, template.n_vertices)
        orphans: List[int] = [v for v, ring in enumerate(rings) if not ring]
        if orphans:
            raise ValueError(f"{len(orphans)} vertices belong to no face, e.g. vertex {orphans[0]}")
        dtype: torch.dtype = template.rest_vertices.dtype
        n: int = template.n_vertices
        face_id = torch.tensor([ring[0] for ring in rings], dtype=torch.long)
        corner = torch.tensor([faces[ring[0]].tolist().index(v) for v, ring in enumerate(rings)])
        k_logits = torch.zeros(n, 3, dtype=dtype)
        k_logits[torch.arange(n), corner] = ORIGINAL_CORNER_LOGIT

        # Initial scale: half the mean incident edge length, kept inside the limit.
        edges, _ = mesh_ops.unique_edges(faces)
        rest = template.rest_vertices.detach().cpu().numpy().astype(np.float64)
        lengths = np.linalg.norm(rest[edges[:, 0]] - rest[edges[:, 1]], axis=1)
        total = np.zeros(n)
        count = np.zeros(n)
        for col in range(2):
            np.add.at(total, edges[:, col], lengths)
            np.add.at(count, edges[:, col], 1.0)
        limit = segment_values(s_max, template.segment, torch.float64).numpy()
        ratio = np.clip(0.5 * total / np.maximum(count, 1.0) / limit, 0.05, 0.9)
        log_scale = inverse_sigmoid(torch.as_tensor(ratio, dtype=dtype)).unsqueeze(-1).repeat(1, 3)

        rotation = torch.zeros(n, 4, dtype=dtype)
        rotation[:, 0] = 1.0
        opacity = inverse_sigmoid(torch.full((n,), init_opacity, dtype=dtype))
        return cls(
            face_id=face_id,
            k_logits=k_logits,
            l=torch.zeros(n, dtype=dtype),
            log_scale=log_scale,
            rotation=rotation,
            opacity=opacity,
            sh=torch.zeros(n, SH_COEFFS, 3, dtype=dtype),
            is_original=torch.ones(n, dtype=torch.bool),
            segment=template.segment.clone(),
            l_max=l_max,
        )

    @property
    def capacity(self) -> int:
        return int(self.face_id.shape[0])

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def sh(self) -> torch.Tensor:
        return torch.cat([self.sh_dc, self.sh_rest], dim=1)

    @property
    def origin(self) -> List[SplatOrigin]:
        return [SplatOrigin.ORIGINAL_VERTEX if o else SplatOrigin.DENSIFIED for o in self.is_original.tolist()]

    def active_ids(self) -> torch.Tensor:
        return torch.nonzero(self.active, as_tuple=False).squeeze(-1)

    def parameter_tensors(self) -> Dict[str, nn.Parameter]:
        return {name: getattr(self, name) for name in SPLAT_PARAMS}

    def convex_k(self, ids: Optional[torch.Tensor] = None) -> torch.Tensor:
        if ids is None:
            return convex_coefficients(self.k_logits, self.is_original)
        return convex_coefficients(self.k_logits[ids], self.is_original[ids])

    def offsets(self, ids: torch.Tensor) -> torch.Tensor:
        """Normal offsets; original splats stay on their vertex."""
        return torch.where(self.is_original[ids], torch.zeros_like(self.l[ids]), self.l[ids])

    def base_attributes(self, ids: torch.Tensor) -> GaussianAttributes:
        return GaussianAttributes(
            log_scale=self.log_scale[ids],
            rotation=self.rotation[ids],
            opacity_logit=self.opacity[ids],
            sh=self.sh[ids],
        )

    def anchor(self, splat_id: int) -> SplatAnchor:
        return SplatAnchor(
            face_id=int(self.face_id[splat_id]),
            k=self.convex_k(torch.tensor([splat_id]))[0].detach(),
            l=float(self.offsets(torch.tensor([splat_id]))[0]),
            origin=self.origin[splat_id],
        )

    @torch.no_grad()
    def project_constraints(self) -> None:
        """Restores |l| <= l_max and unit quaternions after an optimizer step."""
        self.l.data.clamp_(-self.l_max, self.l_max)
        norms = self.rotation.data.norm(dim=-1, keepdim=True).clamp_min(QUATERNION_EPS)
        self.rotation.data.div_(norms)

    def replace_parameters(self, tensors: Dict[str, torch.Tensor]) -> None:
        for name, tensor in tensors.items():
            setattr(self, name, tensor if isinstance(tensor, nn.Parameter) else nn.Parameter(tensor))

    def extend_buffers(self, face_id: torch.Tensor, is_original: torch.Tensor, segment: torch.Tensor) -> None:
        self.face_id = torch.cat([self.face_id, face_id.long()])
        self.is_original = torch.cat([self.is_original, is_original.bool()])
        self.segment = torch.cat([self.segment, segment.long()])
        self.active = torch.cat([self.active, torch.ones_like(face_id, dtype=torch.bool)])

    @torch.no_grad()
    def compacted(self) -> "SplatModel":
        """Copy holding only the active splats, in id order."""
        keep = self.active_ids()
        return SplatModel(
            face_id=self.face_id[keep].clone(),
            k_logits=self.k_logits[keep].clone(),
            l=self.l[keep].clone(),
            log_scale=self.log_scale[keep].clone(),
            rotation=self.rotation[keep].clone(),
            opacity=self.opacity[keep].clone(),
            sh=self.sh[keep].clone(),
            is_original=self.is_original[keep].clone(),
            segment=self.segment[keep].clone(),
            l_max=self.l_max,
        )


def apply_residuals(base: GaussianAttributes, residuals: AttributeResiduals) -> GaussianAttributes:
    """Adds residuals to base attributes. The rotation residual r becomes the unit
    quaternion normalize((1, 0, 0, 0) + r), composed on the left of the base rotation."""
    identity = torch.zeros_like(residuals.rotation)
    identity[:, 0] = 1.0
    q_res = nn.functional.normalize(identity + residuals.rotation, dim=-1)
    rotation = nn.functional.normalize(quaternion_multiply(q_res, base.rotation), dim=-1)
    sh = torch.cat([base.sh[:, :1] + residuals.sh_dc.unsqueeze(1), base.sh[:, 1:]], dim=1)
    return GaussianAttributes(
        log_scale=base.log_scale + residuals.log_scale,
        rotation=rotation,
        opacity_logit=base.opacity_logit + residuals.opacity_logit.squeeze(-1),
        sh=sh,
    )


def predict_attributes(
    predictor: AttributePredictor,
    canonical: PosedMesh,
    posed: PosedMesh,
    base: GaussianAttributes,
    face_ids: Optional[torch.Tensor] = None,
    k: Optional[torch.Tensor] = None,
) -> GaussianAttributes:
    """Pose-conditioned attributes.

    Without anchors, `base` holds one row per mesh vertex. With `face_ids` and `k`, the
    vertex residuals are blended onto the anchored splats first.

    Raises:
        ValueError: On a topology mismatch or when base rows do not match.
    """
    residuals: AttributeResiduals = predictor(canonical, posed)
    if face_ids is not None and k is not None:
        residuals = residuals.blend(posed.faces, face_ids, k)
    if len(base) != residuals.log_scale.shape[0]:
        raise ValueError(f"{len(base)} base attributes for {residuals.log_scale.shape[0]} predicted rows")
    return apply_residuals(base, residuals)
