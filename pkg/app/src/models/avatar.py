"""The animatable avatar: upsampled rig, per-vertex displacements, anchored splats and
the pose-conditioned predictors, evaluated together for one pose."""

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional

import torch
from torch import nn

from app.src.geometry.mesh import face_frames
from app.src.models.body_model import (
    DisplacementField,
    PoseParams,
    PosedMesh,
    SkinnedTemplate,
    apply_displacements,
    skin,
    upsample_mesh,
)
from app.src.models.predictor import AttributePredictor, DisplacementPredictor
from app.src.models.splat_model import (
    GaussianAttributes,
    SplatModel,
    WorldGaussians,
    anchor_positions,
    apply_residuals,
    covariance_from,
    realized_scale,
)
from app.src.schemas.config import BodyConfig, SplatConfig, TrainerConfig

logger = logging.getLogger(__name__)


@dataclass
class AvatarFrame:
    gaussians: WorldGaussians
    posed: PosedMesh
    canonical: PosedMesh
    attributes: GaussianAttributes
    displacement: torch.Tensor


class AvatarModel(nn.Module):
    def __init__(
        self,
        template: SkinnedTemplate,
        splats: SplatModel,
        splat_cfg: SplatConfig,
        body_cfg: BodyConfig,
    ):
        """Initializes the avatar.

        Args:
            template (SkinnedTemplate): The already upsampled rig.
            splats (SplatModel): Splat storage anchored on the template faces.
            splat_cfg (SplatConfig): Scale limits, l_max and predictor sizes.
            body_cfg (BodyConfig): Displacement caps.
        """
        super().__init__()
        self.template: SkinnedTemplate = template
        self.splats: SplatModel = splats
        self.s_max: List[float] = splat_cfg.s_max()
        self.caps: List[float] = body_cfg.caps()
        self.sh_degree: int = splat_cfg.sh_degree
        dtype: torch.dtype = template.rest_vertices.dtype
        self.displacement = nn.Parameter(torch.zeros(template.n_original_vertices, 3, dtype=dtype))
        self.predictor = AttributePredictor(splat_cfg.hidden_width, splat_cfg.kernel_size).to(dtype)
        self.displacement_predictor: Optional[DisplacementPredictor] = None
        if splat_cfg.predict_displacements:
            self.displacement_predictor = DisplacementPredictor(splat_cfg.hidden_width, splat_cfg.kernel_size).to(dtype)

    @classmethod
    def create(cls, rig: SkinnedTemplate, splat_cfg: SplatConfig, body_cfg: BodyConfig) -> "AvatarModel":
        """Upsamples the rig and places one original splat per vertex."""
        template = upsample_mesh(rig, body_cfg.face_area_thresh, body_cfg.edge_len_thresh)
        splats = SplatModel.create_from_template(
            template, splat_cfg.s_max(), init_opacity=splat_cfg.init_opacity, l_max=splat_cfg.l_max
        )
        logger.info(f"Created avatar with {splats.capacity} splats on {template.n_vertices} vertices")
        return cls(template, splats, splat_cfg, body_cfg)

    @staticmethod
    def canonical_pose(pose: PoseParams) -> PoseParams:
        """Rest pose and neutral expression with the shape of `pose`."""
        return replace(
            pose,
            psi=torch.zeros_like(pose.psi),
            theta=torch.zeros_like(pose.theta),
            global_rot=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=pose.global_rot.dtype),
            global_trans=torch.zeros_like(pose.global_trans),
        )

    def meshes(self, pose: PoseParams) -> tuple[PosedMesh, PosedMesh, torch.Tensor]:
        """(canonical, posed, displacement) with displacements applied and capped."""
        skinned_canonical = skin(self.template, self.canonical_pose(pose))
        skinned_posed = skin(self.template, pose)
        canonical = apply_displacements(skinned_canonical, DisplacementField(self.displacement), self.caps)
        displacement = self.displacement
        if self.displacement_predictor is not None:
            displacement = displacement + self.displacement_predictor(skinned_canonical, skinned_posed)
        posed = apply_displacements(skinned_posed, DisplacementField(displacement), self.caps)
        return canonical, posed, displacement

    def forward(self, pose: PoseParams) -> AvatarFrame:
        return self.world_gaussians(pose)

    def world_gaussians(self, pose: PoseParams) -> AvatarFrame:
        """Active splats in world space for `pose`, ids ascending."""
        canonical, posed, displacement = self.meshes(pose)
        splats = self.splats
        ids = splats.active_ids()
        face_ids = splats.face_id[ids]
        k = splats.convex_k(ids)
        faces = self.template.faces

        mu = anchor_positions(face_ids, k, splats.offsets(ids), posed.vertices, faces, posed.face_normals)
        residuals = self.predictor(canonical, posed).blend(faces, face_ids, k)
        attrs = apply_residuals(splats.base_attributes(ids), residuals)
        segment = splats.segment[ids]
        cov_canonical = covariance_from(realized_scale(attrs.log_scale, segment, self.s_max), attrs.rotation)
        # Carry canonical orientations along with the anchor face.
        frames_posed = face_frames(posed.vertices, faces)[face_ids]
        frames_canonical = face_frames(canonical.vertices, faces)[face_ids]
        delta = frames_posed @ frames_canonical.transpose(-1, -2)
        cov = delta @ cov_canonical @ delta.transpose(-1, -2)

        gaussians = WorldGaussians(
            mu=mu,
            cov=cov,
            opacity=torch.sigmoid(attrs.opacity_logit),
            sh=attrs.sh,
            ids=ids,
            segment=segment,
        )
        return AvatarFrame(gaussians, posed, canonical, attrs, displacement)

    def param_groups(self, cfg: TrainerConfig) -> List[Dict[str, Any]]:
        """Optimizer groups, one per parameter class. Splat groups hold exactly one
        tensor so density control can grow them."""
        splats = self.splats
        groups: List[Dict[str, Any]] = [
            {"name": "k_logits", "params": [splats.k_logits], "lr": cfg.lr_anchor},
            {"name": "l", "params": [splats.l], "lr": cfg.lr_anchor},
            {"name": "log_scale", "params": [splats.log_scale], "lr": cfg.lr_scale},
            {"name": "rotation", "params": [splats.rotation], "lr": cfg.lr_rotation},
            {"name": "opacity", "params": [splats.opacity], "lr": cfg.lr_opacity},
            {"name": "sh_dc", "params": [splats.sh_dc], "lr": cfg.lr_sh},
            {"name": "sh_rest", "params": [splats.sh_rest], "lr": cfg.lr_sh},
            {"name": "displacement", "params": [self.displacement], "lr": cfg.lr_displacement},
            {"name": "predictor", "params": list(self.predictor.parameters()), "lr": cfg.lr_predictor},
        ]
        if self.displacement_predictor is not None:
            groups.append(
                {
                    "name": "displacement_predictor",
                    "params": list(self.displacement_predictor.parameters()),
                    "lr": cfg.lr_predictor,
                }
            )
        return groups

    def named_inputs(self) -> Dict[str, torch.Tensor]:
        """Every learnable tensor by a stable name, for gradient bookkeeping."""
        inputs: Dict[str, torch.Tensor] = dict(self.splats.parameter_tensors())
        inputs["displacement"] = self.displacement
        for name, param in self.predictor.named_parameters():
            inputs[f"predictor.{name}"] = param
        if self.displacement_predictor is not None:
            for name, param in self.displacement_predictor.named_parameters():
                inputs[f"displacement_predictor.{name}"] = param
        return inputs
