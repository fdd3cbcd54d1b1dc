"""Pose-conditioned point-convolution predictors.

Both predictors read the mesh as a sequence in canonical vertex index order. Each point
contributes 6 channels: its canonical position x_c and the translation
phi = x_c - x_posed that carries the posed point back to the canonical one.
"""

from dataclasses import dataclass
from typing import Dict, List

import torch
from torch import nn

from app.src.models.body_model import PosedMesh

INPUT_CHANNELS: int = 6


@dataclass
class AttributeResiduals:
    """Per-vertex residuals, (V, C) each."""

    log_scale: torch.Tensor
    rotation: torch.Tensor
    opacity_logit: torch.Tensor
    sh_dc: torch.Tensor

    def blend(self, faces: torch.Tensor, face_ids: torch.Tensor, k: torch.Tensor) -> "AttributeResiduals":
        """Carries vertex residuals to splats: sum_i k_i * residual(face vertex i)."""
        corners = faces[face_ids]

        def mix(values: torch.Tensor) -> torch.Tensor:
            return torch.einsum("nk,nkc->nc", k, values[corners])

        return AttributeResiduals(
            log_scale=mix(self.log_scale),
            rotation=mix(self.rotation),
            opacity_logit=mix(self.opacity_logit),
            sh_dc=mix(self.sh_dc),
        )


def point_features(canonical: PosedMesh, posed: PosedMesh) -> torch.Tensor:
    """(1, 6, V) conv input.

    Raises:
        ValueError: If the meshes do not share topology.
    """
    if not canonical.same_topology(posed):
        raise ValueError(
            f"canonical and posed meshes differ in topology "
            f"({canonical.n_vertices} vs {posed.n_vertices} vertices)"
        )
    x_c = canonical.vertices
    phi = x_c - posed.vertices
    return torch.cat([x_c, phi], dim=-1).T.unsqueeze(0)


class PointConvTrunk(nn.Module):
    def __init__(self, hidden_width: int = 32, kernel_size: int = 5, n_layers: int = 2):
        super().__init__()
        layers: List[nn.Module] = []
        in_channels: int = INPUT_CHANNELS
        for _ in range(n_layers):
            layers.append(nn.Conv1d(in_channels, hidden_width, kernel_size, padding=kernel_size // 2))
            layers.append(nn.Tanh())
            in_channels = hidden_width
        self.layers = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.layers(features)


def _zero_head(hidden_width: int, out_channels: int) -> nn.Conv1d:
    head = nn.Conv1d(hidden_width, out_channels, 1)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    return head


class AttributePredictor(nn.Module):
    """Shared trunk with one 1x1 head per attribute class. Heads start at zero so the
    predicted residuals vanish until training moves them."""

    HEADS: Dict[str, int] = {"log_scale": 3, "rotation": 4, "opacity_logit": 1, "sh_dc": 3}

    def __init__(self, hidden_width: int = 32, kernel_size: int = 5):
        super().__init__()
        self.trunk = PointConvTrunk(hidden_width, kernel_size)
        self.heads = nn.ModuleDict({name: _zero_head(hidden_width, c) for name, c in self.HEADS.items()})

    def forward(self, canonical: PosedMesh, posed: PosedMesh) -> AttributeResiduals:
        hidden = self.trunk(point_features(canonical, posed))
        out: Dict[str, torch.Tensor] = {name: head(hidden)[0].T for name, head in self.heads.items()}
        return AttributeResiduals(**out)

    def layer_order(self) -> List[str]:
        return [name for name, _ in self.named_parameters()]


class DisplacementPredictor(nn.Module):
    """Pose-conditioned residual on the free per-vertex displacements of the original
    vertices."""

    def __init__(self, hidden_width: int = 32, kernel_size: int = 5):
        super().__init__()
        self.trunk = PointConvTrunk(hidden_width, kernel_size)
        self.head = _zero_head(hidden_width, 3)

    def forward(self, canonical: PosedMesh, posed: PosedMesh) -> torch.Tensor:
        hidden = self.trunk(point_features(canonical, posed))
        return self.head(hidden)[0].T[: canonical.n_original_vertices]
