"""Rig file I/O.

A rig is a single JSON document validated by `RigRecord` (docs/rig_format.md). Joint limits
can live inside the rig or in a separate joint-limit file mapping joint name to three
per-axis entries, each either ``[min, max]`` radians or ``"locked"``.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from app.src.models.body_model import SkinnedTemplate
from app.src.schemas.base import JointLimitValue, RigRecord, Segment

logger = logging.getLogger(__name__)

FREE_LIMIT: List[float] = [-math.pi, math.pi]


def _limits_tensor(
    joint_names: List[str], limits: Dict[str, List[JointLimitValue]]
) -> Tuple[torch.Tensor, torch.Tensor]:
    unknown: List[str] = sorted(set(limits) - set(joint_names))
    if unknown:
        raise ValueError(f"joint limits reference unknown joints: {unknown}")
    table = torch.empty(len(joint_names), 3, 2, dtype=torch.float64)
    locked = torch.zeros(len(joint_names), 3, dtype=torch.bool)
    for j, name in enumerate(joint_names):
        axes: List[JointLimitValue] = limits.get(name, [FREE_LIMIT] * 3)
        if len(axes) != 3:
            raise ValueError(f"joint '{name}' needs limits for 3 Euler axes, got {len(axes)}")
        for axis, value in enumerate(axes):
            if value == "locked":
                locked[j, axis] = True
                table[j, axis] = 0.0
            else:
                if len(value) != 2:
                    raise ValueError(f"joint '{name}' axis {axis}: limits must be [min, max]")
                table[j, axis, 0] = float(value[0])
                table[j, axis, 1] = float(value[1])
    return table, locked


def template_from_record(record: RigRecord, dtype: Optional[torch.dtype] = None) -> SkinnedTemplate:
    """Builds and validates a SkinnedTemplate from its file record.

    Raises:
        ValueError: If the record violates a rig invariant.
    """
    dtype = dtype or torch.get_default_dtype()
    n_v: int = len(record.rest_vertices)
    n_j: int = len(record.joints)
    weights = torch.zeros(n_v, n_j, dtype=dtype)
    for v, row in enumerate(record.skin_weights):
        for joint, value in row.items():
            if not 0 <= joint < n_j:
                raise ValueError(f"vertex {v} is weighted to unknown joint {joint}")
            weights[v, joint] = value
    if len(record.skin_weights) != n_v:
        raise ValueError("skin_weights needs one entry per vertex")

    def basis(rows: List[List[List[float]]]) -> torch.Tensor:
        if not rows:
            return torch.zeros(n_v, 3, 0, dtype=dtype)
        return torch.tensor(rows, dtype=dtype)

    limits, locked = _limits_tensor(record.joint_names, record.joint_limits)
    template = SkinnedTemplate(
        rest_vertices=torch.tensor(record.rest_vertices, dtype=dtype).reshape(-1, 3),
        faces=torch.tensor(record.faces, dtype=torch.long).reshape(-1, 3),
        joints=torch.tensor(record.joints, dtype=dtype).reshape(-1, 3),
        parents=[-1 if p is None else p for p in record.parents],
        joint_names=list(record.joint_names),
        joint_segments=list(record.joint_segments),
        skin_weights=weights,
        shape_basis=basis(record.shape_basis),
        expression_basis=basis(record.expression_basis),
        segment=torch.tensor([s.code for s in record.segment], dtype=torch.long),
        joint_limits=limits.to(dtype),
        locked=locked,
        n_original_vertices=record.n_original_vertices or n_v,
        name=record.name,
    )
    template.validate()
    return template


def template_to_record(template: SkinnedTemplate) -> RigRecord:
    weights = template.skin_weights.detach().cpu().numpy()
    sparse: List[Dict[int, float]] = [
        {int(j): float(row[j]) for j in np.flatnonzero(row)} for row in weights
    ]
    limits: Dict[str, List[JointLimitValue]] = {}
    for j, name in enumerate(template.joint_names):
        limits[name] = [
            "locked" if bool(template.locked[j, axis]) else template.joint_limits[j, axis].tolist()
            for axis in range(3)
        ]
    return RigRecord(
        name=template.name,
        rest_vertices=template.rest_vertices.tolist(),
        faces=template.faces.tolist(),
        joint_names=template.joint_names,
        joints=template.joints.tolist(),
        parents=[None if p < 0 else p for p in template.parents],
        joint_segments=template.joint_segments,
        skin_weights=sparse,
        shape_basis=template.shape_basis.tolist() if template.n_shape else [],
        expression_basis=template.expression_basis.tolist() if template.n_expression else [],
        segment=[Segment.from_code(int(c)) for c in template.segment],
        joint_limits=limits,
        n_original_vertices=template.n_original_vertices,
    )


def load_joint_limits(path: str | Path) -> Dict[str, List[JointLimitValue]]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: joint limits must map joint name to per-axis limits")
    return data


def load_rig(
    path: str | Path,
    joint_limits_path: Optional[str | Path] = None,
    dtype: Optional[torch.dtype] = None,
) -> SkinnedTemplate:
    """Reads a rig file, optionally replacing its joint limits with a limits file."""
    record = RigRecord.model_validate_json(Path(path).read_text(encoding="utf-8"))
    if joint_limits_path is not None:
        record.joint_limits = load_joint_limits(joint_limits_path)
    template = template_from_record(record, dtype=dtype)
    logger.info(
        f"Loaded rig '{template.name}' from {path}: {template.n_vertices} vertices, "
        f"{len(template.faces)} faces, {template.n_joints} joints"
    )
    return template


def save_rig(template: SkinnedTemplate, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(template_to_record(template).model_dump_json(), encoding="utf-8")
