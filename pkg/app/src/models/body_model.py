"""Skinned parametric body: templates, poses, linear blend skinning, joint limits,
mesh upsampling and per-vertex normal displacements."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from app.src.geometry import mesh as mesh_ops
from app.src.geometry.rotations import euler_to_matrix, quaternion_to_matrix, rigid_transform
from app.src.schemas.base import PoseRecord, Segment

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE: float = 1e-6
QUATERNION_TOLERANCE: float = 1e-6


@dataclass(frozen=True)
class SkinnedTemplate:
    """Rest-pose rig.

    Attributes:
        rest_vertices: (V, 3) meters.
        faces: (F, 3) long.
        joints: (J, 3) rest joint positions.
        parents: parent index per joint, -1 for the root.
        skin_weights: (V, J) dense, rows sum to one.
        shape_basis: (V, 3, B) offsets per beta coefficient.
        expression_basis: (V, 3, E) offsets per psi coefficient.
        segment: (V,) long segment codes.
        joint_limits: (J, 3, 2) per Euler axis (min, max).
        locked: (J, 3) bool, locked axes have limits (0, 0).
        n_original_vertices: vertices of the rig before upsampling; they come first.
    """

    rest_vertices: torch.Tensor
    faces: torch.Tensor
    joints: torch.Tensor
    parents: List[int]
    joint_names: List[str]
    joint_segments: List[Segment]
    skin_weights: torch.Tensor
    shape_basis: torch.Tensor
    expression_basis: torch.Tensor
    segment: torch.Tensor
    joint_limits: torch.Tensor
    locked: torch.Tensor
    n_original_vertices: int
    name: str = "rig"

    @property
    def n_vertices(self) -> int:
        return int(self.rest_vertices.shape[0])

    @property
    def n_joints(self) -> int:
        return int(self.joints.shape[0])

    @property
    def n_shape(self) -> int:
        return int(self.shape_basis.shape[-1])

    @property
    def n_expression(self) -> int:
        return int(self.expression_basis.shape[-1])

    @property
    def topological_order(self) -> List[int]:
        order: List[int] = []
        children: Dict[int, List[int]] = {}
        for joint, parent in enumerate(self.parents):
            children.setdefault(parent, []).append(joint)
        frontier: List[int] = list(children.get(-1, []))
        while frontier:
            joint = frontier.pop(0)
            order.append(joint)
            frontier.extend(children.get(joint, []))
        return order

    def validate(self) -> None:
        """Checks the rig invariants.

        Raises:
            ValueError: On out-of-range faces, bad skin weights, a non-tree skeleton,
                inconsistent array shapes or non-zero limits on locked axes.
        """
        n_v: int = self.n_vertices
        n_j: int = self.n_joints
        if self.faces.numel() and (int(self.faces.min()) < 0 or int(self.faces.max()) >= n_v):
            raise ValueError("face indices out of range")
        if self.skin_weights.shape != (n_v, n_j):
            raise ValueError(f"skin_weights must be ({n_v}, {n_j}), got {tuple(self.skin_weights.shape)}")
        if bool((self.skin_weights < 0).any()):
            raise ValueError("skin weights must be non-negative")
        sums = self.skin_weights.sum(dim=1)
        if bool(((sums - 1.0).abs() > WEIGHT_TOLERANCE).any()):
            raise ValueError("skin weights must sum to 1 per vertex")
        for name, basis in (("shape_basis", self.shape_basis), ("expression_basis", self.expression_basis)):
            if basis.shape[:2] != (n_v, 3):
                raise ValueError(f"{name} must be (V, 3, K)")
        if self.segment.shape != (n_v,):
            raise ValueError("segment needs one label per vertex")
        if len(self.parents) != n_j or len(self.joint_names) != n_j or len(self.joint_segments) != n_j:
            raise ValueError("parents, joint_names and joint_segments need one entry per joint")
        roots: List[int] = [j for j, p in enumerate(self.parents) if p == -1]
        if len(roots) != 1:
            raise ValueError(f"skeleton must have exactly one root, found {len(roots)}")
        if any(p < -1 or p >= n_j or p == j for j, p in enumerate(self.parents)):
            raise ValueError("parent indices out of range")
        if len(self.topological_order) != n_j:
            raise ValueError("parent graph is not a tree")
        if self.joint_limits.shape != (n_j, 3, 2) or self.locked.shape != (n_j, 3):
            raise ValueError("joint_limits must be (J, 3, 2) and locked (J, 3)")
        if bool((self.joint_limits[..., 0] > self.joint_limits[..., 1]).any()):
            raise ValueError("joint limit min exceeds max")
        if bool((self.joint_limits[self.locked] != 0).any()):
            raise ValueError("locked axes must have limits (0, 0)")
        if not 0 < self.n_original_vertices <= n_v:
            raise ValueError("n_original_vertices out of range")

    def joints_in_segment(self, segment: Segment) -> List[int]:
        return [j for j, s in enumerate(self.joint_segments) if s == segment]

    def to(self, dtype: torch.dtype) -> "SkinnedTemplate":
        return replace(
            self,
            rest_vertices=self.rest_vertices.to(dtype),
            joints=self.joints.to(dtype),
            skin_weights=self.skin_weights.to(dtype),
            shape_basis=self.shape_basis.to(dtype),
            expression_basis=self.expression_basis.to(dtype),
            joint_limits=self.joint_limits.to(dtype),
        )


@dataclass
class PoseParams:
    """beta/psi: (B,), (E,); theta: (J, 3) Euler XYZ radians; global_rot: wxyz (4,);
    global_trans: (3,) meters."""

    beta: torch.Tensor
    psi: torch.Tensor
    theta: torch.Tensor
    global_rot: torch.Tensor
    global_trans: torch.Tensor

    @classmethod
    def identity(cls, template: SkinnedTemplate) -> "PoseParams":
        dtype: torch.dtype = template.rest_vertices.dtype
        return cls(
            beta=torch.zeros(template.n_shape, dtype=dtype),
            psi=torch.zeros(template.n_expression, dtype=dtype),
            theta=torch.zeros(template.n_joints, 3, dtype=dtype),
            global_rot=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype),
            global_trans=torch.zeros(3, dtype=dtype),
        )

    @classmethod
    def from_record(cls, record: PoseRecord, dtype: Optional[torch.dtype] = None) -> "PoseParams":
        dtype = dtype or torch.get_default_dtype()
        pose = cls(
            beta=torch.tensor(record.beta, dtype=dtype),
            psi=torch.tensor(record.psi, dtype=dtype),
            theta=torch.tensor(record.theta, dtype=dtype).reshape(-1, 3),
            global_rot=torch.tensor(record.global_rot, dtype=dtype),
            global_trans=torch.tensor(record.global_trans, dtype=dtype),
        )
        norm: float = float(pose.global_rot.norm())
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise ValueError(f"global_rot must be unit norm, got |q| = {norm:.8f}")
        return pose

    def to_record(self, frame_id: Optional[int] = None) -> PoseRecord:
        return PoseRecord(
            frame_id=frame_id,
            beta=self.beta.detach().tolist(),
            psi=self.psi.detach().tolist(),
            theta=self.theta.detach().tolist(),
            global_rot=self.global_rot.detach().tolist(),
            global_trans=self.global_trans.detach().tolist(),
        )

    def clone(self) -> "PoseParams":
        return PoseParams(
            beta=self.beta.detach().clone(),
            psi=self.psi.detach().clone(),
            theta=self.theta.detach().clone(),
            global_rot=self.global_rot.detach().clone(),
            global_trans=self.global_trans.detach().clone(),
        )


@dataclass
class PosedMesh:
    vertices: torch.Tensor
    vertex_normals: torch.Tensor
    face_normals: torch.Tensor
    faces: torch.Tensor
    segment: torch.Tensor
    n_original_vertices: int
    joints: Optional[torch.Tensor] = None
    clamped_displacements: int = 0

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @classmethod
    def from_vertices(
        cls,
        vertices: torch.Tensor,
        faces: torch.Tensor,
        segment: torch.Tensor,
        n_original_vertices: int,
        joints: Optional[torch.Tensor] = None,
        clamped_displacements: int = 0,
    ) -> "PosedMesh":
        return cls(
            vertices=vertices,
            vertex_normals=mesh_ops.vertex_normals(vertices, faces),
            face_normals=mesh_ops.face_normals(vertices, faces),
            faces=faces,
            segment=segment,
            n_original_vertices=n_original_vertices,
            joints=joints,
            clamped_displacements=clamped_displacements,
        )

    def same_topology(self, other: "PosedMesh") -> bool:
        return self.n_vertices == other.n_vertices and torch.equal(self.faces, other.faces)


@dataclass
class DisplacementField:
    """(N0, 3) learnable offsets on the original rig vertices."""

    d: torch.Tensor

    @classmethod
    def zeros(cls, n_original_vertices: int, dtype: Optional[torch.dtype] = None) -> "DisplacementField":
        return cls(d=torch.zeros(n_original_vertices, 3, dtype=dtype or torch.get_default_dtype()))


def _check_pose(template: SkinnedTemplate, pose: PoseParams) -> None:
    expected: Dict[str, tuple] = {
        "beta": (template.n_shape,),
        "psi": (template.n_expression,),
        "theta": (template.n_joints, 3),
        "global_rot": (4,),
        "global_trans": (3,),
    }
    for name, shape in expected.items():
        value: torch.Tensor = getattr(pose, name)
        if tuple(value.shape) != shape:
            raise ValueError(f"pose.{name} has shape {tuple(value.shape)}, rig expects {shape}")
        if not bool(torch.isfinite(value).all()):
            raise ValueError(f"pose.{name} contains non-finite values")


def joint_transforms(template: SkinnedTemplate, theta: torch.Tensor) -> torch.Tensor:
    """(J, 4, 4) world transforms of each joint frame for Euler angles theta."""
    rotations = euler_to_matrix(theta)
    joints = template.joints
    world: List[Optional[torch.Tensor]] = [None] * template.n_joints
    for joint in template.topological_order:
        parent: int = template.parents[joint]
        offset = joints[joint] if parent < 0 else joints[joint] - joints[parent]
        local = rigid_transform(rotations[joint], offset)
        world[joint] = local if parent < 0 else world[parent] @ local  # type: ignore[operator]
    return torch.stack(world)  # type: ignore[arg-type]


def skin(template: SkinnedTemplate, pose: PoseParams) -> PosedMesh:
    """Linear blend skinning of the shaped and expressed template, followed by the
    global rotation/translation.

    Args:
        template (SkinnedTemplate): The rig.
        pose (PoseParams): Pose with dimensions matching the rig bases.

    Returns:
        PosedMesh: Posed vertices, recomputed normals and posed joint positions.

    Raises:
        ValueError: On dimension mismatch or non-finite pose values.
    """
    _check_pose(template, pose)
    vertices = template.rest_vertices
    if template.n_shape:
        vertices = vertices + torch.einsum("vck,k->vc", template.shape_basis, pose.beta)
    if template.n_expression:
        vertices = vertices + torch.einsum("vck,k->vc", template.expression_basis, pose.psi)

    world = joint_transforms(template, pose.theta)
    rotations = world[:, :3, :3]
    # Remove the rest-pose joint placement so transforms act on rest-space vertices.
    translations = world[:, :3, 3] - torch.einsum("jab,jb->ja", rotations, template.joints)
    blended_rot = torch.einsum("vj,jab->vab", template.skin_weights, rotations)
    blended_trans = template.skin_weights @ translations
    posed = torch.einsum("vab,vb->va", blended_rot, vertices) + blended_trans

    global_rot = quaternion_to_matrix(pose.global_rot)
    posed = posed @ global_rot.T + pose.global_trans
    joints = world[:, :3, 3] @ global_rot.T + pose.global_trans
    return PosedMesh.from_vertices(
        posed, template.faces, template.segment, template.n_original_vertices, joints=joints
    )


def clamp_pose(template: SkinnedTemplate, pose: PoseParams) -> PoseParams:
    """Clips every Euler angle into its joint limits; locked axes become exactly 0."""
    lower = template.joint_limits[..., 0].to(pose.theta.dtype)
    upper = template.joint_limits[..., 1].to(pose.theta.dtype)
    theta = torch.minimum(torch.maximum(pose.theta, lower), upper)
    theta = torch.where(template.locked, torch.zeros_like(theta), theta)
    return replace(pose, theta=theta)


def hand_pose_vector(template: SkinnedTemplate, pose: PoseParams, side: Segment) -> torch.Tensor:
    """Flattened Euler angles of the joints of one hand (3 values per joint)."""
    if not side.is_hand:
        raise ValueError(f"{side} is not a hand segment")
    joints: List[int] = template.joints_in_segment(side)
    return pose.theta[joints].reshape(-1)


def _blend_rows(values: torch.Tensor, parents: np.ndarray, weights: np.ndarray) -> torch.Tensor:
    """Blends (V, ...) rows: out[i] = sum_k weights[i, k] * values[parents[i, k]]."""
    index = torch.as_tensor(parents, dtype=torch.long)
    w = torch.as_tensor(weights, dtype=values.dtype)
    gathered = values[index]  # (N, K, ...)
    shape = w.shape + (1,) * (gathered.dim() - 2)
    return (gathered * w.reshape(shape)).sum(dim=1)


def _split_face(face: Sequence[int], mids: Sequence[Optional[int]], centroid: Optional[int]) -> List[List[int]]:
    """Triangulates one face. mids[k] is the midpoint of edge (face[k], face[k+1])."""
    if centroid is not None:
        ring: List[int] = []
        for k in range(3):
            ring.append(face[k])
            if mids[k] is not None:
                ring.append(mids[k])  # type: ignore[arg-type]
        return [[centroid, ring[i], ring[(i + 1) % len(ring)]] for i in range(len(ring))]
    n_split: int = sum(m is not None for m in mids)
    if n_split == 0:
        return [list(face)]
    # Rotate so the split pattern starts at corner 0.
    for shift in range(3):
        f = [face[(k + shift) % 3] for k in range(3)]
        m = [mids[(k + shift) % 3] for k in range(3)]
        if n_split == 1 and m[0] is not None:
            a, b, c = f
            return [[a, m[0], c], [m[0], b, c]]
        if n_split == 2 and m[0] is not None and m[1] is not None:
            a, b, c = f
            return [[m[0], b, m[1]], [a, m[0], m[1]], [a, m[1], c]]
    a, b, c = face
    mab, mbc, mca = mids
    return [[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]]  # type: ignore[list-item]


def upsample_mesh(template: SkinnedTemplate, face_area_thresh: float, edge_len_thresh: float) -> SkinnedTemplate:
    """Adds a centroid vertex to every face larger than face_area_thresh and a
    midpoint to every edge longer than edge_len_thresh (one pass). New vertices blend
    skinning weights, basis rows and labels of their parents barycentrically and are
    appended after the existing vertices.

    Raises:
        ValueError: If a threshold is not positive.
    """
    if face_area_thresh <= 0 or edge_len_thresh <= 0:
        raise ValueError("upsampling thresholds must be positive")
    rest = template.rest_vertices.detach().cpu().numpy().astype(np.float64)
    faces = template.faces.cpu().numpy()
    n_v: int = template.n_vertices

    edges, face_edges = mesh_ops.unique_edges(faces)
    lengths = np.linalg.norm(rest[edges[:, 1]] - rest[edges[:, 0]], axis=1)
    cross = np.cross(rest[faces[:, 1]] - rest[faces[:, 0]], rest[faces[:, 2]] - rest[faces[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)

    parent_rows: List[List[int]] = []
    weight_rows: List[List[float]] = []
    edge_mid: Dict[int, int] = {}
    for edge_id in np.flatnonzero(lengths > edge_len_thresh).tolist():
        edge_mid[edge_id] = n_v + len(parent_rows)
        a, b = edges[edge_id].tolist()
        parent_rows.append([a, b, a])
        weight_rows.append([0.5, 0.5, 0.0])

    n_degenerate: int = 0
    new_faces: List[List[int]] = []
    for face_id, face in enumerate(faces.tolist()):
        centroid: Optional[int] = None
        if areas[face_id] < mesh_ops.DEGENERATE_AREA:
            n_degenerate += 1
        elif areas[face_id] > face_area_thresh:
            centroid = n_v + len(parent_rows)
            parent_rows.append(list(face))
            weight_rows.append([1.0 / 3.0] * 3)
        mids: List[Optional[int]] = [edge_mid.get(int(e)) for e in face_edges[face_id]]
        new_faces.extend(_split_face(face, mids, centroid))
    if n_degenerate:
        logger.info(f"Upsampling skipped {n_degenerate} degenerate faces")
    if not parent_rows:
        return template

    parents = np.asarray(parent_rows, dtype=np.int64)
    weights = np.asarray(weight_rows, dtype=np.float64)
    rest_t = template.rest_vertices
    new_vertices = _blend_rows(rest_t, parents, weights)
    new_weights = _blend_rows(template.skin_weights, parents, weights)
    new_weights = new_weights / new_weights.sum(dim=1, keepdim=True)
    new_shape = _blend_rows(template.shape_basis, parents, weights)
    new_expr = _blend_rows(template.expression_basis, parents, weights)
    # Label of the heaviest parent; ties go to the first listed parent.
    parent_labels = template.segment[torch.as_tensor(parents)]
    heaviest = torch.as_tensor(np.argmax(weights, axis=1))
    new_segment = parent_labels[torch.arange(len(parents)), heaviest]

    upsampled = replace(
        template,
        rest_vertices=torch.cat([rest_t, new_vertices]),
        faces=torch.as_tensor(np.asarray(new_faces, dtype=np.int64)),
        skin_weights=torch.cat([template.skin_weights, new_weights]),
        shape_basis=torch.cat([template.shape_basis, new_shape]),
        expression_basis=torch.cat([template.expression_basis, new_expr]),
        segment=torch.cat([template.segment, new_segment]),
    )
    upsampled.validate()
    logger.info(
        f"Upsampled rig '{template.name}': {n_v} -> {upsampled.n_vertices} vertices, "
        f"{len(faces)} -> {len(new_faces)} faces"
    )
    return upsampled


def segment_values(table: Sequence[float], segment: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Looks up a per-segment constant (body, head, left_hand, right_hand) per entry."""
    return torch.as_tensor(list(table), dtype=dtype)[segment]


def apply_displacements(
    mesh: PosedMesh,
    field: DisplacementField,
    caps: Optional[Sequence[float]] = None,
) -> PosedMesh:
    """v' = v + d * n_v on original vertices; densified vertices keep their position.

    Displacements longer than the cap of their segment are scaled back onto the cap;
    the number of clamped vertices is reported on the returned mesh.

    Raises:
        ValueError: If the field does not cover exactly the original vertices.
    """
    n0: int = mesh.n_original_vertices
    if field.d.shape != (n0, 3):
        raise ValueError(f"displacement field must be ({n0}, 3), got {tuple(field.d.shape)}")
    d = field.d
    n_clamped: int = 0
    if caps is not None:
        cap = segment_values(caps, mesh.segment[:n0], d.dtype)
        length = d.norm(dim=-1)
        over = length > cap
        n_clamped = int(over.sum())
        scale = torch.where(over, cap / length.clamp_min(1e-12), torch.ones_like(length))
        d = d * scale.unsqueeze(-1)
        if n_clamped:
            logger.debug(f"Clamped {n_clamped} displacements to their segment caps")
    displaced = mesh.vertices[:n0] + d * mesh.vertex_normals[:n0]
    vertices = torch.cat([displaced, mesh.vertices[n0:]])
    return PosedMesh.from_vertices(
        vertices,
        mesh.faces,
        mesh.segment,
        n0,
        joints=mesh.joints,
        clamped_displacements=n_clamped,
    )
