from typing import Dict, List, Tuple

import numpy as np
import torch

DEGENERATE_AREA: float = 1e-12


def _unit_or_fallback(vectors: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norm = vectors.norm(dim=-1, keepdim=True)
    fallback = torch.zeros_like(vectors)
    fallback[..., 2] = 1.0
    return torch.where(norm > eps, vectors / norm.clamp_min(eps), fallback)


def face_normals_weighted(vertices: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Cross products of face edges; their length is twice the face area."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return torch.linalg.cross(v1 - v0, v2 - v0, dim=-1)


def face_normals(vertices: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    return _unit_or_fallback(face_normals_weighted(vertices, faces))


def vertex_normals(vertices: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Area-weighted unit vertex normals. Isolated vertices get +z."""
    weighted = face_normals_weighted(vertices, faces)
    accum = torch.zeros_like(vertices)
    for corner in range(3):
        accum = accum.index_add(0, faces[:, corner], weighted)
    return _unit_or_fallback(accum)


def face_areas(vertices: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    return 0.5 * face_normals_weighted(vertices, faces).norm(dim=-1)


def face_frames(vertices: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """(F, 3, 3) orthonormal frames with columns (tangent, bitangent, normal)."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    normal = face_normals(vertices, faces)
    tangent = _unit_or_fallback(v1 - v0)
    bitangent = _unit_or_fallback(torch.linalg.cross(normal, tangent, dim=-1))
    tangent = torch.linalg.cross(bitangent, normal, dim=-1)
    return torch.stack([tangent, bitangent, normal], dim=-1)


def unique_edges(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (E, 2) sorted vertex pairs and an (F, 3) map from face corner edge
    (v0v1, v1v2, v2v0) to edge index."""
    corners = np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1)
    pairs = np.sort(corners.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def vertex_face_rings(faces: np.ndarray, n_vertices: int) -> List[List[int]]:
    """Faces incident to each vertex, ascending."""
    rings: List[List[int]] = [[] for _ in range(n_vertices)]
    for face_id, face in enumerate(faces.tolist()):
        for vertex in face:
            if face_id not in rings[vertex]:
                rings[vertex].append(face_id)
    return rings


def face_adjacency(faces: np.ndarray) -> List[List[int]]:
    """Faces sharing an edge with each face, ascending."""
    _, face_edges = unique_edges(faces)
    by_edge: Dict[int, List[int]] = {}
    for face_id, edge_ids in enumerate(face_edges.tolist()):
        for edge_id in edge_ids:
            by_edge.setdefault(edge_id, []).append(face_id)
    adjacency: List[List[int]] = [[] for _ in range(len(faces))]
    for members in by_edge.values():
        for face_id in members:
            for other in members:
                if other != face_id and other not in adjacency[face_id]:
                    adjacency[face_id].append(other)
    return [sorted(neighbours) for neighbours in adjacency]
