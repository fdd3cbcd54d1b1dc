"""Procedural desk-scale scene.

Builds a toy rig (a capsule torso, a capsule head and two three-joint capsule hands),
samples poses within its joint limits, places cameras on a ring and renders ground
truth with a supersampled z-buffer triangle rasterizer. The surface texture is a
smooth function of each point's rest position, so it moves with the skin. Exact joint
projections are written as keypoints and a handful of short clips as a gloss library.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.src.geometry.rotations import euler_to_quaternion
from app.src.models.body_model import PoseParams, SkinnedTemplate, clamp_pose, skin
from app.src.models.rig_io import save_rig, template_from_record
from app.src.rendering.camera import Camera, look_at, project_points
from app.src.rendering.image_io import write_png
from app.src.roles.stage import BaseStage
from app.src.schemas.base import (
    AnimationRecord,
    CameraRecord,
    CameraSet,
    DatasetSplit,
    GlossDictionary,
    JointLimitValue,
    KeypointFile,
    KeypointFrame,
    PoseFile,
    RigRecord,
    SEGMENT_ORDER,
    Segment,
)
from app.src.schemas.config import SyntheticConfig
from app.src.studios.avatar_studio.stitcher import DICTIONARY_FILE, GLOSS_DIR
from app.src.training.dataset import CAMERAS_FILE, KEYPOINTS_FILE, POSES_FILE, RIG_FILE, frame_path

logger = logging.getLogger(__name__)

SUPERSAMPLING: int = 2
POSE_RANGE: float = 0.6
CAMERA_TARGET: Tuple[float, float, float] = (0.0, 0.15, 0.0)
CAMERA_ELEVATION: float = 0.15

BASE_COLORS: Dict[Segment, Tuple[float, float, float]] = {
    Segment.BODY: (0.80, 0.45, 0.30),
    Segment.HEAD: (0.90, 0.75, 0.60),
    Segment.LEFT_HAND: (0.30, 0.55, 0.85),
    Segment.RIGHT_HAND: (0.35, 0.75, 0.40),
}

# name, parent, position, segment
TOY_JOINTS: List[Tuple[str, int, Tuple[float, float, float], Segment]] = [
    ("pelvis", -1, (0.0, -0.25, 0.0), Segment.BODY),
    ("chest", 0, (0.0, 0.15, 0.0), Segment.BODY),
    ("head", 1, (0.0, 0.6, 0.0), Segment.HEAD),
    ("left_wrist", 1, (0.3, 0.2, 0.0), Segment.LEFT_HAND),
    ("left_knuckle", 3, (0.5, 0.2, 0.0), Segment.LEFT_HAND),
    ("left_tip", 4, (0.66, 0.2, 0.0), Segment.LEFT_HAND),
    ("right_wrist", 1, (-0.3, 0.2, 0.0), Segment.RIGHT_HAND),
    ("right_knuckle", 6, (-0.5, 0.2, 0.0), Segment.RIGHT_HAND),
    ("right_tip", 7, (-0.66, 0.2, 0.0), Segment.RIGHT_HAND),
]

TOY_LIMITS: Dict[str, List[JointLimitValue]] = {
    "pelvis": [[-0.3, 0.3]] * 3,
    "chest": [[-0.4, 0.4]] * 3,
    "head": [[-0.5, 0.5], [-0.7, 0.7], [-0.3, 0.3]],
    "left_wrist": [[-0.8, 0.8]] * 3,
    "left_knuckle": ["locked", [-0.3, 0.3], [-1.0, 1.0]],
    "left_tip": ["locked", "locked", [-1.0, 1.0]],
    "right_wrist": [[-0.8, 0.8]] * 3,
    "right_knuckle": ["locked", [-0.3, 0.3], [-1.0, 1.0]],
    "right_tip": ["locked", "locked", [-1.0, 1.0]],
}


@dataclass
class _Part:
    """One capsule of the toy rig and the joint chain skinning it."""

    start: Tuple[float, float, float]
    end: Tuple[float, float, float]
    radius: float
    chain: List[Tuple[int, float]]  # (joint, distance from start along the axis)
    segment: Segment


TOY_PARTS: List[_Part] = [
    _Part((0.0, -0.55, 0.0), (0.0, 0.3, 0.0), 0.25, [(0, 0.3), (1, 0.7)], Segment.BODY),
    _Part((0.0, 0.75, 0.0), (0.0, 0.85, 0.0), 0.15, [(2, 0.0)], Segment.HEAD),
    _Part((0.22, 0.2, 0.0), (0.8, 0.2, 0.0), 0.05, [(3, 0.08), (4, 0.28), (5, 0.44)], Segment.LEFT_HAND),
    _Part((-0.22, 0.2, 0.0), (-0.8, 0.2, 0.0), 0.05, [(6, 0.08), (7, 0.28), (8, 0.44)], Segment.RIGHT_HAND),
]


@dataclass
class SyntheticScene:
    root: Path
    n_frames: int
    n_train: int
    n_test: int
    n_glosses: int


def capsule(
    start: Sequence[float], end: Sequence[float], radius: float, sides: int = 12, cap_rings: int = 3, body_rings: int = 4
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed capsule mesh with outward-facing triangles.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (V, 3) vertices and (F, 3) faces.
    """
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(end, dtype=np.float64)
    length: float = float(np.linalg.norm(b - a))
    direction = (b - a) / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    w = np.cross(direction, u)

    profile: List[Tuple[float, float]] = []
    for i in range(1, cap_rings + 1):
        phi = -math.pi / 2 + i * (math.pi / 2) / cap_rings
        profile.append((radius * math.sin(phi), radius * math.cos(phi)))
    for i in range(1, body_rings):
        profile.append((length * i / body_rings, radius))
    for i in range(cap_rings):
        phi = i * (math.pi / 2) / cap_rings
        profile.append((length + radius * math.sin(phi), radius * math.cos(phi)))

    angles = 2.0 * math.pi * np.arange(sides) / sides
    radial = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * w
    rings = [a + direction * along + r * radial for along, r in profile]
    vertices = np.concatenate([[a - radius * direction], *rings, [b + radius * direction]])

    faces: List[List[int]] = []
    top: int = len(vertices) - 1

    def ring(k: int, j: int) -> int:
        return 1 + k * sides + (j % sides)

    for j in range(sides):
        faces.append([0, ring(0, j + 1), ring(0, j)])
    for k in range(len(profile) - 1):
        for j in range(sides):
            faces.append([ring(k, j), ring(k, j + 1), ring(k + 1, j + 1)])
            faces.append([ring(k, j), ring(k + 1, j + 1), ring(k + 1, j)])
    last: int = len(profile) - 1
    for j in range(sides):
        faces.append([top, ring(last, j), ring(last, j + 1)])
    return vertices, np.asarray(faces, dtype=np.int64)


def chain_weights(vertices: np.ndarray, part: _Part, n_joints: int) -> np.ndarray:
    """Piecewise-linear skin weights between consecutive joints of the part's chain."""
    a = np.asarray(part.start, dtype=np.float64)
    direction = np.asarray(part.end, dtype=np.float64) - a
    direction /= np.linalg.norm(direction)
    along = (vertices - a) @ direction
    weights = np.zeros((len(vertices), n_joints))
    joints = [j for j, _ in part.chain]
    stops = np.asarray([d for _, d in part.chain])
    if len(joints) == 1:
        weights[:, joints[0]] = 1.0
        return weights
    position = np.clip(along, stops[0], stops[-1])
    index = np.clip(np.searchsorted(stops, position, side="right") - 1, 0, len(stops) - 2)
    fraction = (position - stops[index]) / (stops[index + 1] - stops[index])
    rows = np.arange(len(vertices))
    weights[rows, np.asarray(joints)[index]] += 1.0 - fraction
    weights[rows, np.asarray(joints)[index + 1]] += fraction
    return weights


def toy_rig_record(sides: int = 12, cap_rings: int = 3, body_rings: int = 4) -> RigRecord:
    """The toy rig with two shape components (girth, height) and one expression
    component (a bulge on the front of the head)."""
    n_joints: int = len(TOY_JOINTS)
    vertices: List[np.ndarray] = []
    faces: List[np.ndarray] = []
    weights: List[np.ndarray] = []
    segments: List[Segment] = []
    offset: int = 0
    for part in TOY_PARTS:
        part_vertices, part_faces = capsule(part.start, part.end, part.radius, sides, cap_rings, body_rings)
        vertices.append(part_vertices)
        faces.append(part_faces + offset)
        weights.append(chain_weights(part_vertices, part, n_joints))
        segments.extend([part.segment] * len(part_vertices))
        offset += len(part_vertices)
    rest = np.concatenate(vertices)
    skin_weights = np.concatenate(weights)

    labels = np.asarray([s.code for s in segments])
    shape_basis = np.zeros((len(rest), 3, 2))
    body = labels == Segment.BODY.code
    shape_basis[body, 0, 0] = 0.15 * rest[body, 0]
    shape_basis[body, 2, 0] = 0.15 * rest[body, 2]
    shape_basis[:, 1, 1] = 0.05 * (rest[:, 1] + 0.55)
    expression_basis = np.zeros((len(rest), 3, 1))
    head = labels == Segment.HEAD.code
    expression_basis[head, 2, 0] = 0.3 * np.clip(rest[head, 2], 0.0, None)

    return RigRecord(
        name="toy",
        rest_vertices=rest.tolist(),
        faces=np.concatenate(faces).tolist(),
        joint_names=[name for name, _, _, _ in TOY_JOINTS],
        joints=[list(position) for _, _, position, _ in TOY_JOINTS],
        parents=[None if parent < 0 else parent for _, parent, _, _ in TOY_JOINTS],
        joint_segments=[segment for _, _, _, segment in TOY_JOINTS],
        skin_weights=[{int(j): float(row[j]) for j in np.flatnonzero(row)} for row in skin_weights],
        shape_basis=shape_basis.tolist(),
        expression_basis=expression_basis.tolist(),
        segment=segments,
        joint_limits=TOY_LIMITS,
    )


def toy_rig(dtype: Optional[torch.dtype] = None, **resolution: int) -> SkinnedTemplate:
    return template_from_record(toy_rig_record(**resolution), dtype=dtype)


def sample_pose(template: SkinnedTemplate, beta: np.ndarray, rng: np.random.Generator) -> PoseParams:
    """A pose inside the joint limits with a small yaw and offset."""
    dtype: torch.dtype = template.rest_vertices.dtype
    limits = template.joint_limits.detach().cpu().numpy() * POSE_RANGE
    theta = rng.uniform(limits[..., 0], limits[..., 1])
    yaw: float = float(rng.uniform(-0.4, 0.4))
    pose = PoseParams(
        beta=torch.as_tensor(beta, dtype=dtype),
        psi=torch.as_tensor(rng.uniform(-1.0, 1.0, template.n_expression), dtype=dtype),
        theta=torch.as_tensor(theta, dtype=dtype),
        global_rot=torch.as_tensor(euler_to_quaternion(np.array([0.0, yaw, 0.0])), dtype=dtype),
        global_trans=torch.as_tensor(rng.uniform(-0.05, 0.05, 3), dtype=dtype),
    )
    return clamp_pose(template, pose)


def ring_cameras(cfg: SyntheticConfig, dtype: Optional[torch.dtype] = None) -> List[Camera]:
    """`n_views` cameras on a ring around the subject, all at the same elevation."""
    cameras: List[Camera] = []
    target = np.asarray(CAMERA_TARGET)
    for view in range(cfg.n_views):
        azimuth: float = 2.0 * math.pi * view / cfg.n_views
        direction = np.array(
            [
                math.sin(azimuth) * math.cos(CAMERA_ELEVATION),
                math.sin(CAMERA_ELEVATION),
                math.cos(azimuth) * math.cos(CAMERA_ELEVATION),
            ]
        )
        cameras.append(
            Camera(
                fx=cfg.focal,
                fy=cfg.focal,
                cx=0.5 * (cfg.width - 1),
                cy=0.5 * (cfg.height - 1),
                width=cfg.width,
                height=cfg.height,
                world_to_cam=look_at(target + cfg.camera_distance * direction, target, dtype=dtype),
                camera_id=view,
                split=DatasetSplit.TEST if view in cfg.held_out_views else DatasetSplit.TRAIN,
            )
        )
    return cameras


def surface_color(rest_points: np.ndarray, segment_codes: np.ndarray) -> np.ndarray:
    """Smooth procedural albedo in [0, 1] from rest-space positions."""
    base = np.asarray([BASE_COLORS[s] for s in SEGMENT_ORDER], dtype=np.float64)[segment_codes]
    x, y, z = rest_points[..., 0], rest_points[..., 1], rest_points[..., 2]
    pattern = np.sin(9.0 * x + 2.0) * np.sin(9.0 * y) * np.cos(7.0 * z)
    return base * (0.7 + 0.3 * pattern[..., None])


def render_reference(
    vertices: np.ndarray,
    faces: np.ndarray,
    rest: np.ndarray,
    vertex_segment: np.ndarray,
    camera: Camera,
    background: Sequence[float],
    supersampling: int = SUPERSAMPLING,
) -> np.ndarray:
    """Z-buffered, perspective-correct triangle rasterization of a textured mesh.

    Pixel centers sit at integer coordinates; each pixel averages a
    supersampling x supersampling grid of samples.

    Returns:
        np.ndarray: (H, W, 3) float64 image.
    """
    rotation = camera.rotation.detach().cpu().numpy().astype(np.float64)
    translation = camera.translation.detach().cpu().numpy().astype(np.float64)
    in_cam = vertices @ rotation.T + translation
    depth_v = in_cam[:, 2]
    safe_depth = np.where(depth_v > camera.near, depth_v, 1.0)
    px = camera.fx * in_cam[:, 0] / safe_depth + camera.cx
    py = camera.fy * in_cam[:, 1] / safe_depth + camera.cy

    offsets = (np.arange(supersampling) + 0.5) / supersampling - 0.5
    xs = (np.arange(camera.width)[:, None] + offsets[None, :]).ravel()
    ys = (np.arange(camera.height)[:, None] + offsets[None, :]).ravel()
    depth = np.full((len(ys), len(xs)), np.inf)
    rest_buffer = np.zeros((len(ys), len(xs), 3))
    segment_buffer = np.full((len(ys), len(xs)), -1, dtype=np.int64)

    for face in faces:
        i, j, k = (int(v) for v in face)
        if min(depth_v[i], depth_v[j], depth_v[k]) <= camera.near:
            continue
        x0, x1, x2 = px[i], px[j], px[k]
        y0, y1, y2 = py[i], py[j], py[k]
        denom: float = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(denom) < 1e-12:
            continue
        cols = slice(np.searchsorted(xs, min(x0, x1, x2)), np.searchsorted(xs, max(x0, x1, x2), side="right"))
        rows = slice(np.searchsorted(ys, min(y0, y1, y2)), np.searchsorted(ys, max(y0, y1, y2), side="right"))
        if cols.start >= cols.stop or rows.start >= rows.stop:
            continue
        gx, gy = np.meshgrid(xs[cols], ys[rows])
        w0 = ((y1 - y2) * (gx - x2) + (x2 - x1) * (gy - y2)) / denom
        w1 = ((y2 - y0) * (gx - x2) + (x0 - x2) * (gy - y2)) / denom
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_depth = w0 / depth_v[i] + w1 / depth_v[j] + w2 / depth_v[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = 1.0 / inv_depth
        closer = inside & (z < depth[rows, cols])
        if not closer.any():
            continue
        weights = np.stack([w0 / depth_v[i], w1 / depth_v[j], w2 / depth_v[k]], axis=-1) * z[..., None]
        attribute = weights @ rest[[i, j, k]]
        depth[rows, cols] = np.where(closer, z, depth[rows, cols])
        rest_buffer[rows, cols] = np.where(closer[..., None], attribute, rest_buffer[rows, cols])
        segment_buffer[rows, cols] = np.where(closer, vertex_segment[i], segment_buffer[rows, cols])

    covered = segment_buffer >= 0
    image = np.broadcast_to(np.asarray(background, dtype=np.float64), depth.shape + (3,)).copy()
    image[covered] = surface_color(rest_buffer[covered], segment_buffer[covered])
    return image.reshape(camera.height, supersampling, camera.width, supersampling, 3).mean(axis=(1, 3))


def keypoints_for(template: SkinnedTemplate, pose: PoseParams, camera: Camera) -> List[List[float]]:
    joints = skin(template, pose).joints
    projected = project_points(joints, camera)  # type: ignore[arg-type]
    return [[float(x), float(y), 1.0] for x, y in projected.tolist()]


def gloss_clips(template: SkinnedTemplate, beta: np.ndarray) -> Dict[str, List[PoseParams]]:
    """Short demo clips for the toy rig, each within joint limits."""
    dtype: torch.dtype = template.rest_vertices.dtype
    index: Dict[str, int] = {name: j for j, name in enumerate(template.joint_names)}

    def clip(n_frames: int, trans_z: float, fill: Callable[[PoseParams, float], None]) -> List[PoseParams]:
        frames: List[PoseParams] = []
        for f in range(n_frames):
            pose = PoseParams.identity(template)
            pose.beta = torch.as_tensor(beta, dtype=dtype)
            pose.global_trans = torch.tensor([0.0, 0.0, trans_z], dtype=dtype)
            fill(pose, f / max(n_frames - 1, 1))
            frames.append(clamp_pose(template, pose))
        return frames

    def hello(pose: PoseParams, t: float) -> None:
        pose.theta[index["right_wrist"], 2] = 0.6 * math.sin(2.0 * math.pi * t)
        pose.theta[index["chest"], 1] = -0.1

    def thanks(pose: PoseParams, t: float) -> None:
        for side in ("left", "right"):
            pose.theta[index[f"{side}_knuckle"], 2] = 0.9 * t
            pose.theta[index[f"{side}_tip"], 2] = 0.6 * t

    def yes(pose: PoseParams, t: float) -> None:
        pose.theta[index["head"], 0] = 0.4 * math.sin(2.0 * math.pi * t)
        pose.psi[:] = 0.5

    def you(pose: PoseParams, t: float) -> None:
        pose.theta[index["left_wrist"], 1] = 0.5 * t

    return {
        "hello": clip(10, 0.0, hello),
        "thanks": clip(8, 0.01, thanks),
        "yes": clip(8, -0.01, yes),
        "you": clip(6, 0.02, you),
    }


GLOSS_TOKENS: Dict[str, str] = {
    "hello": "hello.json",
    "hi": "hello.json",
    "thanks": "thanks.json",
    "thank-you": "thanks.json",
    "yes": "yes.json",
    "you": "you.json",
}


def write_synthetic_scene(root: str | Path, cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticScene:
    """Writes the toy dataset: rig, cameras, poses, frames, keypoints and glosses.

    Frame i * n_views + v shows pose i from view v; views listed in `held_out_views`
    are marked as test frames.

    Args:
        root (str | Path): Output directory, created if needed.
        cfg (SyntheticConfig): Seed, counts, image size and camera ring.

    Returns:
        SyntheticScene: Where the scene went and its frame counts.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    record = toy_rig_record()
    template = template_from_record(record, dtype=torch.float64)
    save_rig(template, root / RIG_FILE)

    beta = rng.uniform(-1.0, 1.0, template.n_shape)
    poses: List[PoseParams] = [sample_pose(template, beta, rng) for _ in range(cfg.n_poses)]
    cameras: List[Camera] = ring_cameras(cfg, dtype=torch.float64)

    rest = template.rest_vertices.numpy()
    faces = template.faces.numpy()
    vertex_segment = template.segment.numpy()
    camera_records: List[CameraRecord] = []
    keypoint_frames: List[KeypointFrame] = []
    for pose_index, pose in enumerate(poses):
        posed = skin(template, pose).vertices.detach().numpy()
        for camera in cameras:
            index: int = len(camera_records)
            image = render_reference(posed, faces, rest, vertex_segment, camera, cfg.background)
            write_png(image, frame_path(root, index))
            record_camera = camera.to_record()
            record_camera.frame_id = pose_index
            camera_records.append(record_camera)
            keypoint_frames.append(
                KeypointFrame(
                    frame_id=pose_index,
                    camera_id=camera.camera_id,
                    keypoints=keypoints_for(template, pose, camera),
                )
            )

    (root / CAMERAS_FILE).write_text(
        CameraSet(background=list(cfg.background), cameras=camera_records).model_dump_json(indent=2), encoding="utf-8"
    )
    (root / POSES_FILE).write_text(
        PoseFile(poses=[p.to_record(frame_id=i) for i, p in enumerate(poses)]).model_dump_json(indent=2),
        encoding="utf-8",
    )
    (root / KEYPOINTS_FILE).write_text(
        KeypointFile(frames=keypoint_frames).model_dump_json(indent=2), encoding="utf-8"
    )

    gloss_dir: Path = root / GLOSS_DIR
    gloss_dir.mkdir(exist_ok=True)
    clips = gloss_clips(template, beta)
    for name, frames in clips.items():
        clip_record = AnimationRecord(
            name=name,
            n_frames=len(frames),
            frames=[f.to_record(frame_id=i) for i, f in enumerate(frames)],
        )
        (gloss_dir / f"{name}.json").write_text(clip_record.model_dump_json(indent=2), encoding="utf-8")
    (gloss_dir / DICTIONARY_FILE).write_text(
        GlossDictionary(entries=GLOSS_TOKENS).model_dump_json(indent=2), encoding="utf-8"
    )

    n_test: int = sum(1 for c in camera_records if c.split == DatasetSplit.TEST)
    scene = SyntheticScene(
        root=root,
        n_frames=len(camera_records),
        n_train=len(camera_records) - n_test,
        n_test=n_test,
        n_glosses=len(clips),
    )
    logger.info(
        f"Wrote synthetic scene to {root}: {scene.n_frames} frames ({scene.n_train} train, {scene.n_test} test), "
        f"{template.n_vertices} vertices, {len(faces)} faces, {scene.n_glosses} glosses"
    )
    return scene


class SceneMaker(BaseStage):
    """Generates the synthetic dataset into `output_dir` (default: paths.dataset)."""

    def _run(self, *args, **kwargs) -> SyntheticScene:
        root = Path(kwargs.get("output_dir") or self.config.paths.dataset)
        cfg: SyntheticConfig = self.config.synthetic
        bad_views: List[int] = [v for v in cfg.held_out_views if not 0 <= v < cfg.n_views]
        if bad_views:
            raise ValueError(f"held_out_views {bad_views} outside 0..{cfg.n_views - 1}")
        if len(cfg.background) != 3:
            raise ValueError("synthetic.background must be an RGB triple")
        return write_synthetic_scene(root, cfg)
