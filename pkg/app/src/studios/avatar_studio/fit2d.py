"""Pose refinement against 2D keypoints.

Joint positions of the skinned rig are projected through pinhole cameras and compared
with keypoint detections; Adam descends on the confidence-weighted squared pixel error
with joint limits re-imposed after every step. A step that increases the error is
rejected: the best parameters are restored and the learning rate is halved.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from app.src.geometry.rotations import euler_to_matrix, quaternion_to_matrix, rigid_transform
from app.src.models.body_model import PoseParams, SkinnedTemplate, clamp_pose, joint_transforms
from app.src.rendering.camera import Camera, project_points
from app.src.roles.stage import BaseStage
from app.src.schemas.base import KeypointFrame, PoseFile
from app.src.schemas.config import Fit2DConfig, StudioConfig
from app.src.training.dataset import KEYPOINTS_FILE, DatasetError, load_dataset

logger = logging.getLogger(__name__)

FRAME_MARGIN: float = 0.2
ZERO_ERROR: float = 1e-12
FITTED_POSES_FILE: str = "fitted_poses.json"


@dataclass
class Keypoints2D:
    """Per-joint pixel coordinates (J, 2) and confidences (J,); a confidence of 0 masks
    the joint."""

    xy: torch.Tensor
    confidence: torch.Tensor

    @property
    def visible(self) -> torch.Tensor:
        return self.confidence > 0

    @classmethod
    def from_frame(cls, frame: KeypointFrame, camera: Camera, dtype: Optional[torch.dtype] = None) -> "Keypoints2D":
        """Reads one keypoint frame, masking points outside the image grown by 20%."""
        rows = torch.tensor(frame.keypoints, dtype=dtype or torch.get_default_dtype()).reshape(-1, 3)
        xy, confidence = rows[:, :2], rows[:, 2]
        margin_x: float = FRAME_MARGIN * camera.width
        margin_y: float = FRAME_MARGIN * camera.height
        inside = (
            (xy[:, 0] >= -margin_x)
            & (xy[:, 0] <= camera.width - 1 + margin_x)
            & (xy[:, 1] >= -margin_y)
            & (xy[:, 1] <= camera.height - 1 + margin_y)
        )
        return cls(xy=xy, confidence=torch.where(inside, confidence, torch.zeros_like(confidence)))


@dataclass
class FitResult:
    pose: PoseParams
    cameras: List[Camera]
    initial_error: float
    final_error: float
    steps: int
    history: List[float] = field(default_factory=list)


def posed_joints(template: SkinnedTemplate, pose: PoseParams) -> torch.Tensor:
    """(J, 3) world joint positions, consistent with `skin`."""
    world = joint_transforms(template, pose.theta)
    rotation = quaternion_to_matrix(pose.global_rot)
    return world[:, :3, 3] @ rotation.T + pose.global_trans


def adjusted_camera(camera: Camera, delta_rotation: torch.Tensor, delta_translation: torch.Tensor) -> Camera:
    rotation = euler_to_matrix(delta_rotation) @ camera.rotation
    translation = camera.translation + delta_translation
    return camera.with_extrinsics(rigid_transform(rotation, translation))


def reprojection_error(
    joints: torch.Tensor, keypoints: Sequence[Keypoints2D], cameras: Sequence[Camera]
) -> torch.Tensor:
    """Confidence-weighted mean squared pixel distance over all views."""
    weighted = joints.new_zeros(())
    weight = joints.new_zeros(())
    for points, camera in zip(keypoints, cameras):
        projected = project_points(joints, camera)
        squared = ((projected - points.xy.to(joints.dtype)) ** 2).sum(dim=-1)
        confidence = points.confidence.to(joints.dtype)
        weighted = weighted + (confidence * squared).sum()
        weight = weight + confidence.sum()
    return weighted / weight


def reprojection_fit(
    template: SkinnedTemplate,
    initial: PoseParams,
    keypoints: Sequence[Keypoints2D],
    cameras: Sequence[Camera],
    cfg: Fit2DConfig = Fit2DConfig(),
) -> FitResult:
    """Fits theta (and optionally the global transform and camera extrinsics) to
    keypoints seen from one or more views.

    Args:
        template (SkinnedTemplate): The rig; its joint order defines keypoint order.
        initial (PoseParams): Starting pose.
        keypoints (Sequence[Keypoints2D]): One entry per view.
        cameras (Sequence[Camera]): The camera of each view.
        cfg (Fit2DConfig): Learning rate, step budget and optional extra unknowns.

    Returns:
        FitResult: The best pose found (within joint limits) and the cameras.

    Raises:
        ValueError: On empty input, mismatched counts or when every keypoint is masked.
    """
    if not keypoints:
        raise ValueError("reprojection_fit needs at least one keypoint frame")
    if len(keypoints) != len(cameras):
        raise ValueError(f"{len(keypoints)} keypoint frames but {len(cameras)} cameras")
    for points in keypoints:
        if points.xy.shape[0] != template.n_joints:
            raise ValueError(f"keypoint frames need {template.n_joints} joints, got {points.xy.shape[0]}")
    if not any(bool(points.visible.any()) for points in keypoints):
        raise ValueError("all keypoints are masked")

    dtype: torch.dtype = initial.theta.dtype
    start = clamp_pose(template, initial.clone())
    theta = start.theta.clone().requires_grad_(True)
    global_rot = start.global_rot.clone().requires_grad_(cfg.optimize_global)
    global_trans = start.global_trans.clone().requires_grad_(cfg.optimize_global)
    delta_rotation = torch.zeros(len(cameras), 3, dtype=dtype, requires_grad=cfg.optimize_extrinsics)
    delta_translation = torch.zeros(len(cameras), 3, dtype=dtype, requires_grad=cfg.optimize_extrinsics)
    params: List[torch.Tensor] = [theta]
    if cfg.optimize_global:
        params += [global_rot, global_trans]
    if cfg.optimize_extrinsics:
        params += [delta_rotation, delta_translation]

    def current_cameras() -> List[Camera]:
        if not cfg.optimize_extrinsics:
            return list(cameras)
        return [adjusted_camera(c, delta_rotation[i], delta_translation[i]) for i, c in enumerate(cameras)]

    def current_pose() -> PoseParams:
        rot = global_rot / global_rot.norm() if cfg.optimize_global else global_rot
        return replace(start, theta=theta, global_rot=rot, global_trans=global_trans)

    def error() -> torch.Tensor:
        return reprojection_error(posed_joints(template, current_pose()), keypoints, current_cameras())

    with torch.no_grad():
        best_error: float = float(error())
    initial_error: float = best_error
    best: List[torch.Tensor] = [p.detach().clone() for p in params]
    history: List[float] = [best_error]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    steps: int = 0
    while steps < cfg.max_steps and best_error > ZERO_ERROR:
        steps += 1
        optimizer.zero_grad(set_to_none=True)
        loss = error()
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            theta.copy_(clamp_pose(template, replace(start, theta=theta.detach())).theta)
            value: float = float(error())
        if value <= best_error:
            best_error = value
            best = [p.detach().clone() for p in params]
        else:
            with torch.no_grad():
                for param, saved in zip(params, best):
                    param.copy_(saved)
            for group in optimizer.param_groups:
                group["lr"] *= 0.5
            if optimizer.param_groups[0]["lr"] < cfg.min_lr:
                logger.debug(f"Learning rate fell below {cfg.min_lr} after {steps} steps")
                break
        history.append(best_error)

    with torch.no_grad():
        pose = clamp_pose(template, current_pose()).clone()
        fitted_cameras = [
            replace(c, world_to_cam=c.world_to_cam.detach().clone()) for c in current_cameras()
        ]
    logger.info(f"Reprojection error {initial_error:.6f} -> {best_error:.6f} px^2 in {steps} steps")
    return FitResult(
        pose=pose,
        cameras=fitted_cameras,
        initial_error=initial_error,
        final_error=best_error,
        steps=steps,
        history=history,
    )


class PoseFitter(BaseStage):
    """Fits every dataset pose that has keypoints and writes the fitted pose file."""

    def initial_pose(self, pose: PoseParams) -> PoseParams:
        if self.config.fit2d.init == "rest":
            return replace(pose.clone(), theta=torch.zeros_like(pose.theta), psi=torch.zeros_like(pose.psi))
        return pose

    def _run(self, *args, **kwargs) -> Dict[int, FitResult]:
        cfg: StudioConfig = self.config
        dataset = load_dataset(kwargs.get("dataset_dir") or cfg.paths.dataset, load_images=False)
        if dataset.keypoints is None:
            raise DatasetError(dataset.root / KEYPOINTS_FILE, "file is missing")
        cameras: Dict[Tuple[int, int], Camera] = {
            (int(c.frame_id), c.camera_id): c for c in dataset.cameras  # type: ignore[arg-type]
        }
        grouped: Dict[int, List[KeypointFrame]] = {}
        for frame in dataset.keypoints.frames:
            if (frame.frame_id, frame.camera_id) not in cameras:
                raise DatasetError(
                    dataset.root / KEYPOINTS_FILE,
                    f"no camera {frame.camera_id} for frame_id {frame.frame_id}",
                )
            grouped.setdefault(frame.frame_id, []).append(frame)

        results: Dict[int, FitResult] = {}
        for frame_id in sorted(grouped):
            views = [cameras[(frame_id, f.camera_id)] for f in grouped[frame_id]]
            points = [Keypoints2D.from_frame(f, c, dtype=c.world_to_cam.dtype) for f, c in zip(grouped[frame_id], views)]
            start = self.initial_pose(dataset.poses[frame_id])
            results[frame_id] = reprojection_fit(dataset.rig, start, points, views, cfg.fit2d)
            self.logger.info(
                f"Frame {frame_id}: error {results[frame_id].initial_error:.4f} -> "
                f"{results[frame_id].final_error:.4f} px^2 over {len(views)} views"
            )

        output = Path(cfg.paths.output)
        output.mkdir(parents=True, exist_ok=True)
        pose_file = PoseFile(poses=[results[i].pose.to_record(frame_id=i) for i in sorted(results)])
        (output / FITTED_POSES_FILE).write_text(pose_file.model_dump_json(indent=2), encoding="utf-8")
        return results
