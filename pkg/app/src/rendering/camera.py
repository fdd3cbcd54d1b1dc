from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from app.src.schemas.base import CameraRecord, DatasetSplit


@dataclass
class Camera:
    """Pinhole camera in the OpenCV convention (x right, y down, z forward).

    Attributes:
        fx, fy, cx, cy: Intrinsics in pixels. Pixel centres sit at integer coordinates.
        width, height: Image size in pixels.
        world_to_cam: (4, 4) rigid transform. May require grad (extrinsic refinement).
        near: Near plane in meters.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: torch.Tensor
    near: float = 0.01
    frame_id: Optional[int] = None
    camera_id: int = 0
    split: DatasetSplit = DatasetSplit.TRAIN

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        if tuple(self.world_to_cam.shape) != (4, 4):
            raise ValueError("world_to_cam must be 4x4")

    @property
    def rotation(self) -> torch.Tensor:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> torch.Tensor:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation

    @classmethod
    def from_record(cls, record: CameraRecord, dtype: Optional[torch.dtype] = None) -> "Camera":
        return cls(
            fx=record.fx,
            fy=record.fy,
            cx=record.cx,
            cy=record.cy,
            width=record.width,
            height=record.height,
            world_to_cam=torch.tensor(record.world_to_cam, dtype=dtype or torch.get_default_dtype()),
            near=record.near,
            frame_id=record.frame_id,
            camera_id=record.camera_id,
            split=record.split,
        )

    def to_record(self) -> CameraRecord:
        return CameraRecord(
            frame_id=self.frame_id,
            camera_id=self.camera_id,
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
            world_to_cam=self.world_to_cam.detach().tolist(),
            near=self.near,
            split=self.split,
        )

    def with_extrinsics(self, world_to_cam: torch.Tensor) -> "Camera":
        return replace(self, world_to_cam=world_to_cam)

    def to_camera(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation.T + self.translation


def project_points(points: torch.Tensor, cam: Camera) -> torch.Tensor:
    """(N, 3) world points -> (N, 2) pixel coordinates."""
    p = cam.to_camera(points)
    z = p[:, 2]
    return torch.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], dim=-1)


def look_at(
    eye: Sequence[float],
    target: Sequence[float],
    up: Sequence[float] = (0.0, 1.0, 0.0),
    dtype: Optional[torch.dtype] = None,
) -> torch.Tensor:
    """World-to-camera transform of a camera at `eye` looking at `target`, with image y
    pointing against `up`."""
    eye_v = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye_v
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    world_to_cam = np.eye(4)
    world_to_cam[:3, :3] = rotation
    world_to_cam[:3, 3] = -rotation @ eye_v
    return torch.as_tensor(world_to_cam, dtype=dtype or torch.get_default_dtype())
