"""Dataset directory loading and validation.

Layout::

    rig.json              the skinned rig (docs/rig_format.md)
    joint_limits.json     optional, replaces the rig's joint limits
    cameras.json          CameraSet; record i belongs to frames/{i:04d}.png
    poses.json            PoseFile, one pose per frame_id (time instant)
    keypoints.json        optional KeypointFile for fit2d
    frames/NNNN.png       one image per camera record

A camera record's frame_id selects its pose, so every view of one time instant shares a
pose.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch
from pydantic import BaseModel, ValidationError

from app.src.models.body_model import PoseParams, SkinnedTemplate, clamp_pose
from app.src.models.rig_io import load_rig
from app.src.rendering.camera import Camera
from app.src.rendering.image_io import read_png
from app.src.schemas.base import CameraSet, DatasetSplit, KeypointFile, PoseFile

logger = logging.getLogger(__name__)

RIG_FILE: str = "rig.json"
JOINT_LIMITS_FILE: str = "joint_limits.json"
CAMERAS_FILE: str = "cameras.json"
POSES_FILE: str = "poses.json"
KEYPOINTS_FILE: str = "keypoints.json"
FRAMES_DIR: str = "frames"


class DatasetError(ValueError):
    """Invalid dataset; `path` names the first failing file."""

    def __init__(self, path: str | Path, message: str):
        self.path: Path = Path(path)
        super().__init__(f"{self.path}: {message}")


def frame_path(root: str | Path, index: int) -> Path:
    return Path(root) / FRAMES_DIR / f"{index:04d}.png"


@dataclass
class TrainingFrame:
    index: int
    image: torch.Tensor
    camera: Camera
    pose: PoseParams

    @property
    def frame_id(self) -> int:
        return int(self.camera.frame_id)  # type: ignore[arg-type]

    @property
    def camera_id(self) -> int:
        return self.camera.camera_id

    @property
    def split(self) -> DatasetSplit:
        return self.camera.split


@dataclass
class Dataset:
    root: Path
    rig: SkinnedTemplate
    frames: List[TrainingFrame]
    poses: Dict[int, PoseParams]
    background: torch.Tensor
    keypoints: Optional[KeypointFile] = None
    cameras: List[Camera] = field(default_factory=list)

    def split(self, split: DatasetSplit) -> List[TrainingFrame]:
        return [f for f in self.frames if f.split == split]

    @property
    def train_frames(self) -> List[TrainingFrame]:
        return self.split(DatasetSplit.TRAIN)

    @property
    def test_frames(self) -> List[TrainingFrame]:
        return self.split(DatasetSplit.TEST)


def _read_model(path: Path, model: type[BaseModel]) -> BaseModel:
    if not path.is_file():
        raise DatasetError(path, "file is missing")
    try:
        return model.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetError(path, f"invalid contents: {e.errors()[0]['msg']}") from e


def _load_poses(path: Path, rig: SkinnedTemplate, dtype: torch.dtype) -> Dict[int, PoseParams]:
    records: PoseFile = _read_model(path, PoseFile)  # type: ignore[assignment]
    poses: Dict[int, PoseParams] = {}
    for i, record in enumerate(records.poses):
        if record.frame_id is None:
            raise DatasetError(path, f"pose {i} has no frame_id")
        if record.frame_id in poses:
            raise DatasetError(path, f"frame_id {record.frame_id} appears twice")
        try:
            pose = PoseParams.from_record(record, dtype=dtype)
        except ValueError as e:
            raise DatasetError(path, f"pose {record.frame_id}: {e}") from e
        if tuple(pose.theta.shape) != (rig.n_joints, 3):
            raise DatasetError(path, f"pose {record.frame_id} has {pose.theta.shape[0]} joints, rig has {rig.n_joints}")
        if pose.beta.shape[0] != rig.n_shape or pose.psi.shape[0] != rig.n_expression:
            raise DatasetError(path, f"pose {record.frame_id} beta/psi sizes do not match the rig bases")
        clamped = clamp_pose(rig, pose)
        if not torch.equal(clamped.theta, pose.theta):
            logger.warning(f"Pose {record.frame_id} violates joint limits; clamped on load")
        poses[record.frame_id] = clamped
    return poses


def load_template(root: str | Path, dtype: Optional[torch.dtype] = None) -> SkinnedTemplate:
    root = Path(root)
    rig_path: Path = root / RIG_FILE
    if not rig_path.is_file():
        raise DatasetError(rig_path, "file is missing")
    limits_path: Path = root / JOINT_LIMITS_FILE
    try:
        return load_rig(rig_path, limits_path if limits_path.is_file() else None, dtype=dtype)
    except (ValidationError, ValueError, json.JSONDecodeError) as e:
        raise DatasetError(rig_path, f"invalid rig: {e}") from e


def load_dataset(root: str | Path, dtype: Optional[torch.dtype] = None, load_images: bool = True) -> Dataset:
    """Reads and validates a dataset directory.

    Args:
        root (str | Path): Dataset directory.
        dtype (Optional[torch.dtype]): Tensor dtype, the default dtype when None.
        load_images (bool): Skip reading frames when False (images become empty tensors).

    Returns:
        Dataset: Rig, frames in camera-record order, poses and background.

    Raises:
        DatasetError: Naming the first missing or invalid file.
    """
    root = Path(root)
    dtype = dtype or torch.get_default_dtype()
    if not root.is_dir():
        raise DatasetError(root, "dataset directory does not exist")
    rig = load_template(root, dtype=dtype)
    cameras_path: Path = root / CAMERAS_FILE
    camera_set: CameraSet = _read_model(cameras_path, CameraSet)  # type: ignore[assignment]
    poses_path: Path = root / POSES_FILE
    poses = _load_poses(poses_path, rig, dtype)

    frames: List[TrainingFrame] = []
    cameras: List[Camera] = []
    for index, record in enumerate(camera_set.cameras):
        if record.frame_id is None:
            raise DatasetError(cameras_path, f"camera {index} has no frame_id")
        if record.frame_id not in poses:
            raise DatasetError(poses_path, f"no pose for frame_id {record.frame_id}")
        try:
            camera = Camera.from_record(record, dtype=dtype)
        except ValueError as e:
            raise DatasetError(cameras_path, f"camera {index}: {e}") from e
        cameras.append(camera)
        image_path: Path = frame_path(root, index)
        if not image_path.is_file():
            raise DatasetError(image_path, "frame image is missing")
        image = torch.empty(0, dtype=dtype)
        if load_images:
            try:
                image = read_png(image_path, dtype=dtype)
            except OSError as e:
                raise DatasetError(image_path, f"unreadable image: {e}") from e
            if tuple(image.shape[:2]) != (camera.height, camera.width):
                raise DatasetError(
                    image_path,
                    f"image is {image.shape[1]}x{image.shape[0]}, camera expects {camera.width}x{camera.height}",
                )
        frames.append(TrainingFrame(index=index, image=image, camera=camera, pose=poses[record.frame_id]))

    keypoints: Optional[KeypointFile] = None
    keypoints_path: Path = root / KEYPOINTS_FILE
    if keypoints_path.is_file():
        keypoints = _read_model(keypoints_path, KeypointFile)  # type: ignore[assignment]

    background = torch.tensor(camera_set.background, dtype=dtype)
    if background.shape != (3,):
        raise DatasetError(cameras_path, "background must be an RGB triple")
    dataset = Dataset(
        root=root,
        rig=rig,
        frames=frames,
        poses=poses,
        background=background,
        keypoints=keypoints,
        cameras=cameras,
    )
    logger.info(
        f"Loaded dataset {root}: {len(dataset.train_frames)} train / {len(dataset.test_frames)} test frames, "
        f"{len(poses)} poses"
    )
    return dataset
