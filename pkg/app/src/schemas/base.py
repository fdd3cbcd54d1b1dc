from datetime import datetime
from enum import StrEnum
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator


class Segment(StrEnum):
    BODY = "body"
    HEAD = "head"
    LEFT_HAND = "left_hand"
    RIGHT_HAND = "right_hand"

    @property
    def code(self) -> int:
        return SEGMENT_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> "Segment":
        return SEGMENT_ORDER[code]

    @property
    def is_hand(self) -> bool:
        return self in (Segment.LEFT_HAND, Segment.RIGHT_HAND)


# Integer codes used in tensors follow this order.
SEGMENT_ORDER: List[Segment] = [
    Segment.BODY,
    Segment.HEAD,
    Segment.LEFT_HAND,
    Segment.RIGHT_HAND,
]


class SplatOrigin(StrEnum):
    ORIGINAL_VERTEX = "original_vertex"
    DENSIFIED = "densified"


class DatasetSplit(StrEnum):
    TRAIN = "train"
    TEST = "test"


class CommandName(StrEnum):
    TRAIN = "train"
    RENDER = "render"
    EVAL = "eval"
    FIT2D = "fit2d"
    STITCH = "stitch"
    MAKE_SYNTHETIC = "make-synthetic"


class PoseRecord(BaseModel):
    """JSON form of one pose. theta holds per-joint Euler XYZ angles in radians,
    global_rot a wxyz quaternion."""

    frame_id: Optional[int] = None
    beta: List[float] = Field(default_factory=list)
    psi: List[float] = Field(default_factory=list)
    theta: List[List[float]]
    global_rot: List[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0])
    global_trans: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])

    @field_validator("theta")
    @classmethod
    def _three_angles_per_joint(cls, value: List[List[float]]) -> List[List[float]]:
        for row in value:
            if len(row) != 3:
                raise ValueError("every theta row must hold 3 Euler angles")
        return value

    @field_validator("global_rot")
    @classmethod
    def _quaternion_length(cls, value: List[float]) -> List[float]:
        if len(value) != 4:
            raise ValueError("global_rot must be a wxyz quaternion")
        return value

    @field_validator("global_trans")
    @classmethod
    def _translation_length(cls, value: List[float]) -> List[float]:
        if len(value) != 3:
            raise ValueError("global_trans must hold 3 values")
        return value


class PoseFile(BaseModel):
    poses: List[PoseRecord]


class CameraRecord(BaseModel):
    frame_id: Optional[int] = None
    camera_id: int = 0
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    world_to_cam: List[List[float]]
    near: float = 0.01
    split: DatasetSplit = DatasetSplit.TRAIN

    @field_validator("world_to_cam")
    @classmethod
    def _four_by_four(cls, value: List[List[float]]) -> List[List[float]]:
        if len(value) != 4 or any(len(row) != 4 for row in value):
            raise ValueError("world_to_cam must be a 4x4 matrix")
        return value


class CameraSet(BaseModel):
    background: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    cameras: List[CameraRecord]


class KeypointFrame(BaseModel):
    """Per-joint [x, y, confidence] rows in rig joint order. A confidence of 0 masks
    the joint."""

    frame_id: int
    camera_id: int = 0
    keypoints: List[List[float]]

    @field_validator("keypoints")
    @classmethod
    def _xyc_rows(cls, value: List[List[float]]) -> List[List[float]]:
        for row in value:
            if len(row) != 3:
                raise ValueError("keypoint rows must be [x, y, confidence]")
            if not 0.0 <= row[2] <= 1.0:
                raise ValueError("keypoint confidence must lie in [0, 1]")
        return value


class KeypointFile(BaseModel):
    frames: List[KeypointFrame]


class AnimationRecord(BaseModel):
    """Shared schema of gloss clips and exported animations."""

    name: Optional[str] = None
    fps: float = Field(default=25.0, gt=0)
    n_frames: int = Field(ge=1)
    frames: List[PoseRecord]
    skipped_tokens: List[str] = Field(default_factory=list)

    @field_validator("frames")
    @classmethod
    def _non_empty(cls, value: List[PoseRecord]) -> List[PoseRecord]:
        if not value:
            raise ValueError("an animation needs at least one frame")
        return value


class GlossDictionary(BaseModel):
    """token -> gloss file name (relative to the gloss store)."""

    entries: Dict[str, str]


JointLimitValue = Union[Literal["locked"], List[float]]


class RigRecord(BaseModel):
    """Single-file rig container. Per-vertex arrays are row-major lists."""

    name: str = "rig"
    rest_vertices: List[List[float]]
    faces: List[List[int]]
    joint_names: List[str]
    joints: List[List[float]]
    parents: List[Optional[int]]
    joint_segments: List[Segment]
    skin_weights: List[Dict[int, float]]
    shape_basis: List[List[List[float]]] = Field(default_factory=list)
    expression_basis: List[List[List[float]]] = Field(default_factory=list)
    segment: List[Segment]
    joint_limits: Dict[str, List[JointLimitValue]] = Field(default_factory=dict)
    n_original_vertices: Optional[int] = None


class LossReport(BaseModel):
    l1: float
    dssim: float
    variance: float = 0.0
    displacement: float = 0.0
    total: float
    psnr: Optional[float] = None
    ssim: Optional[float] = None


class FrameMetrics(BaseModel):
    frame_id: int
    psnr: float
    ssim: float


class EvalReport(BaseModel):
    frames: List[FrameMetrics]
    mean_psnr: float
    mean_ssim: float
    created_at: datetime = Field(default_factory=datetime.now)


class CheckpointMeta(BaseModel):
    schema_version: int = 1
    iteration: int = Field(ge=0)
    active_sh_degree: int = Field(ge=0, le=3)
    n_splats: int = Field(ge=0)
    dtype: Literal["float32", "float64"] = "float32"
    pose_frame_ids: List[int] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)


class WeightSection(BaseModel):
    """One named tensor in the weights file payload."""

    name: str
    dtype: Literal["float32", "float64", "int64"]
    shape: List[int]
    offset: int = Field(ge=0)
    nbytes: int = Field(ge=0)
