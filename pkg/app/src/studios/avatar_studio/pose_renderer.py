import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import torch
from pydantic import ValidationError

from app.src.models.body_model import PoseParams
from app.src.models.checkpoint import Checkpoint, load_checkpoint
from app.src.rendering.camera import Camera
from app.src.rendering.image_io import write_png
from app.src.rendering.rasterizer import RenderSettings
from app.src.roles.stage import BaseStage
from app.src.schemas.base import CameraSet, PoseFile
from app.src.schemas.config import StudioConfig
from app.src.studios.avatar_studio.stitcher import import_animation
from app.src.studios.avatar_studio.trainer import TORCH_DTYPES, pose_bank_from_checkpoint, render_frame
from app.src.training.dataset import load_dataset

logger = logging.getLogger(__name__)

RENDER_DIR: str = "renders"


@dataclass
class RenderJob:
    """Poses and cameras to render; a single camera is shared by every pose."""

    poses: List[PoseParams]
    cameras: List[Camera]
    background: torch.Tensor

    def __post_init__(self) -> None:
        if not self.poses:
            raise ValueError("nothing to render: no poses")
        if len(self.cameras) not in (1, len(self.poses)):
            raise ValueError(
                f"{len(self.poses)} frames but {len(self.cameras)} cameras; give one camera or one per frame"
            )

    def camera(self, index: int) -> Camera:
        return self.cameras[0] if len(self.cameras) == 1 else self.cameras[index]


def read_poses(path: str | Path, dtype: torch.dtype) -> List[PoseParams]:
    """Reads either an animation file or a pose file."""
    path = Path(path)
    text: str = path.read_text(encoding="utf-8")
    try:
        records = PoseFile.model_validate_json(text).poses
    except ValidationError:
        return import_animation(path, dtype=dtype).frames
    return [PoseParams.from_record(r, dtype=dtype) for r in records]


def read_cameras(path: str | Path, dtype: torch.dtype) -> Tuple[List[Camera], torch.Tensor]:
    path = Path(path)
    try:
        camera_set = CameraSet.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ValueError(f"{path}: {e}") from e
    cameras = [Camera.from_record(r, dtype=dtype) for r in camera_set.cameras]
    return cameras, torch.tensor(camera_set.background, dtype=dtype)


def render_job(checkpoint: Checkpoint, job: RenderJob, settings: RenderSettings, outdir: str | Path) -> List[Path]:
    """Renders every pose of the job to `<outdir>/<index>.png`.

    Returns:
        List[Path]: The written frames in order.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    with torch.no_grad():
        for index, pose in enumerate(job.poses):
            output = render_frame(
                checkpoint.avatar,
                pose,
                job.camera(index),
                job.background,
                settings,
                checkpoint.meta.active_sh_degree,
            )
            if output.n_nonfinite:
                logger.warning(f"Frame {index}: skipped {output.n_nonfinite} non-finite splats")
            path = outdir / f"{index:04d}.png"
            write_png(output.image, path)
            written.append(path)
    return written


class PoseRenderer(BaseStage):
    """Renders a checkpoint for an animation or pose file seen through a camera file,
    or, without them, for every frame of the dataset."""

    def _run(self, *args, **kwargs) -> List[Path]:
        cfg: StudioConfig = self.config
        checkpoint_dir = kwargs.get("checkpoint") or cfg.paths.checkpoint
        if not checkpoint_dir:
            raise ValueError("a checkpoint path is required (paths.checkpoint or --checkpoint)")
        checkpoint = load_checkpoint(checkpoint_dir)
        dtype: torch.dtype = TORCH_DTYPES[checkpoint.meta.dtype]
        poses_path: Optional[str] = kwargs.get("poses")
        cameras_path: Optional[str] = kwargs.get("cameras")

        if poses_path:
            if not cameras_path:
                raise ValueError("rendering a pose file needs a camera file")
            cameras, background = read_cameras(cameras_path, dtype)
            job = RenderJob(poses=read_poses(poses_path, dtype), cameras=cameras, background=background)
        else:
            dataset = load_dataset(kwargs.get("dataset_dir") or cfg.paths.dataset, dtype=dtype, load_images=False)
            bank = pose_bank_from_checkpoint(checkpoint, dataset.poses)
            poses = [
                bank.pose(f.frame_id) if bank is not None and f.frame_id in bank else f.pose for f in dataset.frames
            ]
            job = RenderJob(poses=poses, cameras=[f.camera for f in dataset.frames], background=dataset.background)

        outdir = Path(kwargs.get("outdir") or Path(cfg.paths.output) / RENDER_DIR)
        written = render_job(checkpoint, job, RenderSettings.from_config(cfg.render), outdir)
        self.logger.info(f"Rendered {len(written)} frames to {outdir}")
        return written
