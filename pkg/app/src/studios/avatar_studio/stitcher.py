"""Gloss stitching.

A token sequence is resolved against a gloss library and the clips are joined with
transition segments: joint rotations are SLERPed at an eased parameter, expressions
are blended linearly, body shape comes from the first gloss and the global transform
is replaced by the average over every gloss frame.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from app.src.geometry.rotations import (
    average_quaternions,
    euler_to_quaternion,
    quaternion_angle,
    quaternion_to_euler,
)
from app.src.models.body_model import PoseParams, SkinnedTemplate, clamp_pose
from app.src.models.rig_io import load_rig
from app.src.training.dataset import RIG_FILE
from app.src.roles.stage import BaseStage
from app.src.schemas.base import AnimationRecord, GlossDictionary
from app.src.schemas.config import StitchConfig, StudioConfig

logger = logging.getLogger(__name__)

DICTIONARY_FILE: str = "dictionary.json"
GLOSS_DIR: str = "glosses"
ANIMATION_FILE: str = "animation.json"
LERP_THRESHOLD: float = 1e-6
MIN_QUATERNION_NORM: float = 1e-12
# Guards ceil() against quotients such as 0.5 / 0.05 landing a hair above an integer.
CEIL_TOLERANCE: float = 1e-9

TokenPreprocessor = Callable[[List[str]], List[str]]


@dataclass
class Gloss:
    name: str
    frames: List[PoseParams]
    fps: float = 25.0

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError(f"gloss '{self.name}' has no frames")


@dataclass
class Animation:
    frames: List[PoseParams]
    fps: float = 25.0
    name: Optional[str] = None
    skipped_tokens: List[str] = field(default_factory=list)
    transitions: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def ease(t: float) -> float:
    """Cubic ease-in/ease-out, s(t) = 3t^2 - 2t^3."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"ease expects t in [0, 1], got {t}")
    return 3.0 * t * t - 2.0 * t * t * t


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    """Spherical interpolation of (..., 4) wxyz quaternions along the shorter arc.

    Inputs are normalized first; nearly parallel pairs fall back to normalized lerp.

    Raises:
        ValueError: If any quaternion has (near) zero norm.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    n0 = np.linalg.norm(q0, axis=-1, keepdims=True)
    n1 = np.linalg.norm(q1, axis=-1, keepdims=True)
    if np.any(n0 < MIN_QUATERNION_NORM) or np.any(n1 < MIN_QUATERNION_NORM):
        raise ValueError("slerp received a zero quaternion")
    q0 = q0 / n0
    q1 = q1 / n1
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)

    angle = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_angle = np.sin(angle)
    near = dot > 1.0 - LERP_THRESHOLD
    safe_sin = np.where(near, 1.0, sin_angle)
    w0 = np.where(near, 1.0 - s, np.sin((1.0 - s) * angle) / safe_sin)
    w1 = np.where(near, s, np.sin(s * angle) / safe_sin)
    out = w0 * q0 + w1 * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def joint_quaternions(pose: PoseParams) -> np.ndarray:
    return euler_to_quaternion(pose.theta.detach().cpu().numpy())


def max_joint_angle(last: PoseParams, first: PoseParams) -> float:
    """Largest geodesic rotation angle between corresponding joints of two poses."""
    if last.theta.shape != first.theta.shape:
        raise ValueError(f"pose shapes differ: {tuple(last.theta.shape)} vs {tuple(first.theta.shape)}")
    angles = quaternion_angle(joint_quaternions(last), joint_quaternions(first))
    return float(np.max(angles)) if angles.size else 0.0


def transition_frames(last: PoseParams, first: PoseParams, cfg: StitchConfig = StitchConfig()) -> int:
    """n = max(min_frames, ceil(delta / omega))."""
    delta: float = max_joint_angle(last, first)
    return max(cfg.min_frames, math.ceil(delta / cfg.omega - CEIL_TOLERANCE))


def transition_pose(
    last: PoseParams,
    first: PoseParams,
    t: float,
    template: Optional[SkinnedTemplate] = None,
) -> PoseParams:
    """The in-between pose at time t in [0, 1] from `last` to `first`.

    Joint rotations follow SLERP at ease(t); expressions are blended linearly at t.
    Shape and global transform are taken from `last`. With a template, the Euler
    angles recovered from the SLERPed quaternions are clamped to its joint limits.
    """
    s: float = ease(t)
    quats = slerp(joint_quaternions(last), joint_quaternions(first), s)
    dtype: torch.dtype = last.theta.dtype
    theta = torch.as_tensor(quaternion_to_euler(quats), dtype=dtype)
    psi = (1.0 - t) * last.psi.detach() + t * first.psi.detach().to(dtype)
    pose = replace(last.clone(), theta=theta, psi=psi)
    return clamp_pose(template, pose) if template is not None else pose


def transition(
    last: PoseParams,
    first: PoseParams,
    cfg: StitchConfig = StitchConfig(),
    template: Optional[SkinnedTemplate] = None,
) -> List[PoseParams]:
    """The n in-between frames, at t = j / (n + 1) for j = 1..n.

    The clip boundary frames are not repeated, so no emitted frame sits at t = 0.5
    when n is even: a 90 degree turn over 32 frames straddles 45 degrees with frames
    16 and 17, symmetric about it.
    """
    n: int = transition_frames(last, first, cfg)
    return [transition_pose(last, first, j / (n + 1), template) for j in range(1, n + 1)]


class GlossLibrary:
    """A gloss store directory: `<gloss>.json` clips plus a token dictionary.

    Attributes:
        root (Path): The store directory.
        dictionary (Dict[str, str]): Lowercase token -> gloss file name.
    """

    def __init__(self, root: str | Path, dictionary: Dict[str, str], dtype: Optional[torch.dtype] = None):
        self.root: Path = Path(root)
        self.dictionary: Dict[str, str] = {token.lower(): name for token, name in dictionary.items()}
        self.dtype: torch.dtype = dtype or torch.get_default_dtype()
        self._cache: Dict[str, Gloss] = {}
        missing: List[str] = sorted({name for name in self.dictionary.values() if not (self.root / name).is_file()})
        if missing:
            raise ValueError(f"gloss library {self.root} maps tokens to missing files: {', '.join(missing)}")

    @classmethod
    def from_dir(cls, root: str | Path, dtype: Optional[torch.dtype] = None) -> "GlossLibrary":
        root = Path(root)
        path: Path = root / DICTIONARY_FILE
        if not path.is_file():
            raise ValueError(f"{path}: gloss dictionary is missing")
        try:
            record = GlossDictionary.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ValueError(f"{path}: {e}") from e
        return cls(root, record.entries, dtype=dtype)

    def resolve(self, token: str) -> Optional[str]:
        return self.dictionary.get(token.lower())

    def load(self, name: str) -> Gloss:
        if name not in self._cache:
            animation = import_animation(self.root / name, dtype=self.dtype)
            self._cache[name] = Gloss(name=Path(name).stem, frames=animation.frames, fps=animation.fps)
        return self._cache[name]


def identity_preprocess(tokens: List[str]) -> List[str]:
    return tokens


def fixed_global_transform(glosses: Sequence[Gloss]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Average global rotation (chordal mean) and translation over every gloss frame."""
    frames: List[PoseParams] = [f for g in glosses for f in g.frames]
    rotations = np.stack([f.global_rot.detach().cpu().numpy() for f in frames])
    translations = np.stack([f.global_trans.detach().cpu().numpy() for f in frames])
    dtype: torch.dtype = frames[0].global_rot.dtype
    rotation = torch.as_tensor(average_quaternions(rotations), dtype=dtype)
    translation = torch.as_tensor(translations.astype(np.float64).mean(axis=0), dtype=dtype)
    return rotation, translation


def stitch(
    tokens: Sequence[str],
    lib: GlossLibrary,
    cfg: StitchConfig = StitchConfig(),
    preprocess: Optional[TokenPreprocessor] = None,
    template: Optional[SkinnedTemplate] = None,
) -> Animation:
    """Concatenates the glosses of `tokens` with eased transitions in between.

    Args:
        tokens (Sequence[str]): Words or gloss names, looked up case-insensitively.
        lib (GlossLibrary): The gloss store.
        cfg (StitchConfig): Angular speed per transition frame, minimum transition
            length and output frame rate.
        preprocess (Optional[TokenPreprocessor]): Token rewriting (reordering, tagging)
            applied before lookup. Identity when None.
        template (Optional[SkinnedTemplate]): Rig whose joint limits clamp the
            transition frames. Unclamped when None.

    Returns:
        Animation: sum(gloss frames) + sum(transition frames) poses with one global
        transform and the shape of the first gloss.

    Raises:
        ValueError: If no token resolves to a gloss.
    """
    words: List[str] = (preprocess or identity_preprocess)(list(tokens))
    glosses: List[Gloss] = []
    skipped: List[str] = []
    for token in words:
        name: Optional[str] = lib.resolve(token)
        if name is None:
            skipped.append(token)
            continue
        glosses.append(lib.load(name))
    if skipped:
        logger.warning(f"Skipped {len(skipped)} unresolved tokens: {', '.join(skipped)}")
    if not glosses:
        raise ValueError("none of the tokens resolves to a gloss")
    for gloss in glosses:
        if gloss.fps != cfg.fps:
            logger.warning(f"Gloss '{gloss.name}' is {gloss.fps} fps, output is {cfg.fps} fps; frames are not resampled")

    rotation, translation = fixed_global_transform(glosses)
    beta = glosses[0].frames[0].beta.detach().clone()

    frames: List[PoseParams] = []
    transitions: List[int] = []
    for index, gloss in enumerate(glosses):
        if index > 0:
            between = transition(glosses[index - 1].frames[-1], gloss.frames[0], cfg, template)
            transitions.append(len(between))
            frames.extend(between)
        frames.extend(f.clone() for f in gloss.frames)

    frames = [
        replace(f, beta=beta.clone(), global_rot=rotation.clone(), global_trans=translation.clone()) for f in frames
    ]
    logger.info(
        f"Stitched {len(glosses)} glosses into {len(frames)} frames "
        f"({sum(transitions)} transition frames)"
    )
    return Animation(
        frames=frames,
        fps=cfg.fps,
        name="_".join(g.name for g in glosses),
        skipped_tokens=skipped,
        transitions=transitions,
    )


def export_animation(animation: Animation, path: str | Path) -> Path:
    """Writes an animation JSON file (the gloss clip schema).

    Raises:
        ValueError: On an empty animation.
        OSError: If the path is not writable.
    """
    if not animation.frames:
        raise ValueError("cannot export an empty animation")
    path = Path(path)
    record = AnimationRecord(
        name=animation.name,
        fps=animation.fps,
        n_frames=len(animation.frames),
        frames=[f.to_record(frame_id=i) for i, f in enumerate(animation.frames)],
        skipped_tokens=animation.skipped_tokens,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(record.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote {len(animation.frames)} frames to {path}")
    return path


def import_animation(path: str | Path, dtype: Optional[torch.dtype] = None) -> Animation:
    path = Path(path)
    try:
        record = AnimationRecord.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ValueError(f"{path}: {e}") from e
    if record.n_frames != len(record.frames):
        raise ValueError(f"{path}: declares {record.n_frames} frames but holds {len(record.frames)}")
    return Animation(
        frames=[PoseParams.from_record(r, dtype=dtype) for r in record.frames],
        fps=record.fps,
        name=record.name,
        skipped_tokens=list(record.skipped_tokens),
    )


class Stitcher(BaseStage):
    """Turns a token sequence into an animation file."""

    def __init__(
        self,
        config: Optional[StudioConfig] = None,
        name: Optional[str] = None,
        preprocess: Optional[TokenPreprocessor] = None,
    ):
        super().__init__(config=config, name=name)
        self.preprocess: TokenPreprocessor = preprocess or identity_preprocess

    def _run(self, *args, **kwargs) -> Animation:
        tokens: List[str] = self._require(kwargs, "tokens", list)
        gloss_dir = Path(kwargs.get("gloss_dir") or Path(self.config.paths.dataset) / GLOSS_DIR)
        output = Path(kwargs.get("output") or Path(self.config.paths.output) / ANIMATION_FILE)
        library = GlossLibrary.from_dir(gloss_dir)
        # A gloss store inside a dataset directory shares that dataset's rig.
        rig_path = Path(kwargs.get("rig") or gloss_dir.parent / RIG_FILE)
        template: Optional[SkinnedTemplate] = None
        if rig_path.is_file():
            template = load_rig(rig_path, dtype=library.dtype)
        else:
            self.logger.warning(f"No rig at {rig_path}; transition frames are not clamped to joint limits")
        animation: Animation = stitch(
            tokens, library, self.config.stitch, preprocess=self.preprocess, template=template
        )
        if animation.skipped_tokens:
            self.logger.warning(f"Tokens without a gloss: {', '.join(animation.skipped_tokens)}")
        export_animation(animation, output)
        self.logger.info(f"Animation of {len(animation)} frames written to {output}")
        return animation
