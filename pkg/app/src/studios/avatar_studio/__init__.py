# This file makes the avatar_studio directory a Python package.

from .avatar_studio import AvatarStudio
from .fit2d import PoseFitter
from .pose_renderer import PoseRenderer
from .stitcher import Stitcher
from .synthetic import SceneMaker
from .trainer import AvatarEvaluator, AvatarTrainer

__all__: list[str] = [
    "AvatarStudio",
    "AvatarTrainer",
    "AvatarEvaluator",
    "PoseRenderer",
    "PoseFitter",
    "Stitcher",
    "SceneMaker",
]
