from typing import Dict, Optional

from app.src.roles.stage import BaseStage
from app.src.roles.studio import Studio
from app.src.schemas.base import CommandName
from app.src.schemas.config import StudioConfig

from .fit2d import PoseFitter
from .pose_renderer import PoseRenderer
from .stitcher import Stitcher, TokenPreprocessor
from .synthetic import SceneMaker
from .trainer import AvatarEvaluator, AvatarTrainer


class AvatarStudio(Studio):
    """
    The studio behind the command line: one stage per command, all sharing one config.
    """

    def __init__(
        self,
        config: Optional[StudioConfig] = None,
        name: str = "AvatarStudio",
        preprocess: Optional[TokenPreprocessor] = None,
    ):
        """Initializes AvatarStudio.

        Args:
            config (Optional[StudioConfig]): The validated config tree. Defaults apply when None.
            name (str): The name of the studio.
            preprocess (Optional[TokenPreprocessor]): Token rewriting for the stitcher.
        """
        config = config or StudioConfig()
        stages: Dict[CommandName, BaseStage] = {
            CommandName.TRAIN: AvatarTrainer(config=config),
            CommandName.EVAL: AvatarEvaluator(config=config),
            CommandName.RENDER: PoseRenderer(config=config),
            CommandName.FIT2D: PoseFitter(config=config),
            CommandName.STITCH: Stitcher(config=config, preprocess=preprocess),
            CommandName.MAKE_SYNTHETIC: SceneMaker(config=config),
        }
        super().__init__(name=name, config=config, stages=stages)
        self.logger.info(f"AvatarStudio '{self.name}' initialized with stages: {', '.join(self.stages)}.")
