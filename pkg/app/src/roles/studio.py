import logging
from datetime import datetime
from typing import Any, Dict, List, Optional

from app.src.roles.stage import BaseStage
from app.src.schemas.base import CommandName
from app.src.schemas.config import StudioConfig
from app.src.utils.logging_utils import (
    LIBRARY_LOGGER,
    console_handler,
    journal_handler,
    redirect_loggers_to_handler,
)


class Studio:
    """A studio dispatches commands to its stages.

    Every command runs with one journal: logs of the studio, of the stage and of the
    library modules (the `app.src` logger hierarchy) go to
    <journal_dir>/<command>_<run_id>.log, or to the console without a journal_dir.

    Attributes:
        name (str): The name of the studio.
        config (StudioConfig): The validated config tree shared by all stages.
        stages (Dict[CommandName, BaseStage]): The stage serving each command.
        logger (logging.Logger): The logger instance for this studio.
    """

    def __init__(self, name: str, config: StudioConfig, stages: Dict[CommandName, BaseStage]):
        self.name: str = name
        self.config: StudioConfig = config
        self.stages: Dict[CommandName, BaseStage] = stages

        self.logger: logging.Logger = logging.getLogger(self.name)
        self.logger.setLevel(logging.INFO)
        if not self.logger.hasHandlers():
            self.logger.addHandler(logging.NullHandler())
        self.logger.propagate = False

    @property
    def journal_dir(self) -> Optional[str]:
        return self.config.paths.journal_dir

    def stage(self, command: CommandName) -> BaseStage:
        if command not in self.stages:
            self.logger.error(f"Studio {self.name} has no stage for command '{command}'")
            raise ValueError(f"no stage registered for command '{command}'")
        return self.stages[command]

    def run(self, command: CommandName, run_id: Optional[str] = None, **kwargs: Any) -> Any:
        """Runs the stage of `command` with its logs routed to the run journal.

        Args:
            command (CommandName): The command to execute.
            run_id (Optional[str]): Journal suffix. Defaults to a timestamp.
            **kwargs: Passed to the stage's run().

        Returns:
            Any: The stage result.
        """
        stage: BaseStage = self.stage(command)
        run_id = run_id or datetime.now().strftime("%Y%m%d-%H%M%S")
        level: int = logging.getLevelName(self.config.logging.level.upper())
        if not isinstance(level, int):
            raise ValueError(f"unknown logging level '{self.config.logging.level}'")

        handler: logging.Handler
        if self.journal_dir:
            handler = journal_handler(self.journal_dir, f"{command.value}_{run_id}")
        else:
            handler = console_handler()

        loggers: List[logging.Logger] = [self.logger, stage.logger, logging.getLogger(LIBRARY_LOGGER)]
        try:
            with redirect_loggers_to_handler(loggers, handler, level):
                if not self.journal_dir:
                    self.logger.warning(
                        f"No journal_dir configured for Studio {self.name}. "
                        f"Logs for {command.value} run {run_id} go to the console."
                    )
                self.logger.info(f"Studio {self.name} received command: {command.value} ({run_id})")
                result: Any = stage.run(**kwargs)
                self.logger.info(f"Studio {self.name} finished command: {command.value} ({run_id})")
                return result
        finally:
            handler.close()
