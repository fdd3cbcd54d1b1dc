import abc
import logging
from typing import Any, Optional

from app.src.schemas.config import StudioConfig


class BaseStage(abc.ABC):
    """
    Master abstract class for the steps of the avatar studio (training, evaluation,
    fitting, stitching, scene generation, rendering).
    Handles logging. Name defaults to subclass name.
    Provides template run() that logs at start and end, delegating to _run().
    """

    def __init__(self, config: Optional[StudioConfig] = None, name: Optional[str] = None):
        """Initializes BaseStage.

        Args:
            config (Optional[StudioConfig]): The validated config tree. Defaults apply when None.
            name (Optional[str]): The name of the stage. Defaults to class name.
        """
        self.name: str = name or self.__class__.__name__
        self.config: StudioConfig = config or StudioConfig()

        self.logger: logging.Logger = logging.getLogger(self.name)
        self.logger.setLevel(logging.INFO)
        if not self.logger.hasHandlers():
            self.logger.addHandler(logging.NullHandler())
        self.logger.propagate = False

    def _require(self, kwargs: dict, key: str, expected: type) -> Any:
        """Fetches a keyword argument of the expected type or logs and raises ValueError."""
        value: Any = kwargs.get(key)
        if value is None or not isinstance(value, expected):
            self.logger.error(f"'{key}' argument of type {expected.__name__} must be provided to {self.name}")
            raise ValueError(f"'{key}' argument of type {expected.__name__} must be provided")
        return value

    @abc.abstractmethod
    def _run(self, *args: Any, **kwargs: Any) -> Any:
        """
        Abstract method that subclasses must implement to define their specific behavior.
        This method is called by the run() method.

        Raises:
            NotImplementedError: If the subclass does not implement this method.

        Returns:
            Any: The result of the stage.
        """
        raise NotImplementedError

    def run(self, *args: Any, **kwargs: Any) -> Any:
        """
        Runs the stage.

        Logs before and after calling _run. Input errors (ValueError) are logged at
        ERROR before they propagate. The handlers of self.logger are managed by the
        Studio for the duration of a command.

        Returns:
            Any: The result of the _run method.
        """
        self.logger.info(f"Starting execution for {self.name}.")
        try:
            result: Any = self._run(*args, **kwargs)
        except ValueError as e:
            self.logger.error(f"{self.name} rejected its input: {e}")
            raise
        self.logger.info(f"Finished execution for {self.name}.")
        return result
