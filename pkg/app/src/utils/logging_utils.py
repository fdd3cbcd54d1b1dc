import logging
import os
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional

JOURNAL_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LIBRARY_LOGGER: str = "app.src"


def journal_handler(journal_dir: str, run_name: str) -> logging.FileHandler:
    """Opens <journal_dir>/<run_name>.log in append mode with the journal format.

    Args:
        journal_dir (str): Directory for run journals; created when missing.
        run_name (str): File stem, usually "<command>_<run_id>".

    Returns:
        logging.FileHandler: The formatted handler. The caller closes it.
    """
    os.makedirs(journal_dir, exist_ok=True)
    handler: logging.FileHandler = logging.FileHandler(
        os.path.join(journal_dir, f"{run_name}.log"), mode="a", encoding="utf-8"
    )
    handler.setFormatter(logging.Formatter(JOURNAL_FORMAT))
    return handler


def console_handler() -> logging.StreamHandler:
    handler: logging.StreamHandler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(JOURNAL_FORMAT))
    return handler


@contextmanager
def redirect_loggers_to_handler(
    loggers: List[logging.Logger],
    target_handler: logging.Handler,
    level: Optional[int] = None,
) -> Iterator[None]:
    """Temporarily routes every logger in `loggers` to `target_handler` only.

    Handlers, propagation and (when `level` is given) the level of each logger are
    saved on entry and restored on exit, also when the block raises.

    Args:
        loggers (List[logging.Logger]): Stage loggers and the library logger.
        target_handler (logging.Handler): The run journal or console handler.
        level (Optional[int]): Level applied for the duration of the block.

    Yields:
        None: Control returns to the `with` block.
    """
    saved: Dict[logging.Logger, Dict[str, Any]] = {}
    try:
        for logger_instance in loggers:
            saved[logger_instance] = {
                "handlers": logger_instance.handlers[:],
                "propagate": logger_instance.propagate,
                "level": logger_instance.level,
            }
            for handler in logger_instance.handlers[:]:
                logger_instance.removeHandler(handler)
            logger_instance.addHandler(target_handler)
            logger_instance.propagate = False
            if level is not None:
                logger_instance.setLevel(level)
        yield
    finally:
        for logger_instance, state in saved.items():
            logger_instance.removeHandler(target_handler)
            for handler in state["handlers"]:
                logger_instance.addHandler(handler)
            logger_instance.propagate = state["propagate"]
            logger_instance.setLevel(state["level"])
