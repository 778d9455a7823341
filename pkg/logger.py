# logger.py
"""Root logger wiring driven by the manifest's ``logging`` section."""

import logging
from pathlib import Path
from typing import Literal

from config import LoggingSection, RunConfig, default_output_dir

LogLevel = Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

LOG_FILE_NAME = "fastvar.log"

# Never below WARNING, even for a DEBUG run: numba logs every compilation pass.
QUIET_LOGGERS: tuple[str, ...] = ("numba", "matplotlib", "PIL")


def resolve_log_file(settings: RunConfig | LoggingSection) -> Path:
    """``logging.file`` if set, else ``fastvar.log`` in the run's output directory."""
    if isinstance(settings, RunConfig):
        return Path(settings.log_file)
    if settings.file:
        return Path(settings.file)
    return Path(default_output_dir()) / LOG_FILE_NAME


def setup_logger(
    settings: RunConfig | LoggingSection | None = None,
    file_mode: Literal["w", "a"] = "w",
) -> logging.Logger:
    """
    Configure the root logger for a CLI run.

    Args:
        settings: A full run manifest, or just its logging section; None uses
            the LoggingSection defaults
        file_mode: 'w' to overwrite the file, 'a' to append

    Returns:
        The configured root logger
    """
    if settings is None:
        settings = LoggingSection()
    section = settings.logging if isinstance(settings, RunConfig) else settings
    log_path = resolve_log_file(settings)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    # LoggingSection has already upper-cased and checked the level name.
    numeric_level = logging.getLevelNamesMapping()[section.level]

    # force: repeated CLI invocations in one process (tests) need the new file.
    logging.basicConfig(
        level=numeric_level,
        format=section.format,
        filename=log_path,
        filemode=file_mode,
        force=True,
    )
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(numeric_level, logging.WARNING))
    return logging.getLogger()


def log(message: str, level: LogLevel = "DEBUG") -> None:
    """Log a message at the given level name."""
    match level.upper():
        case "INFO":
            logging.info(message)
        case "WARNING":
            logging.warning(message)
        case "ERROR":
            logging.error(message)
        case "CRITICAL":
            logging.critical(message)
        case _:
            logging.debug(message)
