import logging
from typing import Optional
import config

def setup_logging(log_file: Optional[str] = None, log_level: Optional[str] = None) -> logging.Logger:
    """
    Configures the root logger using settings from config.
    An explicit log_file/log_level (e.g. from the command line) wins over the environment.
    Returns the configured logger.
    """
    # Resolve log level from string to numeric level (default to INFO if not recognized)
    level_name = (log_level or config.LOG_LEVEL).upper()
    level = getattr(logging, level_name, logging.INFO)

    logger = logging.getLogger()
    logger.setLevel(level)

    # Clear any pre-existing handlers.
    if logger.hasHandlers():
        logger.handlers.clear()

    formatter = logging.Formatter('%(asctime)s %(levelname)s: %(message)s')

    # File handler keeps per-keyframe debug output; an empty path disables it.
    path = config.LOG_FILE if log_file is None else log_file
    if path:
        file_handler = logging.FileHandler(path)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(max(level, logging.INFO))
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger
