"""
Runtime configuration for gpsubspace
Values come from explicit arguments first, then the environment (optionally a .env file)
"""

import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

from error_handler import InputError


@dataclass(frozen=True)
class Settings:
    num_threads: int = 1
    log_level: str = "INFO"
    log_file: Optional[str] = None


def _parse_threads(raw: Optional[str]) -> int:
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise InputError(f"GPS_NUM_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise InputError(f"GPS_NUM_THREADS must be at least 1, got {value}")
    return value


def load_settings(num_threads: Optional[int] = None, log_level: Optional[str] = None,
                  log_file: Optional[str] = None, dotenv_path: Optional[str] = None) -> Settings:
    """
    Build the settings, falling back to environment variables

    Parameters:
    -----------
    num_threads : int, optional
        Worker cap; overrides GPS_NUM_THREADS
    log_level : str, optional
        Logging level; overrides GPS_LOG_LEVEL
    log_file : str, optional
        Log file path; overrides GPS_LOG_FILE
    dotenv_path : str, optional
        Explicit .env file; the default search is used otherwise

    Returns:
    --------
    Settings
        Resolved configuration
    """
    load_dotenv(dotenv_path=dotenv_path)

    if num_threads is None:
        threads = _parse_threads(os.environ.get("GPS_NUM_THREADS"))
    else:
        threads = _parse_threads(str(num_threads))

    return Settings(
        num_threads=threads,
        log_level=log_level or os.environ.get("GPS_LOG_LEVEL", "INFO"),
        log_file=log_file or os.environ.get("GPS_LOG_FILE") or None
    )


def resolve_num_threads(num_threads: Optional[int] = None) -> int:
    """Worker count for a library call: explicit value, else GPS_NUM_THREADS, else 1"""
    if num_threads is not None:
        return _parse_threads(str(num_threads))
    return _parse_threads(os.environ.get("GPS_NUM_THREADS"))
