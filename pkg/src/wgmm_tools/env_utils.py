# src/wgmm_tools/env_utils.py

import logging
import os
from typing import Optional
from dotenv import load_dotenv

OUTPUT_DIR_VAR = "WGMM_OUTPUT_DIR"
LOG_LEVEL_VAR = "WGMM_LOG_LEVEL"
DEFAULT_OUTPUT_DIR = "outputs"


def load_project_env(caller_file_path: str) -> None:
    """
    Loads the project .env (one level above the caller's directory), then the
    .env next to the caller. Local values override project values; variables
    already set in the process environment are kept over the project file.

    Args:
        caller_file_path (str): path of the calling script (i.e. __file__).
    """
    caller_dir = os.path.dirname(os.path.abspath(caller_file_path))
    project_env = os.path.join(caller_dir, "..", ".env")
    local_env = os.path.join(caller_dir, ".env")

    if os.path.exists(project_env):
        load_dotenv(dotenv_path=project_env, verbose=False)
    if os.path.exists(local_env):
        load_dotenv(dotenv_path=local_env, override=True, verbose=False)


def resolve_output_dir(cli_value: Optional[str] = None) -> str:
    """--out flag, then WGMM_OUTPUT_DIR, then ./outputs."""
    return cli_value or os.environ.get(OUTPUT_DIR_VAR) or DEFAULT_OUTPUT_DIR


def default_log_level() -> str:
    level = os.environ.get(LOG_LEVEL_VAR, "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        logging.warning(f"Ignoring {LOG_LEVEL_VAR}={level}: not a logging level")
        return "INFO"
    return level
