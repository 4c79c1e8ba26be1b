"""
Environment Configuration
Loads optional overrides from a .env file at the project root.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

env_path = Path(__file__).parent.parent / '.env'
load_dotenv(dotenv_path=env_path)


def _flag(value: Optional[str]) -> Optional[bool]:
    if value is None:
        return None
    return value.strip().lower() in ("1", "true", "yes", "on")


class EnvConfig:
    """Environment-provided defaults; CLI flags still take precedence."""

    OUT_DIR = os.getenv('NDF_OUT_DIR')
    LOG_LEVEL = os.getenv('NDF_LOG_LEVEL')
    LOG_JSON = _flag(os.getenv('NDF_LOG_JSON'))
    LOG_FILE = os.getenv('NDF_LOG_FILE')
    SEED = os.getenv('NDF_SEED')

    @classmethod
    def overrides(cls) -> Dict[str, Any]:
        """Dotted-key overrides for ``load_config`` from set variables only."""
        values: Dict[str, Any] = {}
        if cls.OUT_DIR:
            values["out_dir"] = cls.OUT_DIR
        if cls.LOG_LEVEL:
            values["log_level"] = cls.LOG_LEVEL
        if cls.LOG_JSON is not None:
            values["log_json"] = cls.LOG_JSON
        if cls.LOG_FILE:
            values["log_file"] = cls.LOG_FILE
        if cls.SEED:
            try:
                values["seed"] = int(cls.SEED)
            except ValueError:
                logger.warning(f"Ignoring non-integer NDF_SEED={cls.SEED!r}")
        return values
