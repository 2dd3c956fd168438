import os
import logging
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_WORKERS = 1
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_OUTPUT_DIR = "./output"
DEFAULT_GRID_NODES = 401
DEFAULT_NU_NODES = 201
DEFAULT_ROLLOUT_PATHS = 256


@dataclass(frozen=True)
class Settings:
    workers: int = DEFAULT_WORKERS
    log_level: str = DEFAULT_LOG_LEVEL
    output_dir: str = DEFAULT_OUTPUT_DIR
    grid_nodes: int = DEFAULT_GRID_NODES
    nu_nodes: int = DEFAULT_NU_NODES
    rollout_paths: int = DEFAULT_ROLLOUT_PATHS


def _int_env(name: str, default: int, odd: bool = False) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Ignoring {name}={raw!r}: not an integer, using {default}")
        return default
    if value < 1 or (odd and value % 2 == 0):
        logger.warning(f"Ignoring {name}={raw!r}: out of range, using {default}")
        return default
    return value


def get_settings() -> Settings:
    """Read settings from the environment (after loading a local .env file)."""
    return Settings(
        workers=_int_env("VOI_WORKERS", DEFAULT_WORKERS),
        log_level=os.getenv("VOI_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper(),
        output_dir=os.getenv("VOI_OUTPUT_DIR", DEFAULT_OUTPUT_DIR),
        grid_nodes=_int_env("VOI_DP_GRID_NODES", DEFAULT_GRID_NODES, odd=True),
        nu_nodes=_int_env("VOI_DP_NU_NODES", DEFAULT_NU_NODES, odd=True),
        rollout_paths=_int_env("VOI_ROLLOUT_PATHS", DEFAULT_ROLLOUT_PATHS),
    )
