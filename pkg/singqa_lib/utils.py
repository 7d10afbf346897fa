import os
import logging

logger = logging.getLogger(__name__)


def env_positive_int(name: str, default: int) -> int:
    """Read a positive integer from the environment, falling back to default (with a warning) on bad values."""

    raw = os.environ.get(name)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        logger.warning('Ignoring %s=%r (expected a positive integer); using %d', name, raw, default)
        return default
    return value
