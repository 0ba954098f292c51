import os
import re
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from concurrent_log_handler import ConcurrentRotatingFileHandler

from config import SEED_ENV_VAR, LOG_LEVEL, LOG_FILE, validate_seed

logger = logging.getLogger('open_sora_kit.utils')

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level=LOG_LEVEL, log_file=LOG_FILE):
    """Configure console logging and, optionally, a shared rotating log file."""
    logging.basicConfig(level=level, format=LOG_FORMAT)
    if log_file:
        root = logging.getLogger()
        if not any(isinstance(h, ConcurrentRotatingFileHandler) for h in root.handlers):
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            handler = ConcurrentRotatingFileHandler(log_file, maxBytes=5 * 1024 * 1024, backupCount=3)
            handler.setFormatter(logging.Formatter(LOG_FORMAT))
            root.addHandler(handler)
    return logging.getLogger('open_sora_kit')


def resolve_seed(config_seed):
    """Return the seed to use: OPEN_SORA_KIT_SEED wins over the config value."""
    env_value = os.getenv(SEED_ENV_VAR, "").strip()
    if env_value:
        try:
            seed = int(env_value)
        except ValueError:
            logger.warning(f"Ignoring non-integer {SEED_ENV_VAR}={env_value!r}")
            return config_seed
        if validate_seed(seed):
            return seed
        logger.warning(f"Ignoring negative {SEED_ENV_VAR}={env_value!r}")
    return config_seed


def format_number(value):
    """Render a float with the fewest decimals that still round-trip (5.5 -> "5.5", 10.0 -> "10")."""
    text = repr(float(value))
    if text.endswith(".0"):
        text = text[:-2]
    return text


def smooth(values, window):
    """Trailing moving average; the first entries average over what is available."""
    series = pd.Series(np.asarray(values, dtype=np.float64))
    return series.rolling(window=max(1, int(window)), min_periods=1).mean().to_numpy()


def ensure_dir(path):
    """Create a directory (and parents) if needed and return it as a Path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def slugify(text):
    """Create a filename-friendly slug from text."""
    # Convert to lowercase
    text = text.lower()
    # Replace spaces with hyphens
    text = re.sub(r'\s+', '-', text)
    # Remove special characters
    text = re.sub(r'[^a-z0-9\-]', '', text)
    # Remove duplicate hyphens
    text = re.sub(r'-+', '-', text)
    # Remove leading/trailing hyphens
    text = text.strip('-')
    return text
