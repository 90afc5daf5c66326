"""Pipeline configuration."""
import os
from typing import Dict, Tuple

from dotenv import load_dotenv

from src.utils.errors import ConfigError

load_dotenv()


def _env_float(name: str, default: float) -> float:
    return float(os.environ.get(name, default))


def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(name, default))


def _env_bool(name: str, default: bool) -> bool:
    return os.environ.get(name, str(default)).lower() == 'true'


class Config:
    """Base configuration."""

    # Hop2Token
    HOPS = _env_int('NAG_HOPS', 10)
    EIG_S = _env_int('NAG_EIG_S', 15)
    DENSE_EIG_MAX_N = _env_int('NAG_DENSE_EIG_MAX_N', 1024)

    # Model
    HIDDEN_DIM = _env_int('NAG_HIDDEN_DIM', 128)
    LAYERS = _env_int('NAG_LAYERS', 1)
    HEADS = _env_int('NAG_HEADS', 1)
    READOUT = os.environ.get('NAG_READOUT', 'attention')
    HEAD_HIDDEN = _env_bool('NAG_HEAD_HIDDEN', False)

    # Training (AdamW, lr 1e-4, wd 1e-3, batch 2000, 50 epochs)
    LR = _env_float('NAG_LR', 1e-4)
    WEIGHT_DECAY = _env_float('NAG_WEIGHT_DECAY', 1e-3)
    BATCH_SIZE = _env_int('NAG_BATCH_SIZE', 2000)
    MAX_EPOCHS = _env_int('NAG_MAX_EPOCHS', 50)
    PATIENCE = _env_int('NAG_PATIENCE', 50)
    SEED = _env_int('NAG_SEED', 0)
    SPLIT_FRACTIONS: Tuple[float, float, float] = (0.6, 0.2, 0.2)

    # Gradient check
    GRADCHECK_TOLERANCE = _env_float('NAG_GRADCHECK_TOLERANCE', 1e-4)

    # Logging
    LOG_LEVEL = os.environ.get('NAG_LOG_LEVEL', 'INFO')


class DevelopmentConfig(Config):
    """Development configuration."""
    LOG_LEVEL = 'DEBUG'


class ProductionConfig(Config):
    """Production configuration."""


class TestingConfig(Config):
    """Testing configuration."""
    HIDDEN_DIM = 16
    MAX_EPOCHS = 5
    PATIENCE = 5
    LOG_LEVEL = 'WARNING'


config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig
}


def get_config(name: str = None):
    """Pick a config class by name, falling back to NAG_ENV then default."""
    name = name or os.environ.get('NAG_ENV', 'default')
    return config.get(name, config['default'])


def parse_config_file(path: str, allowed_keys) -> Dict[str, str]:
    """Parse a ``key=value`` run-config file.

    Blank lines and ``#`` comments are skipped. Keys use the long flag name
    with ``-`` replaced by ``_``. Unknown keys and malformed lines raise
    ConfigError with the offending line number.
    """
    allowed = set(allowed_keys)
    values: Dict[str, str] = {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}")

    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"{path}, line {lineno}: expected key=value, got '{line}'")
        key, value = line.split('=', 1)
        key = key.strip().replace('-', '_')
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"{path}, line {lineno}: empty key or value")
        if key not in allowed:
            raise ConfigError(f"{path}, line {lineno}: unknown key '{key}'")
        values[key] = value
    return values
