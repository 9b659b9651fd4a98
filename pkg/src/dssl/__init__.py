"""Surroundings-person separation learning for text-based person retrieval."""

from .config import ConfigError, RunConfig, resolve_config
from .encoders import ValidationError
from .model import DSSL

__all__ = ["ConfigError", "DSSL", "RunConfig", "ValidationError", "resolve_config"]
__version__ = "0.1.0"
