"""A small numpy thinker/talker model that emits text and multi-codebook audio codes together."""

from .config import ModelConfig, full_config, toy_config
from .model import OmniModel

__all__ = ["ModelConfig", "OmniModel", "full_config", "toy_config"]
__version__ = "0.1.0"
