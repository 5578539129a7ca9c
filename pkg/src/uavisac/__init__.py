"""Multi-UAV cooperative ISAC simulator with a curriculum-guided HAPPO trainer."""

from .config import EnvConfig, GaConfig, TrainerConfig
from .env import IsacEnv, JointAction

__all__ = ["EnvConfig", "GaConfig", "IsacEnv", "JointAction", "TrainerConfig"]
__version__ = "0.1.0"
