"""Input-adaptive multi-task vision transformer at desk scale."""
from .encoder import EncoderConfig
from .heads import TaskSpec, default_tasks
from .losses import PRESETS, EfficiencyTargets
from .model import AdaMTL
from .policy import PolicyConfig
from .training import TrainPlan

__all__ = ["AdaMTL", "EfficiencyTargets", "EncoderConfig", "PRESETS", "PolicyConfig", "TaskSpec", "TrainPlan",
           "default_tasks"]
__version__ = "0.1.0"
