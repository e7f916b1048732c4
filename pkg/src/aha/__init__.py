"""All-or-here attention: per-token, per-head routing between full and windowed attention."""
from .attention import AHAConfig, GateMatrix, aha_block, full_attention, sliding_window_attention
from .estimator import AHALanguageModel
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .tasks import MixConfig, TaskSample, mixed_stream, task_samples
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AHAConfig", "AHALanguageModel", "GateMatrix", "MixConfig", "ModelConfig", "TaskSample", "TrainConfig",
    "aha_block", "evaluate", "forward", "full_attention", "init_params", "load_checkpoint", "mixed_stream",
    "save_checkpoint", "sliding_window_attention", "task_samples", "train",
]
