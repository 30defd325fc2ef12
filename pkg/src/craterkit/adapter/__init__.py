"""LoRA-adapted toy attention detector and its training loop."""
from .attention import ToyAttentionBlock, attention_forward, softmax
from .detector import ToyDetector, toy_forward
from .gradcheck import NumericalError, grad_check
from .lora import AdapterError, LoraLayer, lora_forward
from .scenes import Scene, make_anchor, make_scenes
from .training import (
    ConfigError,
    ToyTrainConfig,
    TrainingDivergedError,
    TrajectoryRow,
    batch_loss_and_grads,
    build_detector,
    make_check_functions,
    parse_config,
    render_config,
    toy_train,
    trajectory_csv,
)

__all__ = [
    "AdapterError",
    "ConfigError",
    "LoraLayer",
    "NumericalError",
    "Scene",
    "ToyAttentionBlock",
    "ToyDetector",
    "ToyTrainConfig",
    "TrainingDivergedError",
    "TrajectoryRow",
    "attention_forward",
    "batch_loss_and_grads",
    "build_detector",
    "grad_check",
    "lora_forward",
    "make_anchor",
    "make_check_functions",
    "make_scenes",
    "parse_config",
    "render_config",
    "softmax",
    "toy_forward",
    "toy_train",
    "trajectory_csv",
]
