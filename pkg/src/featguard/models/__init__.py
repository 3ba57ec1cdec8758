from .adapter import (
    ClassifierHandle,
    TapId,
    features,
    input_gradient,
    list_taps,
    logits,
)
from .training import (
    Checkpoint,
    accuracy,
    load_checkpoint,
    retrain_head,
    save_checkpoint,
    sha256_file,
    train_reference_model,
)
from .zoo import build, standard_arch

__all__ = [
    "Checkpoint",
    "ClassifierHandle",
    "TapId",
    "accuracy",
    "build",
    "features",
    "input_gradient",
    "list_taps",
    "load_checkpoint",
    "logits",
    "retrain_head",
    "save_checkpoint",
    "sha256_file",
    "standard_arch",
    "train_reference_model",
]
