"""Few-shot image classification with a transformation-decoding regularizer."""

__version__ = "0.1.0"

from .data import (
    ImageDataset,
    SyntheticShapesConfig,
    augment,
    generate_synthetic,
    load_image_folder,
    sample_k_shot,
)
from .evaluation import (
    EpisodeProtocol,
    EvalReport,
    evaluate_setting,
    run_episodes,
    sample_episode,
    topk_accuracy,
)
from .model import EncoderConfig, FlatModel, load_checkpoint, save_checkpoint
from .optim import SgdState, lr_at_epoch, sgd_step
from .tensor import Tensor, no_grad
from .training import FinetuneConfig, PretrainConfig, finetune, pretrain, pretrain_step
from .transforms import (
    Homography,
    ProjectiveTransform,
    corners_to_homography,
    sample_transform,
    transform_target,
    warp_image,
)

__all__ = [
    "EncoderConfig",
    "EpisodeProtocol",
    "EvalReport",
    "FinetuneConfig",
    "FlatModel",
    "Homography",
    "ImageDataset",
    "PretrainConfig",
    "ProjectiveTransform",
    "SgdState",
    "SyntheticShapesConfig",
    "Tensor",
    "augment",
    "corners_to_homography",
    "evaluate_setting",
    "finetune",
    "generate_synthetic",
    "load_checkpoint",
    "load_image_folder",
    "lr_at_epoch",
    "no_grad",
    "pretrain",
    "pretrain_step",
    "run_episodes",
    "sample_episode",
    "sample_k_shot",
    "sample_transform",
    "save_checkpoint",
    "sgd_step",
    "topk_accuracy",
    "transform_target",
    "warp_image",
]
