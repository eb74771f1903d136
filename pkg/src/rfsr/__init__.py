"""Timestep-gated reward-feedback fine-tuning for diffusion-based image
super-resolution: low-frequency wavelet constraints in early denoising,
reward feedback plus Gram-matrix style regularization in late denoising,
with the trainer, data pipeline, trajectory analyzer, and evaluation
harness needed to run and verify it."""

from .errors import ConfigurationError, DimensionError
from .imaging import (
    BandSimilarity,
    SubbandDecomposition,
    band_ssim,
    dwt_forward,
    dwt_inverse,
    low_freq_loss,
    read_image,
    ssim,
    write_image,
)
from .reward import (
    Caption,
    RewardRegistry,
    RewardScore,
    RewardWeights,
    build_rewards,
    register_reward_model,
    reward_loss,
    reward_score,
)
from .schedule import (
    SCHEDULE_PRESETS,
    LossContext,
    LossWeights,
    Phase,
    TimestepSchedule,
    dispatch_loss,
    phase_of,
    sample_training_step,
    timestep_of,
)
from .style import FeatureStack, GramMatrix, extract_features, gram, gram_kl_loss
from .diffusion import (
    Conditioning,
    EMAState,
    build_model,
    build_toy_model,
    denoise_step,
    ema_update,
    reference_rollout,
    rollout_to,
)
from .data import DegradationConfig, TrainPair, caption_of, degrade, make_dataset
from .trainer import TrainConfig, TrainMetrics, export_ema, train, train_step
from .evaluation import EvalReport, analyze_trajectory, evaluate
from .config import RunConfig

__version__ = "0.1.0"

__all__ = [
    "BandSimilarity",
    "Caption",
    "Conditioning",
    "ConfigurationError",
    "DegradationConfig",
    "DimensionError",
    "EMAState",
    "EvalReport",
    "FeatureStack",
    "GramMatrix",
    "LossContext",
    "LossWeights",
    "Phase",
    "RewardRegistry",
    "RewardScore",
    "RewardWeights",
    "RunConfig",
    "SCHEDULE_PRESETS",
    "SubbandDecomposition",
    "TimestepSchedule",
    "TrainConfig",
    "TrainMetrics",
    "TrainPair",
    "analyze_trajectory",
    "band_ssim",
    "build_model",
    "build_rewards",
    "build_toy_model",
    "caption_of",
    "degrade",
    "denoise_step",
    "dispatch_loss",
    "dwt_forward",
    "dwt_inverse",
    "ema_update",
    "evaluate",
    "export_ema",
    "extract_features",
    "gram",
    "gram_kl_loss",
    "low_freq_loss",
    "make_dataset",
    "phase_of",
    "read_image",
    "reference_rollout",
    "register_reward_model",
    "reward_loss",
    "reward_score",
    "rollout_to",
    "sample_training_step",
    "ssim",
    "timestep_of",
    "train",
    "train_step",
    "write_image",
]
