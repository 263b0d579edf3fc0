"""unweather: multi-weather image restoration at desk scale.

A transformer encoder with per-pixel mixed depthwise kernels, a weather-prior
cross-attention bottleneck fed by a frozen teacher encoder, a convolutional
decoder, residual-feature distillation, synthetic degradation generators, and
a training/evaluation CLI.
"""

from .config import Config, desk_config, load_config, paper_config
from .data import AugmentConfig, Sample, WeatherPairDataset, cutmix, make_batches
from .decoder import ConvDecoder
from .distill import DistillConfig, ResidualDistiller, distill_active
from .encoder import EncoderConfig, RestorationEncoder
from .errors import ConfigError, NumericError, TeacherLoadError
from .losses import LossWeights, psnr, ssim
from .model import RestorationModel
from .prior import PriorBottleneck, PriorConfig
from .teacher import StubTeacher, TeacherSpec, build_teacher
from .train import Trainer, lr_schedule

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "Config",
    "ConfigError",
    "ConvDecoder",
    "DistillConfig",
    "EncoderConfig",
    "LossWeights",
    "NumericError",
    "PriorBottleneck",
    "PriorConfig",
    "ResidualDistiller",
    "RestorationEncoder",
    "RestorationModel",
    "Sample",
    "StubTeacher",
    "TeacherLoadError",
    "TeacherSpec",
    "Trainer",
    "WeatherPairDataset",
    "build_teacher",
    "cutmix",
    "desk_config",
    "distill_active",
    "load_config",
    "lr_schedule",
    "make_batches",
    "paper_config",
    "psnr",
    "ssim",
]
