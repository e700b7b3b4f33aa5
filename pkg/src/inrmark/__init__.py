"""Watermark images by fine-tuning the sinusoidal INR that represents them."""

from .codec import (
    PretrainConfig,
    WatermarkDecoder,
    WatermarkEncoder,
    decode_message,
    encode_residual,
    harden_message,
    make_watermarked,
    pretrain_decoder,
)
from .distortions import DistortionSpec, apply_distortion, forward_asl, noise_layer, sample_distortion
from .errors import ConfigurationError, ContractError, DivergenceError, DomainError, InrMarkError
from .finetune import FinetuneConfig, SchedulePair, epoch_pair_schedule, finetune, finetune_step, generate_message
from .metrics import bit_accuracy, psnr, residual_map
from .sampler import coordinate_grid, normalize_index, sample_image
from .siren import FitReport, INRConfig, OptimizerSpec, Siren, fit_inr, init_siren, inr_forward

__version__ = "0.1.0"
