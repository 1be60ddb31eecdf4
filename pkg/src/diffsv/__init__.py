"""Noise-robust speaker verification with a transformer enhancer, a score-based
diffusion denoiser and a ResNet speaker extractor trained as one model."""

from .config import RunConfig, apply_ablation, load_config, preset
from .diffusion import NoiseSchedule, ScoreUNet, ode_denoise, score_matching_loss
from .enhancer import Enhancer, enhancement_loss
from .errors import (CheckpointError, ConfigError, DiffSVError, FeatureError, NonFiniteLoss,
                     SamplerDiverged, TrainingHalted)
from .evaluation import compute_eer, compute_min_dcf, run_condition_grid
from .extractor import ResNetExtractor, SpeakerEmbedding, assemble_hierarchical
from .features import FeatureConfig, MelFeature, MixSpec, Waveform, extract_mel, mix_at_snr
from .objectives import AamHead, aam_softmax_loss, total_loss
from .training import DiffSV, Trainer, load_checkpoint, load_model, save_checkpoint

__version__ = "0.1.0"
