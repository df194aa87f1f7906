"""Bayesian segmentation with SGHMC over a cold posterior, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .checkpoint import CheckpointHeader, load_checkpoint, save_checkpoint
from .config import RunConfig, derive_seed, load_config
from .energy import EnergyConfig
from .models import ModelConfig, WeightVector, build_model, predict
from .sampler import CheckpointStore, SamplerConfig, lr_schedule, run_chain, select_samples, sghmc_step

__all__ = [
    "CheckpointHeader", "CheckpointStore", "EnergyConfig", "ModelConfig", "RunConfig", "SamplerConfig",
    "WeightVector", "build_model", "derive_seed", "load_checkpoint", "load_config", "lr_schedule",
    "predict", "run_chain", "save_checkpoint", "select_samples", "sghmc_step", "__version__",
]
