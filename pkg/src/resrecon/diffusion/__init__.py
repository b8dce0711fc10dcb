"""2D slice diffusion prior: schedule, denoiser, data and training."""

from .data import SliceDataset, augment_diverse, extract_slices
from .schedule import NoiseSchedule, build_schedule
from .training import Checkpoint, TrainingError, denoise_eps, train
from .unet import DenoiserConfig, UNet

__all__ = ["SliceDataset", "augment_diverse", "extract_slices", "NoiseSchedule", "build_schedule",
           "Checkpoint", "TrainingError", "denoise_eps", "train", "DenoiserConfig", "UNet"]
