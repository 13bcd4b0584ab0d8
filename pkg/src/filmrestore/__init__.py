"""Patch-based latent diffusion for restoring degraded film clips."""
from .backbone import FilmRestorationModel, LatentVolume, ModelConfig, parameter_groups, unet_denoise
from .config import RunConfig, load_config
from .errors import (AlignmentError, AssemblyError, ConfigurationError, CorruptDatasetError, FilmRestoreError,
                     InputError, NumericalError, StaleCacheError, UndefinedMetricError)
from .frequency import fft_pack, ifft_unpack, texture_module_forward
from .fusion import cross_attend_global, encode_global_frames, fourier_embed, fuse_position
from .inference import InferenceConfig, Restorer, cosine_weight, grfm_fuse, pre_restore_global, restore_video
from .patchgrid import PatchGrid, PatchSpec, assemble_patches, build_grid, extract_patch
from .synthdata import DefectSample, DefectTemplate, FrameVolume, degrade_quality, synthesize_sample
from .training import NoiseSchedule, Trainer, add_noise, loss_defect, loss_noise, loss_preprocess, loss_total, train

__version__ = "0.1.0"
