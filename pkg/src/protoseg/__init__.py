"""Prototype-guided hybrid CNN/transformer segmentation of two-phase volumes."""

from .config import AblationFlags, NetworkConfig, validate_config
from .synthetic import SyntheticSpec, generate_synthetic_case
from .volumes import VolumeCase, build_input_tensor, load_volume, resample_case, save_volume

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "NetworkConfig",
    "SyntheticSpec",
    "VolumeCase",
    "build_input_tensor",
    "generate_synthetic_case",
    "load_volume",
    "resample_case",
    "save_volume",
    "validate_config",
    "__version__",
]
