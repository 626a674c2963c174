"""Colour preprocessing, Netpbm I/O and label-consistent augmentation."""

from .augment import (
    AugmentConfig,
    AugmentDraw,
    DegenerateTransformError,
    apply_augment,
    augment_dataset,
    mixup,
    sample_augment,
)
from .clahe import clahe, clahe_luts
from .color import ChannelCountError, lab_to_srgb, srgb_to_lab
from .filters import gaussian_blur, gaussian_kernel, laplacian_energy
from .netpbm import NetpbmError, read_image, read_mask, write_image, write_mask
from .preprocess import PreprocessConfig, preprocess

__all__ = [
    "AugmentConfig",
    "AugmentDraw",
    "ChannelCountError",
    "DegenerateTransformError",
    "NetpbmError",
    "PreprocessConfig",
    "apply_augment",
    "augment_dataset",
    "clahe",
    "clahe_luts",
    "gaussian_blur",
    "gaussian_kernel",
    "lab_to_srgb",
    "laplacian_energy",
    "mixup",
    "preprocess",
    "read_image",
    "read_mask",
    "sample_augment",
    "srgb_to_lab",
    "write_image",
    "write_mask",
]
