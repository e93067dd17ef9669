"""Calcification segmentation on synthetic CT phantoms.

Thin layer over the compiled ``_core`` module. Arrays are numpy, volumes are
``[z, y, x]`` and spacings ``(x, y, z)`` in millimetres.
"""

import yaml

from ._core import (
    CalcsegError,
    ConfigError,
    FingerprintMismatch,
    GenerationError,
    ParseError,
    ShapeError,
    TrainingError,
    UndefinedMetricError,
    bootstrap_ci,
    calibrate_threshold,
    default_config_yaml,
    dice,
    generate_phantom,
    phantom_gen,
    precision_recall,
    standardize_hu,
    volume_mm3,
)


def default_config():
    """Default run configuration as nested dicts."""
    return yaml.safe_load(default_config_yaml())


__all__ = [
    "CalcsegError",
    "ConfigError",
    "FingerprintMismatch",
    "GenerationError",
    "ParseError",
    "ShapeError",
    "TrainingError",
    "UndefinedMetricError",
    "bootstrap_ci",
    "calibrate_threshold",
    "default_config",
    "dice",
    "generate_phantom",
    "phantom_gen",
    "precision_recall",
    "standardize_hu",
    "volume_mm3",
]
