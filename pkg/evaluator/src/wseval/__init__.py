"""Scoring harness for the weight-steganography toolkit's target stage."""

__version__ = "0.1.0"

from .data import DatasetMissing, calibration_split, load_dataset
from .fixture import build_tiny_model
from .harness import PROTOCOL, EvalJob, ModelLoadError, evaluate

__all__ = [
    "DatasetMissing", "EvalJob", "ModelLoadError", "PROTOCOL",
    "build_tiny_model", "calibration_split", "evaluate", "load_dataset",
]
