"""Calibration-free multi-view crowd counting on synthetic multi-camera scenes.

A small end-to-end pipeline: a synthetic pinhole-camera crowd simulator, a
single-view density counter trainable from counts alone, cross-view
homography and match estimation, and weighted scene-count fusion with
MAE/NAE evaluation. See the README for the CLI and the staged training
procedure.
"""

__version__ = "0.1.0"

from .config import LossWeights, RunConfig, SceneConfig, TrainConfig, default_config
from .geometry import Homography, fit_homography_dlt, is_dummy, make_dummy, warp_features
from .model import ModelBundle, run_frame

__all__ = [
    "Homography",
    "LossWeights",
    "ModelBundle",
    "RunConfig",
    "SceneConfig",
    "TrainConfig",
    "default_config",
    "fit_homography_dlt",
    "is_dummy",
    "make_dummy",
    "run_frame",
    "warp_features",
    "__version__",
]
