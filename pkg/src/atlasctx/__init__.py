"""Anatomical landmark detection with atlas location autocontext."""

__version__ = "0.1.0"

from .atlas import Atlas, AtlasConfig, AtlasRegistration, FitResult, iterative_refine_fit, weighted_affine_fit
from .cascade import Pipeline, PipelineConfig, detect, load_pipeline, save_pipeline, train_pipeline
from .estimator import LandmarkDetector
from .heatmap import HeatmapSpec, HeatmapStack, gaussian_target, tile_inference
from .nnet import FcnModel
from .volume import Landmark, LandmarkSet, Volume3D, load_landmarks, load_volume, save_landmarks, save_volume

__all__ = [
    "Atlas",
    "AtlasConfig",
    "AtlasRegistration",
    "FcnModel",
    "FitResult",
    "HeatmapSpec",
    "HeatmapStack",
    "Landmark",
    "LandmarkDetector",
    "LandmarkSet",
    "Pipeline",
    "PipelineConfig",
    "Volume3D",
    "detect",
    "gaussian_target",
    "iterative_refine_fit",
    "load_landmarks",
    "load_pipeline",
    "load_volume",
    "save_landmarks",
    "save_pipeline",
    "save_volume",
    "tile_inference",
    "train_pipeline",
    "weighted_affine_fit",
]
