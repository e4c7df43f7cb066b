"""Perspective-view to bird's-eye-view vehicle box localization on synthetic driving scenes."""

from .bevnet import BevRegressor, IPMRegressor
from .dataset import BevDataset, write_dataset
from .evalkit import MetricsSummary, evaluate
from .geometry import BevBox, BevGrid, Box3, CameraModel, Pose2, PvBox
from .scenegen import AcquisitionProtocol, SceneConfig, run_acquisition

__version__ = "0.1.0"

__all__ = [
    "AcquisitionProtocol",
    "BevBox",
    "BevDataset",
    "BevGrid",
    "BevRegressor",
    "Box3",
    "CameraModel",
    "IPMRegressor",
    "MetricsSummary",
    "Pose2",
    "PvBox",
    "SceneConfig",
    "evaluate",
    "run_acquisition",
    "write_dataset",
]
