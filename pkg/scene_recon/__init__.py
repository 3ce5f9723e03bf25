"""
scene_recon - object-level scene reconstruction from partial point clouds.
"""

__version__ = "0.1.0"


# Configuration and runtime
from .config import (
    BackboneConfig,
    EvalConfig,
    GenerationConfig,
    LossConfig,
    MatchCostConfig,
    MebrConfig,
    ModelConfig,
    TrainConfig,
)
from .runtime import configure, ensure_runtime, get_runtime, reset

# Data
from .dataset import SceneDataset, SceneSet, build_dataset
from .geometry3d import OrientedBox3D, TriangleMesh
from .scenegen import SceneSample, augment, generate_scene, read_scene, write_scene

# Model, training and evaluation
from .metrics import EvalReport
from .model import DetectedObject, SceneReconstructor
from .trainer import Checkpoint, evaluate, train

__all__ = [
    "BackboneConfig",
    "EvalConfig",
    "GenerationConfig",
    "LossConfig",
    "MatchCostConfig",
    "MebrConfig",
    "ModelConfig",
    "TrainConfig",
    "configure",
    "ensure_runtime",
    "get_runtime",
    "reset",
    "SceneDataset",
    "SceneSet",
    "build_dataset",
    "OrientedBox3D",
    "TriangleMesh",
    "SceneSample",
    "augment",
    "generate_scene",
    "read_scene",
    "write_scene",
    "EvalReport",
    "DetectedObject",
    "SceneReconstructor",
    "Checkpoint",
    "evaluate",
    "train",
]
