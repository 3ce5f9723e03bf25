import numpy as np
import pytest
import torch

from scene_recon import runtime
from scene_recon.config import BackboneConfig, GenerationConfig, ModelConfig, TrainConfig
from scene_recon.dataset import build_dataset
from scene_recon.scenegen import generate_scene


@pytest.fixture(autouse=True)
def cpu_runtime():
    """Every test runs in the float32 CPU reference mode."""
    runtime.configure(device="cpu", dtype="float32", threads=1)
    torch.manual_seed(0)
    yield
    runtime.reset()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_backbone_config():
    return BackboneConfig(grid_size=16, width=4, feature_dim=8, levels=4)


@pytest.fixture
def small_model_config():
    return ModelConfig(num_queries=6, semantic_dim=8, geometric_dim=8, num_heads=2, ffn_multiplier=2, num_layers=3)


@pytest.fixture
def scene():
    """Three objects, light noise and occlusion, few points."""
    return generate_scene(3, noise_sigma=0.005, dropout_fraction=0.3, seed=3, points_per_object=256, floor_points=256)


@pytest.fixture
def small_generation_config():
    return GenerationConfig(num_scenes=3, objects_min=1, objects_max=2, points_per_object=128, floor_points=128, seed=5)


@pytest.fixture
def manifest(tmp_path, small_generation_config):
    return build_dataset(small_generation_config, tmp_path / "data")


@pytest.fixture
def small_train_config():
    return TrainConfig(epochs=1, batch_size=2, num_queries=4, grid_size=16, backbone_width=4, seed=7, augment=False)
