"""Tests for the voxel U-Net feature pyramid."""

import numpy as np
import pytest
import torch
from torch.func import functional_call

from scene_recon.backbone import VoxelUNetBackbone, extract_features, voxelize
from scene_recon.config import BackboneConfig
from scene_recon.exceptions import EmptyInputError, InvalidArgumentError


def _cluster(rng, center, n=200, radius=0.3):
    return center + rng.uniform(-radius, radius, size=(n, 3))


class TestVoxelize:
    def test_cells_in_range(self, rng):
        points = torch.as_tensor(rng.uniform(-2, 3, size=(500, 3)))
        grid = voxelize(points, 16, 0.05)
        assert int(grid.cell_index.min()) >= 0 and int(grid.cell_index.max()) <= 15
        assert bool((grid.offsets >= -0.5).all()) and bool((grid.offsets < 0.5).all())

    def test_degenerate_extent(self):
        points = torch.zeros(10, 3, dtype=torch.float64)
        grid = voxelize(points, 16, 0.05)
        assert len(torch.unique(grid.flat_index)) == 1


class TestFeaturePyramid:
    def test_levels_and_shapes(self, rng, small_backbone_config):
        backbone = VoxelUNetBackbone(small_backbone_config)
        pyramid = extract_features(rng.uniform(0, 1, size=(1000, 3)).astype(np.float32), backbone)
        assert len(pyramid.levels) == 5
        assert pyramid.num_levels == 4
        assert pyramid.point_features.shape == (1000, 8)
        counts = [pyramid[level].num_cells for level in range(1, 5)]
        assert counts == sorted(counts, reverse=True)
        for level in range(1, 5):
            cells = pyramid[level]
            assert cells.features.shape[1] == 8
            assert int(cells.point_to_cell.min()) >= 0
            assert int(cells.point_to_cell.max()) < cells.num_cells

    def test_every_occupied_cell_has_a_point(self, rng, small_backbone_config):
        backbone = VoxelUNetBackbone(small_backbone_config)
        pyramid = extract_features(rng.normal(size=(300, 3)), backbone)
        for level in range(1, 5):
            assert len(torch.unique(pyramid[level].point_to_cell)) == pyramid[level].num_cells

    def test_permutation_equivariance(self, rng, small_backbone_config):
        """Permuting the input permutes level 0 and leaves the cell levels unchanged."""
        backbone = VoxelUNetBackbone(small_backbone_config).double()
        points = torch.as_tensor(rng.uniform(0, 2, size=(400, 3)))
        order = torch.as_tensor(rng.permutation(400))
        a = backbone(points)
        b = backbone(points[order])
        torch.testing.assert_close(b.point_features, a.point_features[order], atol=1e-12, rtol=0)
        for level in range(1, 5):
            torch.testing.assert_close(b[level].features, a[level].features, atol=1e-12, rtol=0)
            torch.testing.assert_close(b[level].point_to_cell, a[level].point_to_cell[order])

    def test_distant_clusters_do_not_interact(self, rng):
        """Zeroing the inputs of one cluster leaves the other cluster's features unchanged."""
        cfg = BackboneConfig(grid_size=64, width=4, feature_dim=4, levels=4)
        backbone = VoxelUNetBackbone(cfg).double()
        points = torch.as_tensor(np.concatenate([_cluster(rng, np.zeros(3)), _cluster(rng, np.full(3, 10.0))]))
        in_a = torch.arange(400) < 200

        ones = torch.ones(400, 1, dtype=torch.float64)
        zeroed = ones.clone()
        zeroed[~in_a] = 0.0
        before = backbone(points, ones)
        after = backbone(points, zeroed)

        torch.testing.assert_close(after.point_features[in_a], before.point_features[in_a], atol=1e-12, rtol=0)
        assert not torch.allclose(after.point_features[~in_a], before.point_features[~in_a])
        for level in range(1, 5):
            rows = torch.unique(before[level].point_to_cell[in_a])
            torch.testing.assert_close(after[level].features[rows], before[level].features[rows], atol=1e-12, rtol=0)

    def test_single_point(self, small_backbone_config):
        backbone = VoxelUNetBackbone(small_backbone_config)
        pyramid = backbone(torch.zeros(1, 3))
        assert all(pyramid[level].num_cells == 1 for level in range(1, 5))

    def test_gradients_reach_every_level(self, rng, small_backbone_config):
        backbone = VoxelUNetBackbone(small_backbone_config)
        pyramid = extract_features(rng.uniform(0, 1, size=(200, 3)), backbone)
        loss = sum(pyramid[level].features.sum() for level in range(5))
        loss.backward()
        assert backbone.stem[0].weight.grad is not None
        assert backbone.level_proj[3].weight.grad is not None

    def test_parameter_gradients_match_central_differences(self, rng, small_backbone_config):
        backbone = VoxelUNetBackbone(small_backbone_config).double()
        points = torch.as_tensor(rng.uniform(0, 1, size=(50, 3)))
        weights = torch.as_tensor(rng.normal(size=(50, small_backbone_config.feature_dim)))
        params = dict(backbone.named_parameters())
        names = ["stem.0.bias", "down.0.0.bias", "down.3.2.0.bias", "up.0.bias", "fuse.0.0.bias", "point_proj.weight"]

        def run(*values):
            pyramid = functional_call(backbone, {**params, **dict(zip(names, values))}, (points,))
            return (pyramid.point_features * weights).sum()

        inputs = tuple(params[name].detach().clone().requires_grad_(True) for name in names)
        assert torch.autograd.gradcheck(run, inputs, eps=1e-6, atol=1e-3, rtol=1e-3)


class TestInputValidation:
    def test_empty(self, small_backbone_config):
        with pytest.raises(EmptyInputError):
            VoxelUNetBackbone(small_backbone_config)(torch.zeros(0, 3))

    def test_wrong_shape(self, small_backbone_config):
        with pytest.raises(InvalidArgumentError):
            VoxelUNetBackbone(small_backbone_config)(torch.zeros(5, 2))

    def test_non_finite(self, small_backbone_config):
        points = torch.zeros(5, 3)
        points[2, 1] = float("nan")
        with pytest.raises(InvalidArgumentError):
            VoxelUNetBackbone(small_backbone_config)(points)
