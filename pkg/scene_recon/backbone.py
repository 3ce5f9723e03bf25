"""
Multi-scale point-wise features from a dense voxel U-Net.

Activations are masked to occupied cells after every convolution, so features of
cells only mix with occupied neighbours at the same scale.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import BackboneConfig
from .exceptions import EmptyInputError, InvalidArgumentError


@dataclass
class PyramidLevel:
    features: torch.Tensor  # (N_l, D^f)
    point_to_cell: torch.Tensor  # (N,) long, indexes rows of `features`

    @property
    def num_cells(self) -> int:
        return self.features.shape[0]


@dataclass
class FeaturePyramid:
    """Level 0 holds one row per input point; levels 1..L hold occupied cells at strides 2..2^L."""

    levels: List[PyramidLevel]

    @property
    def num_levels(self) -> int:
        """L, the number of coarse levels."""
        return len(self.levels) - 1

    @property
    def point_features(self) -> torch.Tensor:
        return self.levels[0].features

    def __getitem__(self, level: int) -> PyramidLevel:
        return self.levels[level]


@dataclass
class VoxelGrid:
    size: int
    flat_index: torch.Tensor  # (N,) cell index in the base grid
    cell_index: torch.Tensor  # (N, 3)
    offsets: torch.Tensor  # (N, 3) position inside the cell, in [-0.5, 0.5)
    order: torch.Tensor  # canonical point order used for accumulation


def voxelize(points: torch.Tensor, grid_size: int, margin: float) -> VoxelGrid:
    """Assign points to a grid spanning the scene bounds plus a relative margin."""
    with torch.no_grad():
        lo = points.min(dim=0).values
        hi = points.max(dim=0).values
        extent = (hi - lo).clamp_min(1e-3)
        lo = lo - margin * extent
        cell = extent * (1 + 2 * margin) / grid_size
        scaled = (points - lo) / cell
        cell_index = scaled.floor().long().clamp(0, grid_size - 1)
        offsets = scaled - cell_index.to(scaled.dtype) - 0.5
        flat = (cell_index[:, 0] * grid_size + cell_index[:, 1]) * grid_size + cell_index[:, 2]

        # Accumulate in an order that depends only on the point set, not its permutation
        coords = points.detach().cpu().numpy()
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], flat.cpu().numpy()))
    return VoxelGrid(
        size=grid_size,
        flat_index=flat,
        cell_index=cell_index,
        offsets=offsets,
        order=torch.as_tensor(order, device=points.device),
    )


def _conv_block(in_channels: int, out_channels: int) -> nn.Module:
    return nn.Sequential(nn.Conv3d(in_channels, out_channels, 3, padding=1), nn.ReLU())


class VoxelUNetBackbone(nn.Module):
    """
    Dense voxel U-Net producing a FeaturePyramid.

    Args:
        cfg: BackboneConfig
        in_channels: per-point input feature channels (default: a constant 1)
    """

    def __init__(self, cfg: Optional[BackboneConfig] = None, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        self.in_channels = in_channels
        width = self.cfg.width
        levels = self.cfg.levels

        self.stem = _conv_block(in_channels + 3, width)
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv3d(width, width, 2, stride=2), nn.ReLU(), _conv_block(width, width))
            for _ in range(levels)
        )
        self.up = nn.ModuleList(nn.ConvTranspose3d(width, width, 2, stride=2) for _ in range(levels))
        self.fuse = nn.ModuleList(_conv_block(2 * width, width) for _ in range(levels))
        self.level_proj = nn.ModuleList(nn.Linear(width, self.cfg.feature_dim) for _ in range(levels))
        self.point_proj = nn.Linear(width + 3, self.cfg.feature_dim)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def forward(self, points: torch.Tensor, point_features: Optional[torch.Tensor] = None) -> FeaturePyramid:
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidArgumentError(f"points must be N x 3, got {tuple(points.shape)}")
        if points.shape[0] == 0:
            raise EmptyInputError("backbone needs at least one point")
        if not torch.isfinite(points).all():
            raise InvalidArgumentError("points must be finite")

        dtype = self.point_proj.weight.dtype
        points = points.to(dtype)
        if point_features is None:
            point_features = points.new_ones(points.shape[0], self.in_channels)
        point_features = point_features.to(dtype)

        g = self.cfg.grid_size
        grid = voxelize(points, g, self.cfg.margin)

        # Mean of (features, offsets) per occupied cell
        inputs = torch.cat([point_features, grid.offsets], dim=1)
        order = grid.order
        sums = inputs.new_zeros(g**3, inputs.shape[1]).index_add_(0, grid.flat_index[order], inputs[order])
        counts = torch.bincount(grid.flat_index, minlength=g**3).to(dtype)
        dense = (sums / counts.clamp_min(1)[:, None]).t().reshape(1, -1, g, g, g)

        occupancy = [(counts > 0).to(dtype).reshape(1, 1, g, g, g)]
        for _ in range(self.cfg.levels):
            occupancy.append(F.max_pool3d(occupancy[-1], 2))

        skips = [self.stem(dense) * occupancy[0]]
        for level, down in enumerate(self.down, start=1):
            skips.append(down(skips[-1]) * occupancy[level])

        decoded = [None] * (self.cfg.levels + 1)
        decoded[-1] = skips[-1]
        for level in range(self.cfg.levels - 1, -1, -1):
            up = self.up[level](decoded[level + 1])
            decoded[level] = self.fuse[level](torch.cat([up, skips[level]], dim=1)) * occupancy[level]

        finest = decoded[0].reshape(self.cfg.width, -1).t()
        level0 = self.point_proj(torch.cat([finest[grid.flat_index], grid.offsets], dim=1))
        levels = [PyramidLevel(level0, torch.arange(points.shape[0], device=points.device))]

        for level in range(1, self.cfg.levels + 1):
            size = g >> level
            occupied = torch.nonzero(occupancy[level].reshape(-1) > 0).squeeze(1)
            lookup = torch.full((size**3,), -1, dtype=torch.long, device=points.device)
            lookup[occupied] = torch.arange(len(occupied), device=points.device)
            cells = grid.cell_index >> level
            flat = (cells[:, 0] * size + cells[:, 1]) * size + cells[:, 2]
            features = decoded[level].reshape(self.cfg.width, -1).t()[occupied]
            levels.append(PyramidLevel(self.level_proj[level - 1](features), lookup[flat]))

        return FeaturePyramid(levels)


def extract_features(
    points,
    params: VoxelUNetBackbone,
    point_features: Optional[torch.Tensor] = None,
) -> FeaturePyramid:
    """Run the backbone on an N x 3 array or tensor."""
    if not isinstance(points, torch.Tensor):
        points = torch.as_tensor(np.asarray(points), dtype=params.point_proj.weight.dtype)
    return params(points.to(params.point_proj.weight.device), point_features)
