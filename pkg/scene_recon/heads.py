"""
Prediction heads for scene_recon. The mask and class heads read the semantic half of
a query, the box and shape heads read the geometric half.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .dtd import QuerySet
from .geometry3d import OrientedBox3D
from .utils import wrap_angle

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 5.0
LOG_SIZE_MIN = -10.0
LOG_SIZE_MAX = 5.0


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


def bin_centers(num_bins: int, dtype=torch.float32) -> torch.Tensor:
    width = 2 * math.pi / num_bins
    return -math.pi + (torch.arange(num_bins, dtype=dtype) + 0.5) * width


def yaw_to_bin(yaw: torch.Tensor, num_bins: int):
    """Bin index and residual of each yaw, for B uniform bins over [-pi, pi)."""
    yaw = wrap_angle(yaw)
    width = 2 * math.pi / num_bins
    index = torch.floor((yaw + math.pi) / width).long().clamp(0, num_bins - 1)
    residual = yaw - bin_centers(num_bins, yaw.dtype).to(yaw.device)[index]
    return index, residual


def decode_yaw(angle_logits: torch.Tensor, angle_residual: torch.Tensor) -> torch.Tensor:
    """Bin center of the argmax bin plus that bin's residual, wrapped to [-pi, pi)."""
    num_bins = angle_logits.shape[-1]
    index = angle_logits.argmax(dim=-1, keepdim=True)
    centers = bin_centers(num_bins, angle_residual.dtype).to(angle_residual.device)
    yaw = centers[index.squeeze(-1)] + angle_residual.gather(-1, index).squeeze(-1)
    return wrap_angle(yaw)


@dataclass
class BoxOutputs:
    angle_logits: torch.Tensor  # (..., B)
    angle_residual: torch.Tensor  # (..., B)
    center: torch.Tensor  # (..., 3)
    size: torch.Tensor  # (..., 3), positive
    iou_logit: torch.Tensor  # (...)

    @property
    def iou_score(self) -> torch.Tensor:
        return torch.sigmoid(self.iou_logit)

    @property
    def yaw(self) -> torch.Tensor:
        return decode_yaw(self.angle_logits, self.angle_residual)


@dataclass
class ShapeOutputs:
    z: torch.Tensor
    mu: torch.Tensor
    log_sigma: torch.Tensor


class PredictionHeads(nn.Module):
    """
    Per-query MLPs shared across all queries.

    With disentangled queries the semantic heads see Q_s and the geometric heads Q_g;
    otherwise every head sees the joined query.
    """

    def __init__(self, cfg: ModelConfig, feature_dim: int):
        super().__init__()
        self.cfg = cfg
        joined = cfg.semantic_dim + cfg.geometric_dim
        semantic_in = cfg.semantic_dim if cfg.sgdq_enabled else joined
        geometric_in = cfg.geometric_dim if cfg.sgdq_enabled else joined
        bins = cfg.angle_bins

        self.mask_mlp = _mlp(semantic_in, semantic_in, feature_dim)
        self.class_mlp = _mlp(semantic_in, semantic_in, cfg.num_classes + 1)
        self.box_mlp = _mlp(geometric_in, geometric_in, 2 * bins + 3 + 3 + 1)
        self.shape_mlp = _mlp(geometric_in, geometric_in, 2 * cfg.shape_dim)

    def semantic_part(self, q: QuerySet) -> torch.Tensor:
        return q.semantic if self.cfg.sgdq_enabled else q.joined()

    def geometric_part(self, q: QuerySet) -> torch.Tensor:
        return q.geometric if self.cfg.sgdq_enabled else q.joined()

    def mask_embed(self, q_sem: torch.Tensor) -> torch.Tensor:
        return self.mask_mlp(q_sem)

    def mask_logits(self, q: QuerySet, f0: torch.Tensor) -> torch.Tensor:
        return mask_head(self.semantic_part(q), f0, self)

    def forward(
        self,
        q: QuerySet,
        f0: torch.Tensor,
        mode: str = "train",
        generator: Optional[torch.Generator] = None,
    ) -> "HeadOutputs":
        q_sem = self.semantic_part(q)
        q_geo = self.geometric_part(q)
        box = box_head(q_geo, self)
        shape = shape_head(q_geo, self, mode=mode, generator=generator)
        return HeadOutputs(
            mask_logits=mask_head(q_sem, f0, self),
            class_logits=class_head(q_sem, self),
            box=box,
            shape=shape,
        )


def mask_head(q_sem: torch.Tensor, f0: torch.Tensor, weights) -> torch.Tensor:
    """
    Mask logits as dot products of point features with the mapped query.

    Args:
        q_sem: (D_s,) or (M, D_s)
        f0: (N, D^f) point features
        weights: object with a `mask_embed` callable

    Returns:
        (N,) or (M, N) pre-sigmoid logits
    """
    return weights.mask_embed(q_sem) @ f0.t()


def mask_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits) > 0.5


def class_head(q_sem: torch.Tensor, weights: PredictionHeads) -> torch.Tensor:
    """C + 1 logits; the last one is 'no object'."""
    return weights.class_mlp(q_sem)


def box_head(q_geo: torch.Tensor, weights: PredictionHeads) -> BoxOutputs:
    bins = weights.cfg.angle_bins
    raw = weights.box_mlp(q_geo)
    angle_logits, angle_residual, center, size, iou = torch.split(raw, [bins, bins, 3, 3, 1], dim=-1)
    return BoxOutputs(
        angle_logits=angle_logits,
        angle_residual=angle_residual,
        center=center,
        size=torch.exp(size.clamp(LOG_SIZE_MIN, LOG_SIZE_MAX)),
        iou_logit=iou.squeeze(-1),
    )


def reparameterize(
    mu: torch.Tensor,
    sigma: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I)."""
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eps


def shape_head(
    q_geo: torch.Tensor,
    weights: PredictionHeads,
    mode: str = "train",
    generator: Optional[torch.Generator] = None,
) -> ShapeOutputs:
    """Latent shape distribution; train mode samples z, infer mode returns z = mu."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    mu, log_sigma = weights.shape_mlp(q_geo).chunk(2, dim=-1)
    log_sigma = log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    z = mu if mode == "infer" else reparameterize(mu, log_sigma.exp(), generator)
    return ShapeOutputs(z=z, mu=mu, log_sigma=log_sigma)


@dataclass
class InstancePrediction:
    mask_logits: np.ndarray
    mask: np.ndarray
    class_logits: np.ndarray
    box: OrientedBox3D
    shape_mu: np.ndarray
    shape_log_sigma: np.ndarray

    @property
    def class_probabilities(self) -> np.ndarray:
        e = np.exp(self.class_logits - self.class_logits.max())
        return e / e.sum()


@dataclass
class HeadOutputs:
    """Outputs of every head for the M queries of one scene."""

    mask_logits: torch.Tensor  # (M, N)
    class_logits: torch.Tensor  # (M, C + 1)
    box: BoxOutputs
    shape: ShapeOutputs

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]

    def instance(self, i: int) -> InstancePrediction:
        """Detached numpy view of query i."""
        mask_logits = self.mask_logits[i].detach().cpu().double().numpy()
        box = OrientedBox3D(
            center=self.box.center[i].detach().cpu().double().numpy(),
            size=self.box.size[i].detach().cpu().double().numpy(),
            yaw=float(self.box.yaw[i]),
            iou_score=float(self.box.iou_score[i]),
        )
        return InstancePrediction(
            mask_logits=mask_logits,
            mask=mask_from_logits(self.mask_logits[i]).cpu().numpy(),
            class_logits=self.class_logits[i].detach().cpu().double().numpy(),
            box=box,
            shape_mu=self.shape.mu[i].detach().cpu().double().numpy(),
            shape_log_sigma=self.shape.log_sigma[i].detach().cpu().double().numpy(),
        )
