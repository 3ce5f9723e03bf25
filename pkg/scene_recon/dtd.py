"""
Decoder module for scene_recon. Refines the semantic and geometric halves of the
object queries against the feature pyramid, coarse to fine.
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Tuple

import torch
from torch import nn

from .backbone import FeaturePyramid
from .config import ModelConfig
from .exceptions import InvalidArgumentError, MaskContractError

if TYPE_CHECKING:
    from .heads import PredictionHeads

logger = logging.getLogger(__name__)

QUERY_INIT_SCALE = 0.02


@dataclass
class QuerySet:
    semantic: torch.Tensor  # (M, D_s)
    geometric: torch.Tensor  # (M, D_g)

    def __post_init__(self):
        if self.semantic.ndim != 2 or self.geometric.ndim != 2:
            raise InvalidArgumentError("query halves must be 2-D")
        if self.semantic.shape[0] != self.geometric.shape[0]:
            raise InvalidArgumentError(
                f"query halves disagree on M: {self.semantic.shape[0]} vs {self.geometric.shape[0]}"
            )

    @property
    def num_queries(self) -> int:
        return self.semantic.shape[0]

    @property
    def semantic_dim(self) -> int:
        return self.semantic.shape[1]

    @property
    def geometric_dim(self) -> int:
        return self.geometric.shape[1]

    def joined(self) -> torch.Tensor:
        return torch.cat([self.semantic, self.geometric], dim=1)

    @classmethod
    def split(cls, joined: torch.Tensor, semantic_dim: int) -> "QuerySet":
        return cls(joined[:, :semantic_dim], joined[:, semantic_dim:])

    def permute(self, order: torch.Tensor) -> "QuerySet":
        return QuerySet(self.semantic[order], self.geometric[order])


def init_queries(
    M: int,
    seed: int,
    semantic_dim: int = 128,
    geometric_dim: int = 128,
    dtype: torch.dtype = torch.float32,
) -> QuerySet:
    """Draw M queries i.i.d. from N(0, 0.02^2) with a dedicated generator."""
    if M < 1:
        raise InvalidArgumentError(f"M must be >= 1, got {M}")
    generator = torch.Generator().manual_seed(seed)
    semantic = torch.randn(M, semantic_dim, generator=generator, dtype=dtype) * QUERY_INIT_SCALE
    geometric = torch.randn(M, geometric_dim, generator=generator, dtype=dtype) * QUERY_INIT_SCALE
    return QuerySet(semantic, geometric)


@dataclass
class AttentionMask:
    """mask[i, j] is True iff query i may attend to cell j; fallback marks rows widened to all cells."""

    mask: torch.Tensor  # (M, N_l) bool
    fallback: torch.Tensor  # (M,) bool

    @classmethod
    def full(cls, num_queries: int, num_cells: int, device=None) -> "AttentionMask":
        return cls(
            torch.ones(num_queries, num_cells, dtype=torch.bool, device=device),
            torch.zeros(num_queries, dtype=torch.bool, device=device),
        )

    @classmethod
    def from_point_masks(cls, point_masks: torch.Tensor, point_to_cell: torch.Tensor, num_cells: int) -> "AttentionMask":
        """A cell is in-mask if any of its points is. Empty rows fall back to all cells."""
        counts = point_masks.new_zeros(point_masks.shape[0], num_cells, dtype=torch.float64)
        counts.index_add_(1, point_to_cell, point_masks.to(torch.float64))
        mask = counts > 0
        fallback = ~mask.any(dim=1)
        mask[fallback] = True
        return cls(mask, fallback)

    @property
    def num_fallback(self) -> int:
        return int(self.fallback.sum())


def _heads_for(dim: int, requested: int) -> int:
    return requested if dim % requested == 0 else 1


class CrossAttention(nn.Module):
    """Multi-head query/key/value projections for one query part."""

    def __init__(self, query_dim: int, feature_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = _heads_for(query_dim, num_heads)
        self.q = nn.Linear(query_dim, query_dim)
        self.k = nn.Linear(feature_dim, query_dim)
        self.v = nn.Linear(feature_dim, query_dim)

    def forward(self, part: torch.Tensor, features: torch.Tensor, mask: AttentionMask) -> torch.Tensor:
        return masked_cross_attention(part, features, mask, self)


def masked_cross_attention(
    part: torch.Tensor,
    features: torch.Tensor,
    mask: AttentionMask,
    weights: CrossAttention,
) -> torch.Tensor:
    """
    Softmax attention of every query over the features inside its mask.

    Args:
        part: (M, D) semantic or geometric half
        features: (N_l, D^f) level features
        mask: AttentionMask of shape (M, N_l); every row must select at least one feature
        weights: CrossAttention holding the q, k, v projections

    Returns:
        (M, D) attended values
    """
    m, d = part.shape
    n = features.shape[0]
    if mask.mask.shape != (m, n):
        raise InvalidArgumentError(f"mask shape {tuple(mask.mask.shape)} != ({m}, {n})")
    if not bool(mask.mask.any(dim=1).all()):
        raise MaskContractError("all-masked attention row; fallback must be applied before attending")

    h = weights.num_heads
    q = weights.q(part).view(m, h, d // h).transpose(0, 1)
    k = weights.k(features).view(n, h, d // h).transpose(0, 1)
    v = weights.v(features).view(n, h, d // h).transpose(0, 1)

    logits = q @ k.transpose(1, 2) / math.sqrt(d // h)
    logits = logits.masked_fill(~mask.mask[None], float("-inf"))
    attention = torch.softmax(logits, dim=-1)
    return (attention @ v).transpose(0, 1).reshape(m, d)


class RefinementModule(nn.Module):
    """
    One decoder step: masked cross-attention per query half, self-attention over the
    joined queries, then a feed-forward block. Pre-norm residuals throughout.

    With `disentangled=False` a single cross-attention reads the joined query.
    """

    def __init__(
        self,
        semantic_dim: int,
        geometric_dim: int,
        feature_dim: int,
        num_heads: int = 4,
        ffn_multiplier: int = 4,
        disentangled: bool = True,
    ):
        super().__init__()
        self.semantic_dim = semantic_dim
        self.geometric_dim = geometric_dim
        self.disentangled = disentangled
        dim = semantic_dim + geometric_dim

        if disentangled:
            self.norm_semantic = nn.LayerNorm(semantic_dim)
            self.norm_geometric = nn.LayerNorm(geometric_dim)
            self.cross_semantic = CrossAttention(semantic_dim, feature_dim, num_heads)
            self.cross_geometric = CrossAttention(geometric_dim, feature_dim, num_heads)
        else:
            self.norm_joined = nn.LayerNorm(dim)
            self.cross_joined = CrossAttention(dim, feature_dim, num_heads)

        self.norm_self = nn.LayerNorm(dim)
        self.self_attention = nn.MultiheadAttention(dim, _heads_for(dim, num_heads), batch_first=True)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_multiplier * dim),
            nn.GELU(),
            nn.Linear(ffn_multiplier * dim, dim),
        )

    def cross_attend(self, q: QuerySet, features: torch.Tensor, mask: AttentionMask) -> QuerySet:
        """Residual cross-attention update, before queries interact."""
        if self.disentangled:
            semantic = q.semantic + self.cross_semantic(self.norm_semantic(q.semantic), features, mask)
            geometric = q.geometric + self.cross_geometric(self.norm_geometric(q.geometric), features, mask)
            return QuerySet(semantic, geometric)
        joined = q.joined()
        joined = joined + self.cross_joined(self.norm_joined(joined), features, mask)
        return QuerySet.split(joined, self.semantic_dim)

    def forward(self, q: QuerySet, features: torch.Tensor, mask: AttentionMask) -> QuerySet:
        if q.semantic_dim != self.semantic_dim or q.geometric_dim != self.geometric_dim:
            raise InvalidArgumentError(
                f"queries are ({q.semantic_dim}, {q.geometric_dim}), "
                f"module expects ({self.semantic_dim}, {self.geometric_dim})"
            )
        x = self.cross_attend(q, features, mask).joined()
        normed = self.norm_self(x)[None]
        x = x + self.self_attention(normed, normed, normed, need_weights=False)[0][0]
        x = x + self.ffn(self.norm_ffn(x))
        return QuerySet.split(x, self.semantic_dim)


def refine_level(q: QuerySet, features_l: torch.Tensor, prev_masks: AttentionMask, weights_l: RefinementModule) -> QuerySet:
    return weights_l(q, features_l, prev_masks)


class DisentangledDecoder(nn.Module):
    """num_layers x num_levels refinement modules, visited coarse to fine within each layer."""

    def __init__(self, cfg: ModelConfig, feature_dim: int, num_levels: int = 4):
        super().__init__()
        self.cfg = cfg
        self.num_levels = num_levels
        self.steps = nn.ModuleList(
            RefinementModule(
                cfg.semantic_dim,
                cfg.geometric_dim,
                feature_dim,
                num_heads=cfg.num_heads,
                ffn_multiplier=cfg.ffn_multiplier,
                disentangled=cfg.sgdq_enabled,
            )
            for _ in range(cfg.num_layers * num_levels)
        )

    def schedule(self) -> List[Tuple[int, int]]:
        """(step index, pyramid level) in execution order."""
        levels = list(range(self.num_levels, 0, -1))
        return [(i, levels[i % self.num_levels]) for i in range(len(self.steps))]


def decode(
    q0: QuerySet,
    pyramid: FeaturePyramid,
    weights: DisentangledDecoder,
    heads: "PredictionHeads",
    oracle_masks: Optional[torch.Tensor] = None,
) -> Tuple[QuerySet, List[QuerySet]]:
    """
    Run every refinement step. Attention masks come from the mask head on the current
    queries unless `oracle_masks` (M, N) fixes them.

    Returns:
        (final queries, the query set after each step)
    """
    if pyramid.num_levels != weights.num_levels:
        raise InvalidArgumentError(f"pyramid has {pyramid.num_levels} coarse levels, decoder expects {weights.num_levels}")

    q = q0
    f0 = pyramid.point_features
    intermediates = []
    for step, level in weights.schedule():
        if oracle_masks is not None:
            point_masks = oracle_masks.to(torch.bool)
        else:
            with torch.no_grad():
                point_masks = torch.sigmoid(heads.mask_logits(q, f0)) > 0.5
        cells = pyramid[level]
        mask = AttentionMask.from_point_masks(point_masks, cells.point_to_cell, cells.num_cells)
        if mask.num_fallback:
            logger.debug("step %d level %d: %d queries fall back to all cells", step, level, mask.num_fallback)
        q = refine_level(q, cells.features, mask, weights.steps[step])
        intermediates.append(q)
    return q, intermediates
