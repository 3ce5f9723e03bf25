"""
Matcher module for scene_recon. One-to-one assignment of queries to ground-truth
instances under a mixed mask, box and class cost.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import MatchCostConfig
from .exceptions import InvalidArgumentError
from .geometry3d import pairwise_giou3d
from .heads import HeadOutputs
from .scenegen import SceneSample
from .shapecodec import DEFAULT_SHAPE_DIM, encode_gt

DICE_EPS = 1e-6
TIE_TOLERANCE = 1e-9


@dataclass
class InstanceTargets:
    """Ground truth of one scene as tensors, G instances over N points."""

    masks: torch.Tensor  # (G, N) float
    labels: torch.Tensor  # (G,) long
    centers: torch.Tensor  # (G, 3)
    sizes: torch.Tensor  # (G, 3)
    yaws: torch.Tensor  # (G,)
    shape_mu: torch.Tensor  # (G, D_shape)
    shape_log_sigma: torch.Tensor  # (G, D_shape)

    @property
    def num_instances(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def from_scene(
        cls,
        scene: SceneSample,
        shape_dim: int = DEFAULT_SHAPE_DIM,
        dtype: torch.dtype = torch.float32,
        device=None,
    ) -> "InstanceTargets":
        g = scene.num_instances
        ids = torch.as_tensor(scene.instance_ids, dtype=torch.long)
        masks = (ids[None, :] == torch.arange(g)[:, None]).to(dtype)
        latents = [encode_gt(inst.shape, shape_dim) for inst in scene.instances]

        def stack(values, width):
            array = np.asarray(values, dtype=np.float64).reshape(g, width)
            return torch.as_tensor(array, dtype=dtype, device=device)

        return cls(
            masks=masks.to(device),
            labels=torch.as_tensor([inst.class_id for inst in scene.instances], dtype=torch.long, device=device),
            centers=stack([inst.box.center for inst in scene.instances], 3),
            sizes=stack([inst.box.size for inst in scene.instances], 3),
            yaws=stack([inst.box.yaw for inst in scene.instances], 1).reshape(g),
            shape_mu=stack([lat.mu for lat in latents], shape_dim),
            shape_log_sigma=stack([lat.log_sigma for lat in latents], shape_dim),
        )


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    unmatched_queries: List[int] = field(default_factory=list)

    @property
    def query_indices(self) -> torch.Tensor:
        return torch.as_tensor([q for q, _ in self.pairs], dtype=torch.long)

    @property
    def gt_indices(self) -> torch.Tensor:
        return torch.as_tensor([g for _, g in self.pairs], dtype=torch.long)

    def __len__(self) -> int:
        return len(self.pairs)


def pairwise_dice_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(M, N) x (G, N) -> (M, G) soft dice loss."""
    inter = probs @ targets.t()
    total = probs.sum(-1)[:, None] + targets.sum(-1)[None, :]
    return 1 - 2 * inter / total.clamp_min(DICE_EPS)


def cost_matrix(preds: HeadOutputs, gts: InstanceTargets, cfg: MatchCostConfig) -> torch.Tensor:
    """
    C[j, l] = lambda_mask * dice + lambda_box * (1 - giou) + lambda_class * (1 - p_j(class_l)).

    Only the dice term is used when `cfg.hybrid` is off.
    """
    if gts.num_instances == 0:
        raise InvalidArgumentError("cost_matrix needs at least one ground-truth instance")
    with torch.no_grad():
        dice = pairwise_dice_loss(torch.sigmoid(preds.mask_logits), gts.masks.to(preds.mask_logits.dtype))
        cost = cfg.lambda_mask * dice
        if cfg.hybrid:
            giou = pairwise_giou3d(preds.box.center, preds.box.size, gts.centers, gts.sizes)
            probs = torch.softmax(preds.class_logits, dim=-1)[:, gts.labels]
            cost = cost + cfg.lambda_box * (1 - giou) + cfg.lambda_class * (1 - probs)
    return cost


def _solve_constrained(cost: np.ndarray, forced_in, forced_out, fixed) -> Optional[Tuple[Dict[int, int], float]]:
    """
    Optimal assignment under row constraints, or None when they cannot be met.

    Rows in `forced_in` must be matched, rows in `forced_out` must not be, and
    `fixed` pins row -> column pairs. Unmatched rows go to zero-cost padding columns.
    """
    m, g = cost.shape
    big = 2.0 * np.abs(cost).sum() + 1.0
    padded = np.zeros((m, g + max(m - g, 0)))
    padded[:, :g] = cost
    for r in forced_out:
        padded[r, :g] = big
    for r in forced_in:
        padded[r, g:] = big
    for r, c in fixed.items():
        padded[r, :] = big
        padded[:, c] = big
        padded[r, c] = cost[r, c]
    rows, cols = linear_sum_assignment(padded)
    if np.any(padded[rows, cols] >= big):
        return None
    pairs = {int(r): int(c) for r, c in zip(rows, cols) if c < g}
    return pairs, float(sum(cost[r, c] for r, c in pairs.items()))


def hungarian(cost) -> Assignment:
    """
    Minimum-cost injective assignment of queries (rows) to ground truths (columns).

    Among equal-cost optima the lowest query indices win: first the set of matched
    queries is the lexicographically smallest, then each matched query in order takes
    the lowest column that keeps the total optimal.

    Raises:
        InvalidArgumentError: the cost contains NaN
    """
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().double().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidArgumentError(f"cost must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise InvalidArgumentError("cost matrix contains NaN")
    m, g = cost.shape
    if cost.size == 0:
        return Assignment(pairs=[], unmatched_queries=list(range(m)))

    rows, cols = linear_sum_assignment(cost)
    current = {int(r): int(c) for r, c in zip(rows, cols)}
    best = float(cost[rows, cols].sum())
    tol = TIE_TOLERANCE * max(1.0, abs(best))

    def optimal(trial):
        return trial is not None and trial[1] <= best + tol

    forced_in, forced_out = set(), set()
    if m > g:
        for r in range(m):
            if r not in current:
                trial = _solve_constrained(cost, forced_in | {r}, forced_out, {})
                if not optimal(trial):
                    forced_out.add(r)
                    continue
                current = trial[0]
            forced_in.add(r)

    fixed: Dict[int, int] = {}
    for r in sorted(current):
        taken = set(fixed.values())
        for c in range(current[r]):
            if c in taken:
                continue
            trial = _solve_constrained(cost, forced_in, forced_out, {**fixed, r: c})
            if optimal(trial):
                current = trial[0]
                break
        fixed[r] = current[r]

    pairs = sorted(current.items())
    return Assignment(pairs=pairs, unmatched_queries=[i for i in range(m) if i not in current])


def match(preds: HeadOutputs, gts: InstanceTargets, cfg: MatchCostConfig) -> Assignment:
    if gts.num_instances == 0:
        return Assignment(pairs=[], unmatched_queries=list(range(preds.num_queries)))
    return hungarian(cost_matrix(preds, gts, cfg))
