"""
Losses module for scene_recon. Semantic (mask, class) and geometric (box, shape) terms
over a matching, and their composition with deep supervision.
"""

from dataclasses import dataclass, fields
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F

from .config import LossConfig, MatchCostConfig
from .geometry3d import giou3d_tensor
from .heads import HeadOutputs, yaw_to_bin
from .matcher import Assignment, InstanceTargets, match

DICE_EPS = 1e-6


def dice_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Soft dice loss per row of (P, N) inputs."""
    inter = (probs * targets).sum(-1)
    total = probs.sum(-1) + targets.sum(-1)
    return 1 - 2 * inter / total.clamp_min(DICE_EPS)


def gaussian_kl(mu_p: torch.Tensor, log_sigma_p: torch.Tensor, mu_q: torch.Tensor, log_sigma_q: torch.Tensor) -> torch.Tensor:
    """KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2)) summed over the last dimension."""
    var_ratio = torch.exp(2 * (log_sigma_p - log_sigma_q))
    mean_term = (mu_p - mu_q) ** 2 * torch.exp(-2 * log_sigma_q)
    return 0.5 * (var_ratio + mean_term - 1 - 2 * (log_sigma_p - log_sigma_q)).sum(-1)


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.sum() * 0.0


def semantic_loss(
    preds: HeadOutputs,
    gts: InstanceTargets,
    assignment: Assignment,
    cfg: Optional[LossConfig] = None,
) -> Dict[str, torch.Tensor]:
    """
    Mask BCE and dice over matched pairs; class cross-entropy over all queries.

    Unmatched queries are supervised to 'no object', weighted by `cfg.no_object_weight`.
    """
    cfg = cfg or LossConfig()
    num_classes = preds.class_logits.shape[-1] - 1

    if len(assignment):
        qi, gi = assignment.query_indices, assignment.gt_indices
        logits = preds.mask_logits[qi]
        targets = gts.masks[gi].to(logits.dtype)
        mask_bce = F.binary_cross_entropy_with_logits(logits, targets)
        mask_dice = dice_loss(torch.sigmoid(logits), targets).mean()
    else:
        mask_bce = mask_dice = _zero(preds.mask_logits)

    target = torch.full((preds.num_queries,), num_classes, dtype=torch.long, device=preds.class_logits.device)
    for q, g in assignment.pairs:
        target[q] = gts.labels[g]
    weight = torch.ones(num_classes + 1, dtype=preds.class_logits.dtype, device=preds.class_logits.device)
    weight[num_classes] = cfg.no_object_weight
    class_ce = F.cross_entropy(preds.class_logits, target, weight=weight)

    return {"mask_bce": mask_bce, "mask_dice": mask_dice, "class_ce": class_ce}


def geometric_loss(
    preds: HeadOutputs,
    gts: InstanceTargets,
    assignment: Assignment,
    cfg: Optional[LossConfig] = None,
) -> Dict[str, torch.Tensor]:
    """Box center, size, angle, GIoU, IoU-score and latent shape terms over matched pairs."""
    cfg = cfg or LossConfig()
    box = preds.box
    if not len(assignment):
        zero = _zero(box.center)
        return {name: zero for name in ("box_center", "box_size", "box_angle", "box_giou", "box_iou_score", "shape_latent")}

    qi, gi = assignment.query_indices, assignment.gt_indices
    delta = cfg.huber_delta
    center, size = box.center[qi], box.size[qi]
    gt_center = gts.centers[gi].to(center.dtype)
    gt_size = gts.sizes[gi].to(size.dtype)

    box_center = F.huber_loss(center, gt_center, reduction="none", delta=delta).sum(-1).mean()
    box_size = F.huber_loss(size, gt_size, reduction="none", delta=delta).sum(-1).mean()

    num_bins = box.angle_logits.shape[-1]
    gt_bin, gt_residual = yaw_to_bin(gts.yaws[gi].to(center.dtype), num_bins)
    residual = box.angle_residual[qi].gather(-1, gt_bin[:, None]).squeeze(-1)
    box_angle = F.cross_entropy(box.angle_logits[qi], gt_bin) + F.huber_loss(
        residual, gt_residual, reduction="mean", delta=delta
    )

    giou, iou = giou3d_tensor(center, size, gt_center, gt_size)
    box_giou = (1 - giou).mean()
    box_iou_score = F.binary_cross_entropy_with_logits(box.iou_logit[qi], iou.detach())

    shape_latent = gaussian_kl(
        preds.shape.mu[qi],
        preds.shape.log_sigma[qi],
        gts.shape_mu[gi].to(center.dtype),
        gts.shape_log_sigma[gi].to(center.dtype),
    ).mean()

    return {
        "box_center": box_center,
        "box_size": box_size,
        "box_angle": box_angle,
        "box_giou": box_giou,
        "box_iou_score": box_iou_score,
        "shape_latent": shape_latent,
    }


@dataclass
class LossReport:
    mask_bce: torch.Tensor
    mask_dice: torch.Tensor
    class_ce: torch.Tensor
    box_center: torch.Tensor
    box_size: torch.Tensor
    box_angle: torch.Tensor
    box_giou: torch.Tensor
    box_iou_score: torch.Tensor
    shape_latent: torch.Tensor
    total: torch.Tensor

    @classmethod
    def components(cls) -> List[str]:
        return [f.name for f in fields(cls) if f.name != "total"]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(getattr(self, f.name))) for f in fields(self))

    def to_record(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    @classmethod
    def mean(cls, reports: List["LossReport"]) -> "LossReport":
        """Average in list order."""
        values = {}
        for f in fields(cls):
            terms = [getattr(r, f.name) for r in reports]
            values[f.name] = torch.stack(terms).sum() / len(terms)
        return cls(**values)


def total_loss(
    intermediates: List[HeadOutputs],
    final_preds: HeadOutputs,
    gts: InstanceTargets,
    match_cfg: Optional[MatchCostConfig] = None,
    cfg: Optional[LossConfig] = None,
) -> LossReport:
    """
    Full loss on the final predictions plus mask and class terms at every intermediate
    step when deep supervision is on. Matching is recomputed for each supervised step.
    """
    match_cfg = match_cfg or MatchCostConfig()
    cfg = cfg or LossConfig()

    assignment = match(final_preds, gts, match_cfg)
    terms = semantic_loss(final_preds, gts, assignment, cfg)
    terms.update(geometric_loss(final_preds, gts, assignment, cfg))

    if cfg.deep_supervision:
        for step in intermediates:
            extra = semantic_loss(step, gts, match(step, gts, match_cfg), cfg)
            for name, value in extra.items():
                terms[name] = terms[name] + value

    total = sum(getattr(cfg, name) * value for name, value in terms.items())
    return LossReport(total=total, **terms)
