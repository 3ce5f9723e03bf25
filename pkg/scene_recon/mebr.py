"""
Mask-enhanced box refinement: replace a predicted box by the bounds of its instance
points when the two disagree on size by more than d0.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import MebrConfig
from .geometry3d import SIZE_EPS, OrientedBox3D, aabb_from_points, rotate_z

logger = logging.getLogger(__name__)

PREDICTED = "predicted"
MASK = "mask"
EMPTY = "empty"


@dataclass(frozen=True)
class RefinementDecision:
    box: OrientedBox3D
    source: str
    distance: Optional[float]


def decide_refinement(
    pred: OrientedBox3D,
    instance_points: np.ndarray,
    cfg: Optional[MebrConfig] = None,
) -> RefinementDecision:
    """
    Compare the predicted size with the yaw-aligned bounds of the instance points.

    Args:
        pred: network box
        instance_points: K x 3 points of the predicted mask
        cfg: MebrConfig

    Returns:
        RefinementDecision; `source` is "predicted" when d <= d0, "mask" when the
        mask-derived box was chosen, "empty" when there were no points
    """
    cfg = cfg or MebrConfig()
    points = np.asarray(instance_points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        logger.warning("box refinement skipped: empty instance mask")
        return RefinementDecision(box=pred, source=EMPTY, distance=None)

    canonical = rotate_z(points, -pred.yaw)
    center, size = aabb_from_points(canonical)
    distance = float(np.max(np.abs(pred.size - size)))
    if distance <= cfg.d0:
        return RefinementDecision(box=pred, source=PREDICTED, distance=distance)

    refined = OrientedBox3D(
        center=rotate_z(center, pred.yaw),
        size=np.maximum(size, SIZE_EPS),
        yaw=pred.yaw,
        iou_score=pred.iou_score,
    )
    return RefinementDecision(box=refined, source=MASK, distance=distance)


def refine_box(pred: OrientedBox3D, instance_points: np.ndarray, cfg: Optional[MebrConfig] = None) -> OrientedBox3D:
    return decide_refinement(pred, instance_points, cfg).box
