"""Hand-built head outputs and targets for matcher and loss tests."""

import torch

from scene_recon.heads import BoxOutputs, HeadOutputs, ShapeOutputs
from scene_recon.matcher import InstanceTargets


def make_preds(mask_logits, class_logits, centers, sizes, shape_dim=8, bins=12, **overrides):
    mask_logits = torch.as_tensor(mask_logits, dtype=torch.float64)
    m = mask_logits.shape[0]
    values = {
        "angle_logits": torch.zeros(m, bins, dtype=torch.float64),
        "angle_residual": torch.zeros(m, bins, dtype=torch.float64),
        "iou_logit": torch.zeros(m, dtype=torch.float64),
        "shape_mu": torch.zeros(m, shape_dim, dtype=torch.float64),
        "shape_log_sigma": torch.zeros(m, shape_dim, dtype=torch.float64),
    }
    values.update({k: torch.as_tensor(v, dtype=torch.float64) for k, v in overrides.items()})
    return HeadOutputs(
        mask_logits=mask_logits,
        class_logits=torch.as_tensor(class_logits, dtype=torch.float64),
        box=BoxOutputs(
            angle_logits=values["angle_logits"],
            angle_residual=values["angle_residual"],
            center=torch.as_tensor(centers, dtype=torch.float64),
            size=torch.as_tensor(sizes, dtype=torch.float64),
            iou_logit=values["iou_logit"],
        ),
        shape=ShapeOutputs(z=values["shape_mu"], mu=values["shape_mu"], log_sigma=values["shape_log_sigma"]),
    )


def make_targets(masks, labels, centers, sizes, yaws=None, shape_mu=None, shape_log_sigma=None, shape_dim=8):
    g = len(labels)

    def tensor(value, default):
        return torch.as_tensor(value, dtype=torch.float64) if value is not None else default

    return InstanceTargets(
        masks=torch.as_tensor(masks, dtype=torch.float64),
        labels=torch.as_tensor(labels, dtype=torch.long),
        centers=torch.as_tensor(centers, dtype=torch.float64).reshape(g, 3),
        sizes=torch.as_tensor(sizes, dtype=torch.float64).reshape(g, 3),
        yaws=tensor(yaws, torch.zeros(g, dtype=torch.float64)),
        shape_mu=tensor(shape_mu, torch.zeros(g, shape_dim, dtype=torch.float64)),
        shape_log_sigma=tensor(shape_log_sigma, torch.zeros(g, shape_dim, dtype=torch.float64)),
    )
