"""
Model module for scene_recon. Wires backbone, query decoder and heads into one network
and turns its outputs into detected objects.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .backbone import FeaturePyramid, VoxelUNetBackbone
from .config import BackboneConfig, MebrConfig, ModelConfig
from .dtd import DisentangledDecoder, QuerySet, decode, init_queries
from .geometry3d import OrientedBox3D, TriangleMesh
from .heads import HeadOutputs, PredictionHeads, mask_from_logits
from .mebr import PREDICTED, decide_refinement
from .scenegen import CLASS_NAMES
from .shapecodec import decode as decode_shape
from .shapecodec import place_mesh

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    final: HeadOutputs
    intermediates: List[HeadOutputs]
    pyramid: FeaturePyramid


@dataclass
class DetectedObject:
    """One kept query: class, ranking confidence, box, latent and the indices of its mask points."""

    class_id: int
    confidence: float
    box: OrientedBox3D
    latent: np.ndarray
    mask_indices: np.ndarray
    query_index: int = -1
    network_box: Optional[OrientedBox3D] = None
    box_source: str = PREDICTED

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id] if 0 <= self.class_id < len(CLASS_NAMES) else str(self.class_id)

    def mesh(self) -> TriangleMesh:
        return place_mesh(decode_shape(self.latent), self.box)

    def to_dict(self) -> dict:
        data = {
            "class_id": self.class_id,
            "class_name": self.class_name,
            "confidence": self.confidence,
            "box": self.box.to_dict(),
            "latent": [float(v) for v in self.latent],
            "mask_indices": [int(i) for i in self.mask_indices],
            "query_index": self.query_index,
            "box_source": self.box_source,
        }
        if self.network_box is not None:
            data["network_box"] = self.network_box.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DetectedObject":
        network_box = data.get("network_box")
        return cls(
            class_id=int(data["class_id"]),
            confidence=float(data["confidence"]),
            box=OrientedBox3D.from_dict(data["box"]),
            latent=np.asarray(data["latent"], dtype=np.float64),
            mask_indices=np.asarray(data.get("mask_indices", []), dtype=np.int64),
            query_index=int(data.get("query_index", -1)),
            network_box=OrientedBox3D.from_dict(network_box) if network_box else None,
            box_source=data.get("box_source", PREDICTED),
        )


class SceneReconstructor(nn.Module):
    """
    Backbone, learnable queries, decoder and heads.

    Args:
        cfg: ModelConfig
        backbone_cfg: BackboneConfig
    """

    def __init__(self, cfg: Optional[ModelConfig] = None, backbone_cfg: Optional[BackboneConfig] = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.backbone_cfg = backbone_cfg or BackboneConfig()
        self.backbone = VoxelUNetBackbone(self.backbone_cfg)
        q0 = init_queries(self.cfg.num_queries, self.cfg.query_seed, self.cfg.semantic_dim, self.cfg.geometric_dim)
        self.query_semantic = nn.Parameter(q0.semantic)
        self.query_geometric = nn.Parameter(q0.geometric)
        self.decoder = DisentangledDecoder(self.cfg, self.backbone.feature_dim, self.backbone_cfg.levels)
        self.heads = PredictionHeads(self.cfg, self.backbone.feature_dim)

    @property
    def queries(self) -> QuerySet:
        return QuerySet(self.query_semantic, self.query_geometric)

    def forward(
        self,
        points: torch.Tensor,
        mode: str = "train",
        generator: Optional[torch.Generator] = None,
        oracle_masks: Optional[torch.Tensor] = None,
    ) -> ModelOutput:
        pyramid = self.backbone(points)
        f0 = pyramid.point_features
        _, steps = decode(self.queries, pyramid, self.decoder, self.heads, oracle_masks)
        intermediates = [self.heads(q, f0, mode=mode, generator=generator) for q in steps]
        return ModelOutput(final=intermediates[-1], intermediates=intermediates, pyramid=pyramid)

    @torch.no_grad()
    def predict(self, points, mebr: Optional[MebrConfig] = None) -> List[DetectedObject]:
        """
        Objects for every query not classified as 'no object'.

        Args:
            points: N x 3 array
            mebr: refinement settings; None keeps the network boxes

        Returns:
            DetectedObject list ordered by query index
        """
        param = self.query_semantic
        points_np = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        tensor = torch.as_tensor(points_np, dtype=param.dtype, device=param.device)
        out = self(tensor, mode="infer").final

        probs = torch.softmax(out.class_logits, dim=-1)
        no_object = probs.shape[-1] - 1
        detections = []
        for i in range(out.num_queries):
            class_id = int(probs[i].argmax())
            if class_id == no_object:
                continue
            instance = out.instance(i)
            mask_indices = np.flatnonzero(mask_from_logits(out.mask_logits[i]).cpu().numpy())
            box = instance.box
            source = PREDICTED
            if mebr is not None:
                decision = decide_refinement(box, points_np[mask_indices], mebr)
                box, source = decision.box, decision.source
            detections.append(
                DetectedObject(
                    class_id=class_id,
                    confidence=float(probs[i, class_id]) * float(instance.box.iou_score),
                    box=box,
                    latent=instance.shape_mu,
                    mask_indices=mask_indices,
                    query_index=i,
                    network_box=instance.box,
                    box_source=source,
                )
            )
        logger.debug("kept %d of %d queries", len(detections), out.num_queries)
        return detections


def refine_detections(detections: List[DetectedObject], points: np.ndarray, cfg: MebrConfig) -> List[DetectedObject]:
    """Apply box refinement to stored detections, starting from their network boxes."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    refined = []
    for det in detections:
        base = det.network_box or det.box
        decision = decide_refinement(base, points[det.mask_indices], cfg)
        refined.append(
            DetectedObject(
                class_id=det.class_id,
                confidence=det.confidence,
                box=decision.box,
                latent=det.latent,
                mask_indices=det.mask_indices,
                query_index=det.query_index,
                network_box=base,
                box_source=decision.source,
            )
        )
    return refined


def scene_mesh(detections: List[DetectedObject]) -> TriangleMesh:
    """All detected meshes merged into one."""
    return TriangleMesh.concatenate(det.mesh() for det in detections)
