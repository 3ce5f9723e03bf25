"""
Metrics module for scene_recon. Completion quality (voxel IoU, Chamfer distance),
mapping quality (PCR), mean average precision and recognition precision.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import trimesh
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .config import EvalConfig
from .exceptions import EmptyInputError, InvalidArgumentError, SchemaError
from .geometry3d import OrientedBox3D, TriangleMesh, voxel_iou_boxes
from .scenegen import CLASS_NAMES, SceneSample

logger = logging.getLogger(__name__)

MODES = ("iou", "cd", "pcr")
REPORT_SCHEMA = 1


def _shared_pitch(a: trimesh.Trimesh, b: trimesh.Trimesh, grid: int) -> float:
    bounds = np.vstack([a.bounds, b.bounds])
    extent = bounds.max(axis=0) - bounds.min(axis=0)
    return float(extent.max()) / grid


def _occupied(mesh: trimesh.Trimesh, pitch: float) -> set:
    voxels = mesh.voxelized(pitch=pitch)
    if mesh.is_watertight:
        voxels = voxels.fill()
    else:
        logger.warning("mesh is not watertight; voxel IoU uses surface occupancy only")
    return set(map(tuple, np.round(voxels.points / pitch).astype(np.int64)))


def voxel_iou_mesh(pred: TriangleMesh, gt: TriangleMesh, grid: int = 32) -> float:
    """
    IoU of two meshes voxelized on a shared lattice with `grid` voxels across the
    longest axis of their union bounds. Closed meshes are filled.
    """
    if pred.is_empty or gt.is_empty:
        raise EmptyInputError("voxel_iou_mesh needs two non-empty meshes")
    a, b = pred.to_trimesh(), gt.to_trimesh()
    pitch = _shared_pitch(a, b, grid)
    occ_a, occ_b = _occupied(a, pitch), _occupied(b, pitch)
    union = len(occ_a | occ_b)
    return len(occ_a & occ_b) / union if union else 0.0


def sample_surface(mesh: TriangleMesh, samples: int, seed: int) -> np.ndarray:
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), samples, seed=seed)
    return np.asarray(points)


def chamfer(pred: TriangleMesh, gt: TriangleMesh, samples: int = 2048, seed: int = 0, gt_seed: Optional[int] = None) -> float:
    """Symmetric mean nearest-neighbour distance between area-uniform surface samples."""
    if samples < 512:
        raise InvalidArgumentError(f"samples must be >= 512, got {samples}")
    if pred.is_empty or gt.is_empty:
        raise EmptyInputError("chamfer needs two non-empty meshes")
    points_a = sample_surface(pred, samples, seed)
    points_b = sample_surface(gt, samples, seed if gt_seed is None else gt_seed)
    dist_a, _ = cKDTree(points_b).query(points_a)
    dist_b, _ = cKDTree(points_a).query(points_b)
    return 0.5 * (float(np.mean(dist_a)) + float(np.mean(dist_b)))


def pcr(instance_points: np.ndarray, pred: TriangleMesh, tau: float = 0.1) -> float:
    """Fraction of observed points closer than tau to the mesh surface."""
    points = np.asarray(instance_points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyInputError("pcr needs at least one point")
    if pred.is_empty:
        return 0.0
    _, distance, _ = trimesh.proximity.closest_point(pred.to_trimesh(), points)
    return float(np.mean(distance < tau))


@dataclass
class GroundTruthObject:
    class_id: int
    box: OrientedBox3D
    mesh: TriangleMesh
    points: np.ndarray

    @classmethod
    def from_scene(cls, scene: SceneSample) -> List["GroundTruthObject"]:
        return [
            cls(class_id=inst.class_id, box=inst.box, mesh=inst.mesh(), points=scene.instance_points(k))
            for k, inst in enumerate(scene.instances)
        ]


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from confidence-ordered true-positive flags."""
    if num_gt == 0:
        raise InvalidArgumentError("average precision is undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, np.finfo(np.float64).eps)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _passes(value: float, threshold: float, mode: str) -> bool:
    return value <= threshold if mode == "cd" else value >= threshold


def _better(a: float, b: float, mode: str) -> bool:
    return a < b if mode == "cd" else a > b


def _true_positives(
    preds: Sequence,
    gts: Sequence,
    match_fn: Callable,
    threshold: float,
    mode: str,
    matching: str,
) -> np.ndarray:
    """TP flag per prediction of one scene and class, predictions in confidence order."""
    tp = np.zeros(len(preds))
    if not preds or not gts:
        return tp
    values = np.array([[match_fn(p, g) for g in gts] for p in preds], dtype=np.float64)
    passing = np.vectorize(lambda v: _passes(v, threshold, mode))(values)

    if matching == "hungarian":
        # maximize the number of passing matches; quality breaks ties
        quality = -values if mode == "cd" else values
        span = np.ptp(quality) + 1.0
        score = np.where(passing, 1.0 + (quality - quality.min()) / span, 0.0)
        rows, cols = linear_sum_assignment(-score)
        for r, c in zip(rows, cols):
            if passing[r, c]:
                tp[r] = 1
        return tp

    taken = np.zeros(len(gts), dtype=bool)
    for i in range(len(preds)):
        best = None
        for j in range(len(gts)):
            if taken[j] or not passing[i, j]:
                continue
            if best is None or _better(values[i, j], values[i, best], mode):
                best = j
        if best is not None:
            taken[best] = True
            tp[i] = 1
    return tp


class APAccumulator:
    """Collects per-scene predictions and ground truth, then computes per-class AP."""

    def __init__(self, match_fn: Callable, threshold: float, mode: str = "iou", num_classes: int = len(CLASS_NAMES), matching: str = "greedy"):
        if mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")
        if matching not in ("greedy", "hungarian"):
            raise InvalidArgumentError(f"matching must be 'greedy' or 'hungarian', got {matching!r}")
        self.match_fn = match_fn
        self.threshold = threshold
        self.mode = mode
        self.num_classes = num_classes
        self.matching = matching
        self.reset()

    def reset(self) -> None:
        self.scenes: List[tuple] = []

    def step(self, preds: Sequence, gts: Sequence) -> None:
        self.scenes.append((list(preds), list(gts)))

    def compute(self) -> Dict[int, float]:
        """AP per class with at least one ground-truth instance."""
        aps = {}
        for c in range(self.num_classes):
            num_gt = sum(1 for _, gts in self.scenes for g in gts if g.class_id == c)
            if num_gt == 0:
                continue
            scored = []
            for preds, gts in self.scenes:
                class_preds = sorted((p for p in preds if p.class_id == c), key=lambda p: -p.confidence)
                class_gts = [g for g in gts if g.class_id == c]
                flags = _true_positives(class_preds, class_gts, self.match_fn, self.threshold, self.mode, self.matching)
                scored.extend(zip([p.confidence for p in class_preds], flags))
            scored.sort(key=lambda item: -item[0])
            aps[c] = average_precision(np.array([flag for _, flag in scored]), num_gt)
        return aps


def mean_ap(
    preds: Sequence[Sequence],
    gts: Sequence[Sequence],
    match_fn: Callable,
    threshold: float,
    mode: str = "iou",
    num_classes: int = len(CLASS_NAMES),
    matching: str = "greedy",
) -> float:
    """
    Mean over classes of AP, each ground truth matched at most once.

    Args:
        preds: per scene, objects with `class_id` and `confidence`
        gts: per scene, objects with `class_id`
        match_fn: (pred, gt) -> metric value
        threshold: IoU/PCR must reach it, CD must not exceed it
        mode: "iou", "cd" or "pcr"
        matching: "greedy" (confidence order) or "hungarian"

    Returns:
        mAP in [0, 1]; 0.0 when no class has ground truth
    """
    if len(preds) != len(gts):
        raise InvalidArgumentError("preds and gts must cover the same scenes")
    accumulator = APAccumulator(match_fn, threshold, mode, num_classes, matching)
    for scene_preds, scene_gts in zip(preds, gts):
        accumulator.step(scene_preds, scene_gts)
    aps = accumulator.compute()
    return float(np.mean(list(aps.values()))) if aps else 0.0


def recognition_precision(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_threshold: float, resolution: int = 64) -> float:
    """True positives (same class, rotated box IoU >= threshold) over all emitted predictions."""
    total = sum(len(p) for p in preds)
    if total == 0:
        logger.warning("recognition precision with zero predictions is reported as 0")
        return 0.0
    tp = 0
    for scene_preds, scene_gts in zip(preds, gts):
        taken = [False] * len(scene_gts)
        for p in sorted(scene_preds, key=lambda p: -p.confidence):
            best, best_iou = None, iou_threshold
            for j, g in enumerate(scene_gts):
                if taken[j] or g.class_id != p.class_id:
                    continue
                iou = voxel_iou_boxes(p.box, g.box, resolution)
                if iou >= best_iou:
                    best, best_iou = j, iou
            if best is not None:
                taken[best] = True
                tp += 1
    return tp / total


@dataclass
class EvalReport:
    map_iou_25: float = 0.0
    map_iou_50: float = 0.0
    map_cd_01: float = 0.0
    map_cd_0047: float = 0.0
    map_pcr_05: float = 0.0
    prec_25: float = 0.0
    prec_50: float = 0.0
    per_class: Dict[str, Dict[str, float]] = field(default_factory=dict)
    num_scenes: int = 0

    METRICS = ("map_iou_25", "map_iou_50", "map_cd_01", "map_cd_0047", "map_pcr_05", "prec_25", "prec_50")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["schema"] = REPORT_SCHEMA
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        if not isinstance(data, dict):
            raise SchemaError("$", "report must be a JSON object")
        if data.get("schema") != REPORT_SCHEMA:
            raise SchemaError("schema", f"expected {REPORT_SCHEMA}, got {data.get('schema')!r}")
        values = {}
        for name in cls.METRICS:
            value = data.get(name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise SchemaError(name, "missing or not a number")
            if not 0.0 <= value <= 1.0:
                raise SchemaError(name, f"{value} outside [0, 1]")
            values[name] = float(value)
        per_class = data.get("per_class", {})
        if not isinstance(per_class, dict):
            raise SchemaError("per_class", "must be an object")
        return cls(per_class=per_class, num_scenes=int(data.get("num_scenes", 0)), **values)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise SchemaError("$", f"invalid JSON: {e}") from e
        return cls.from_dict(data)


HEADERS = ("mAP@IoU0.25", "mAP@IoU0.5", "mAP@CD0.1", "mAP@CD0.047", "mAP@PCR0.5", "Prec@0.25", "Prec@0.5")


def format_table(rows: Sequence[tuple]) -> str:
    """Aligned plain-text table of (label, EvalReport) rows, values in percent."""
    label_width = max([len("Method")] + [len(label) for label, _ in rows])
    widths = [len(h) for h in HEADERS]
    lines = ["  ".join(["Method".ljust(label_width)] + [h.rjust(w) for h, w in zip(HEADERS, widths)])]
    for label, report in rows:
        cells = [f"{100 * getattr(report, name):.2f}".rjust(w) for name, w in zip(EvalReport.METRICS, widths)]
        lines.append("  ".join([label.ljust(label_width)] + cells))
    return "\n".join(lines) + "\n"


class _MeshCache:
    def __init__(self):
        self._meshes = {}

    def __call__(self, pred) -> TriangleMesh:
        key = id(pred)
        if key not in self._meshes:
            self._meshes[key] = (pred, pred.mesh())
        return self._meshes[key][1]


def evaluate_predictions(
    preds: Sequence[Sequence],
    scenes: Sequence[SceneSample],
    cfg: Optional[EvalConfig] = None,
) -> EvalReport:
    """
    Full metric suite over predictions (objects with class_id, confidence, box, mesh())
    and the scenes they were made on.
    """
    cfg = cfg or EvalConfig()
    gts = [GroundTruthObject.from_scene(scene) for scene in scenes]
    mesh_of = _MeshCache()

    def iou_fn(p, g):
        return voxel_iou_mesh(mesh_of(p), g.mesh, cfg.voxel_grid)

    def cd_fn(p, g):
        return chamfer(mesh_of(p), g.mesh, cfg.chamfer_samples, cfg.mesh_seed)

    def pcr_fn(p, g):
        return pcr(g.points, mesh_of(p), cfg.pcr_tau)

    suites = {
        "map_iou_25": (iou_fn, 0.25, "iou"),
        "map_iou_50": (iou_fn, 0.5, "iou"),
        "map_cd_01": (cd_fn, 0.1, "cd"),
        "map_cd_0047": (cd_fn, 0.047, "cd"),
        "map_pcr_05": (pcr_fn, 0.5, "pcr"),
    }
    values = {}
    per_class: Dict[str, Dict[str, float]] = {}
    for name, (fn, threshold, mode) in suites.items():
        accumulator = APAccumulator(_memoize(fn), threshold, mode, len(CLASS_NAMES), cfg.ap_matching)
        for scene_preds, scene_gts in zip(preds, gts):
            accumulator.step(scene_preds, scene_gts)
        aps = accumulator.compute()
        values[name] = float(np.mean(list(aps.values()))) if aps else 0.0
        for c, ap in aps.items():
            per_class.setdefault(CLASS_NAMES[c], {})[name] = ap

    values["prec_25"] = recognition_precision(preds, gts, 0.25, cfg.box_iou_resolution)
    values["prec_50"] = recognition_precision(preds, gts, 0.5, cfg.box_iou_resolution)
    return EvalReport(per_class=per_class, num_scenes=len(scenes), **values)


def _memoize(fn: Callable) -> Callable:
    cache = {}

    def wrapped(p, g):
        key = (id(p), id(g))
        if key not in cache:
            cache[key] = fn(p, g)
        return cache[key]

    return wrapped
