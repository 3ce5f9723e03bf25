"""
Trainer module for scene_recon. Learning-rate schedule, training loop, checkpoints,
evaluation and the ablation harness.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from .config import BackboneConfig, EvalConfig, MebrConfig, ModelConfig, TrainConfig
from .dataset import SceneDataset, SceneSet
from .exceptions import CheckpointError, InvalidArgumentError, NonFiniteLossError
from .losses import LossReport, total_loss
from .matcher import InstanceTargets
from .metrics import EvalReport, evaluate_predictions, format_table
from .model import DetectedObject, SceneReconstructor
from .runtime import ensure_runtime
from .scenegen import SceneSample, read_scene
from .utils import derive_seed, seed_everything

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "scene-recon-checkpoint"
CHECKPOINT_VERSION = 1
BEST_METRIC = "map_iou_25"


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """
    One-cycle learning rate: cosine ramp lr_min -> lr_max over the warmup fraction,
    then cosine decay back to lr_min at the final step. A one-step run uses lr_max.
    """
    if total_steps < 1 or not 0 <= step < total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return cfg.lr_max
    span = cfg.lr_max - cfg.lr_min
    warmup = min(int(round(cfg.warmup_fraction * total_steps)), total_steps - 1)
    if step < warmup:
        return cfg.lr_min + span * 0.5 * (1 - math.cos(math.pi * step / warmup))
    decay = total_steps - 1 - warmup
    if decay == 0:
        return cfg.lr_min
    t = (step - warmup) / decay
    return cfg.lr_min + span * 0.5 * (1 + math.cos(math.pi * t))


@dataclass
class Checkpoint:
    model_state: Dict[str, torch.Tensor]
    train_config: TrainConfig
    model_config: ModelConfig
    backbone_config: BackboneConfig
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    epoch: int = 0
    step: int = 0
    history: List[dict] = field(default_factory=list)

    def to_payload(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model": self.model_state,
            "optimizer": self.optimizer_state,
            "scheduler": self.scheduler_state,
            "epoch": self.epoch,
            "step": self.step,
            "train_config": self.train_config.to_dict(),
            "model_config": self.model_config.to_dict(),
            "backbone_config": self.backbone_config.to_dict(),
            "history": json.dumps(self.history),
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_payload(), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint {path} does not exist")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise CheckpointError(f"checkpoint {path} is corrupt: {e}") from e
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a scene-recon checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {payload.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})")
        try:
            return cls(
                model_state=payload["model"],
                optimizer_state=payload["optimizer"],
                scheduler_state=payload["scheduler"],
                epoch=int(payload["epoch"]),
                step=int(payload["step"]),
                train_config=TrainConfig.from_dict(payload["train_config"]),
                model_config=ModelConfig.from_dict(payload["model_config"]),
                backbone_config=BackboneConfig.from_dict(payload["backbone_config"]),
                history=json.loads(payload["history"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint {path} is incomplete: {e}") from e

    def build_model(self) -> SceneReconstructor:
        runtime = ensure_runtime()
        model = SceneReconstructor(self.model_config, self.backbone_config)
        model.load_state_dict(self.model_state)
        return model.to(device=runtime.device, dtype=runtime.dtype).eval()


def _to_device(scene: SceneSample, model: SceneReconstructor) -> Tuple[torch.Tensor, InstanceTargets]:
    param = model.query_semantic
    points = torch.as_tensor(scene.points, dtype=param.dtype, device=param.device)
    targets = InstanceTargets.from_scene(scene, model.cfg.shape_dim, dtype=param.dtype, device=param.device)
    return points, targets


def _dump_diagnostics(out_dir: Path, scene: SceneSample, step: int, report: LossReport) -> Path:
    path = out_dir / f"nonfinite_step{step:06d}.json"
    record = {"scene_id": scene.scene_id, "step": step, "losses": report.to_record(), "num_points": scene.num_points}
    path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return path


def _collate(batch: List[SceneSample]) -> List[SceneSample]:
    return batch


def train(
    manifest: Union[str, Path],
    cfg: TrainConfig,
    out_dir: Union[str, Path],
    val_manifest: Optional[Union[str, Path]] = None,
    eval_cfg: Optional[EvalConfig] = None,
    progress: bool = False,
) -> Checkpoint:
    """
    Train a SceneReconstructor model.

    Args:
        manifest: training scenes
        cfg: TrainConfig
        out_dir: receives train_log.jsonl, last.pt and best.pt
        val_manifest: scenes validated every `cfg.val_every` epochs and after the last one
        eval_cfg: metric settings for validation
        progress: show a tqdm bar

    Returns:
        The best checkpoint by map_iou_25, or the last one without validation
    """
    runtime = ensure_runtime()
    scenes = SceneSet.from_manifest(manifest)
    if scenes.count() == 0:
        raise InvalidArgumentError(f"manifest {manifest} lists no scenes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)

    model_cfg, backbone_cfg = cfg.model_config(), cfg.backbone_config()
    model = SceneReconstructor(model_cfg, backbone_cfg).to(device=runtime.device, dtype=runtime.dtype)
    optimizer = AdamW(model.parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)

    dataset = SceneDataset(scenes, seed=cfg.seed, augment=cfg.augment)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=cfg.workers,
        collate_fn=_collate,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    total_steps = cfg.epochs * len(loader)
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    scheduler = LambdaLR(optimizer, lambda s: lr_schedule(min(s, total_steps - 1), total_steps, cfg) / cfg.lr_max)

    match_cfg, loss_cfg = cfg.match_config(), cfg.loss_config()
    val_scenes = SceneSet.from_manifest(val_manifest).all() if val_manifest else None
    history: List[dict] = []
    best_score = -1.0
    best: Optional[Checkpoint] = None
    step = 0

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            model_state={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
            optimizer_state=optimizer.state_dict(),
            scheduler_state=scheduler.state_dict(),
            epoch=epoch,
            step=step,
            train_config=cfg,
            model_config=model_cfg,
            backbone_config=backbone_cfg,
            history=list(history),
        )

    logger.info("training on %d scenes for %d steps", len(dataset), total_steps)
    bar = tqdm(total=total_steps, disable=not progress, desc="train")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            if step >= total_steps:
                break
            dataset.set_epoch(epoch)
            model.train()
            for batch in loader:
                if step >= total_steps:
                    break
                reports = []
                for i, scene in enumerate(batch):
                    points, targets = _to_device(scene, model)
                    generator = torch.Generator(device=points.device).manual_seed(derive_seed(cfg.seed, step, i))
                    output = model(points, mode="train", generator=generator)
                    report = total_loss(output.intermediates, output.final, targets, match_cfg, loss_cfg)
                    if not report.is_finite():
                        dump = _dump_diagnostics(out, scene, step, report)
                        raise NonFiniteLossError(scene.scene_id, step, f"non-finite loss (diagnostics in {dump})")
                    reports.append(report)
                report = LossReport.mean(reports)

                optimizer.zero_grad()
                report.total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                lr = optimizer.param_groups[0]["lr"]
                optimizer.step()
                scheduler.step()

                record = {"step": step, "epoch": epoch, "lr": lr, **report.to_record()}
                log.write(json.dumps(record) + "\n")
                step += 1
                bar.update(1)

            last_epoch = epoch == cfg.epochs - 1 or step >= total_steps
            if val_scenes is not None and ((epoch + 1) % cfg.val_every == 0 or last_epoch):
                result = evaluate_model(model, val_scenes, MebrConfig() if cfg.mebr_enabled else None, eval_cfg)
                history.append({"epoch": epoch, "step": step, **{m: getattr(result, m) for m in EvalReport.METRICS}})
                log.write(json.dumps({"epoch": epoch, "eval": result.to_dict()}) + "\n")
                logger.info("epoch %d: %s = %.4f", epoch, BEST_METRIC, getattr(result, BEST_METRIC))
                if getattr(result, BEST_METRIC) > best_score:
                    best_score = getattr(result, BEST_METRIC)
                    best = snapshot(epoch)
                    best.save(out / "best.pt")
    bar.close()

    last = snapshot(epoch)
    last.save(out / "last.pt")
    if best is None:
        last.save(out / "best.pt")
        return last
    return best


def evaluate_model(
    model: SceneReconstructor,
    scenes: Sequence[SceneSample],
    mebr: Optional[MebrConfig] = None,
    eval_cfg: Optional[EvalConfig] = None,
) -> EvalReport:
    was_training = model.training
    model.eval()
    predictions = [model.predict(scene.points, mebr) for scene in scenes]
    model.train(was_training)
    return evaluate_predictions(predictions, scenes, eval_cfg)


# Per-process model for sharded prediction
_worker_model: Optional[SceneReconstructor] = None


def _init_worker(checkpoint_path: str) -> None:
    global _worker_model
    torch.set_num_threads(1)
    _worker_model = Checkpoint.load(checkpoint_path).build_model()


def _predict_file(args) -> List[dict]:
    path, mebr_dict = args
    mebr = MebrConfig.from_dict(mebr_dict) if mebr_dict is not None else None
    return [det.to_dict() for det in _worker_model.predict(read_scene(path).points, mebr)]


def evaluate(
    checkpoint: Union[str, Path, Checkpoint],
    manifest: Union[str, Path],
    mebr: bool = True,
    eval_cfg: Optional[EvalConfig] = None,
    mebr_cfg: Optional[MebrConfig] = None,
    workers: int = 0,
) -> EvalReport:
    """
    Predict every scene of a manifest and run the metric suite.

    With `workers` > 0 (and a checkpoint path) prediction is sharded over processes and
    merged in manifest order.
    """
    scenes = SceneSet.from_manifest(manifest)
    paths = scenes.paths
    if not paths:
        raise InvalidArgumentError(f"manifest {manifest} lists no scenes")
    mebr_cfg = (mebr_cfg or MebrConfig()) if mebr else None
    scene_list = scenes.all()

    if workers > 0 and not isinstance(checkpoint, Checkpoint):
        Checkpoint.load(checkpoint)
        jobs = [(str(p), mebr_cfg.to_dict() if mebr_cfg else None) for p in paths]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(str(checkpoint),)) as pool:
            records = list(pool.map(_predict_file, jobs))
        predictions = [[DetectedObject.from_dict(r) for r in scene] for scene in records]
        return evaluate_predictions(predictions, scene_list, eval_cfg)

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    return evaluate_model(ckpt.build_model(), scene_list, mebr_cfg, eval_cfg)


ABLATION_ROWS: Tuple[Tuple[str, bool, bool, bool], ...] = (
    # label, sgdq, hybrid matching, mebr
    ("baseline", False, False, False),
    ("+hybrid", False, True, False),
    ("+sgdq", True, False, False),
    ("+sgdq+hybrid", True, True, False),
    ("+sgdq+hybrid+mebr", True, True, True),
)


@dataclass
class AblationRow:
    label: str
    sgdq: bool
    hybrid: bool
    mebr: bool
    reports: List[EvalReport]

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports]))

    def mean_report(self) -> EvalReport:
        return EvalReport(num_scenes=self.reports[0].num_scenes, **{m: self.mean(m) for m in EvalReport.METRICS})


def run_ablation(
    train_manifest: Union[str, Path],
    val_manifest: Union[str, Path],
    cfg: TrainConfig,
    out_dir: Union[str, Path],
    seeds: Sequence[int] = (0, 1, 2),
    eval_cfg: Optional[EvalConfig] = None,
) -> List[AblationRow]:
    """
    Train and evaluate every ablation row for each seed. Rows that differ only in box
    refinement share one trained model.
    """
    out = Path(out_dir)
    rows = [AblationRow(label, sgdq, hybrid, mebr, []) for label, sgdq, hybrid, mebr in ABLATION_ROWS]
    for seed in seeds:
        trained: Dict[Tuple[bool, bool], Checkpoint] = {}
        for row in rows:
            key = (row.sgdq, row.hybrid)
            if key not in trained:
                run_cfg = cfg.replace(seed=seed, sgdq_enabled=row.sgdq, hybrid_matching_enabled=row.hybrid, mebr_enabled=False)
                run_dir = out / f"seed{seed}_sgdq{int(row.sgdq)}_hybrid{int(row.hybrid)}"
                trained[key] = train(train_manifest, run_cfg, run_dir)
            report = evaluate(trained[key], val_manifest, mebr=row.mebr, eval_cfg=eval_cfg)
            row.reports.append(report)
            logger.info("seed %d %s: map_iou_25 = %.4f", seed, row.label, report.map_iou_25)

    table = format_table([(row.label, row.mean_report()) for row in rows])
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    return rows
