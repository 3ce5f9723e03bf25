"""
Dataset module for scene_recon. Defines manifests, the SceneSet query class and the
torch Dataset used for training.
"""

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
from torch.utils.data import Dataset

from .config import GenerationConfig
from .exceptions import DoesNotExist, InvalidArgumentError, MultipleObjectsReturned
from .scenegen import CLASS_NAMES, SceneSample, augment, generate_scene, read_scene, write_scene
from .utils import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
SUMMARY_NAME = "summary.json"


def write_manifest(paths: List[Union[str, Path]], path: Union[str, Path]) -> None:
    """Write one scene path per line, relative to the manifest when possible."""
    root = Path(path).resolve().parent
    lines = []
    for p in paths:
        p = Path(p).resolve()
        try:
            lines.append(str(p.relative_to(root)))
        except ValueError:
            lines.append(str(p))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> List[Path]:
    root = Path(path).parent
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entry = Path(line)
        entries.append(entry if entry.is_absolute() else root / entry)
    return entries


class SceneSet:
    """Lazy query set over the scenes of a manifest."""

    def __init__(self, paths: List[Path]):
        self.paths = list(paths)
        self._filters: List[Callable[[SceneSample], bool]] = []
        self._limit: Optional[int] = None
        self._offset: int = 0

    @classmethod
    def from_manifest(cls, manifest: Union[str, Path]) -> "SceneSet":
        return cls(read_manifest(manifest))

    def filter(self, predicate: Callable[[SceneSample], bool]) -> "SceneSet":
        """Add a predicate on loaded scenes."""
        qs = self._clone()
        qs._filters = [*self._filters, predicate]
        return qs

    def limit(self, limit: int) -> "SceneSet":
        """Set maximum number of scenes to return."""
        qs = self._clone()
        qs._limit = limit
        return qs

    def offset(self, offset: int) -> "SceneSet":
        """Set offset for pagination."""
        qs = self._clone()
        qs._offset = offset
        return qs

    def _clone(self) -> "SceneSet":
        qs = SceneSet(self.paths)
        qs._filters = list(self._filters)
        qs._limit = self._limit
        qs._offset = self._offset
        return qs

    def __iter__(self):
        skipped = yielded = 0
        for path in self.paths:
            if self._limit is not None and yielded >= self._limit:
                return
            scene = read_scene(path)
            if not all(predicate(scene) for predicate in self._filters):
                continue
            if skipped < self._offset:
                skipped += 1
                continue
            yielded += 1
            yield scene

    def all(self) -> List[SceneSample]:
        """Return all scenes matching the query."""
        return list(self)

    def get(self, scene_id: Optional[str] = None) -> SceneSample:
        """Get a single scene matching the query (and the scene id, if given)."""
        qs = self.filter(lambda s: s.scene_id == scene_id) if scene_id is not None else self
        results = qs.limit(2).all()
        if len(results) == 0:
            raise DoesNotExist(f"No scene matching query (scene_id={scene_id!r}).")
        if len(results) > 1:
            raise MultipleObjectsReturned(f"get() returned more than one scene (scene_id={scene_id!r}).")
        return results[0]

    def count(self) -> int:
        if not self._filters:
            available = max(len(self.paths) - self._offset, 0)
            return available if self._limit is None else min(available, self._limit)
        return sum(1 for _ in self)

    def first(self) -> Optional[SceneSample]:
        results = self.limit(1).all()
        return results[0] if results else None

    def last(self) -> Optional[SceneSample]:
        results = self.all()
        return results[-1] if results else None


class SceneDataset(Dataset):
    """Scenes of a SceneSet, optionally augmented with a seed derived from (seed, epoch, index)."""

    def __init__(self, scenes: SceneSet, seed: int = 0, augment: bool = True):
        self.paths = scenes.paths
        self.seed = seed
        self.augment = augment
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> SceneSample:
        scene = read_scene(self.paths[index])
        if self.augment:
            scene = augment(scene, derive_seed(self.seed, self.epoch, index))
        return scene


def _generate_one(args) -> Dict:
    cfg_dict, index, out_dir = args
    cfg = GenerationConfig.from_dict(cfg_dict)
    seed = cfg.seed + index
    rng = np.random.default_rng(derive_seed(cfg.seed, index, 1))
    num_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    scene = generate_scene(
        num_objects=num_objects,
        noise_sigma=cfg.noise_sigma,
        dropout_fraction=cfg.dropout_fraction,
        seed=seed,
        points_per_object=cfg.points_per_object,
        floor_points=cfg.floor_points,
        shape_variation=cfg.shape_variation,
    )
    path = Path(out_dir) / f"scene_{index:05d}.dscn"
    write_scene(scene, path)
    return {
        "path": path.name,
        "points": scene.num_points,
        "classes": [inst.class_id for inst in scene.instances],
    }


def build_dataset(
    cfg: GenerationConfig,
    out_dir: Union[str, Path],
    workers: int = 0,
    force: bool = False,
) -> Path:
    """
    Generate `cfg.num_scenes` scene files, a manifest and a JSON summary.

    Args:
        cfg: generation configuration
        out_dir: target directory
        workers: process count for generation; results are merged in scene order
        force: allow writing into a non-empty directory

    Returns:
        Path of the manifest
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise InvalidArgumentError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(cfg.to_dict(), i, str(out)) for i in range(cfg.num_scenes)]
    if workers > 0:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, jobs))
    else:
        results = [_generate_one(job) for job in jobs]

    manifest = out / MANIFEST_NAME
    write_manifest([out / r["path"] for r in results], manifest)

    histogram = Counter(c for r in results for c in r["classes"])
    counts = [r["points"] for r in results]
    summary = {
        "scenes": len(results),
        "instances": sum(histogram.values()),
        "class_histogram": {name: histogram.get(i, 0) for i, name in enumerate(CLASS_NAMES)},
        "points": {"min": min(counts), "max": max(counts), "mean": float(np.mean(counts)), "total": int(sum(counts))},
        "config": cfg.to_dict(),
    }
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote %d scenes to %s", len(results), out)
    return manifest
