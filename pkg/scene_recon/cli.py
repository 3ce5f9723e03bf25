"""
Command-line entry points for scene_recon.

Exit codes: 0 on success, 1 on invalid input, 2 on runtime failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import EvalConfig, GenerationConfig, MebrConfig, TrainConfig
from .dataset import MANIFEST_NAME, build_dataset
from .exceptions import DoesNotExist, SchemaError
from .geometry3d import write_obj
from .metrics import EvalReport, format_table
from .model import DetectedObject, refine_detections, scene_mesh
from .runtime import configure
from .scenegen import read_scene
from .trainer import Checkpoint, evaluate, run_ablation, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2

DATA_ENV = "SCENE_RECON_DATA"
PREDICTIONS_SCHEMA = 1


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> dict:
    return {key: getattr(args, attr) for key, attr in mapping.items() if getattr(args, attr, None) is not None}


def _require_file(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")
    return Path(path)


def _mebr_config(args: argparse.Namespace) -> MebrConfig:
    return MebrConfig(d0=args.d0) if args.d0 is not None else MebrConfig()


def cmd_gen_data(args: argparse.Namespace) -> int:
    base = GenerationConfig.read(args.config) if args.config else GenerationConfig()
    cfg = base.replace(
        **_overrides(
            args,
            {
                "num_scenes": "scenes",
                "objects_min": "objects_min",
                "objects_max": "objects_max",
                "noise_sigma": "noise",
                "dropout_fraction": "dropout",
                "points_per_object": "points_per_object",
                "floor_points": "floor_points",
                "shape_variation": "shape_variation",
                "seed": "seed",
            },
        )
    )
    manifest = build_dataset(cfg, args.out or data_root(), workers=args.workers, force=args.force)
    print(manifest)
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    base = TrainConfig.read(args.config) if args.config else TrainConfig()
    return base.replace(
        **_overrides(
            args,
            {
                "epochs": "epochs",
                "batch_size": "batch_size",
                "seed": "seed",
                "max_steps": "max_steps",
                "workers": "workers",
                "lr_max": "lr_max",
                "num_queries": "num_queries",
                "grid_size": "grid_size",
                "sgdq_enabled": "sgdq",
                "hybrid_matching_enabled": "hybrid",
                "mebr_enabled": "mebr",
                "deep_supervision_enabled": "deep_supervision",
                "augment": "augment",
            },
        )
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    manifest = _require_file(args.manifest or data_root() / MANIFEST_NAME, "manifest")
    val = _require_file(args.val_manifest, "validation manifest") if args.val_manifest else None
    checkpoint = train(manifest, cfg, args.out, val_manifest=val, progress=args.progress)
    logger.info("finished at step %d (epoch %d)", checkpoint.step, checkpoint.epoch)
    print(Path(args.out) / "best.pt")
    return EXIT_OK


def _eval_config(args: argparse.Namespace) -> EvalConfig:
    base = EvalConfig.read(args.eval_config) if args.eval_config else EvalConfig()
    return base.replace(**_overrides(args, {"voxel_grid": "voxel_grid", "ap_matching": "ap_matching"}))


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = _require_file(args.checkpoint, "checkpoint")
    manifest = _require_file(args.manifest or data_root() / MANIFEST_NAME, "manifest")
    report = evaluate(
        checkpoint,
        manifest,
        mebr=args.mebr,
        eval_cfg=_eval_config(args),
        mebr_cfg=_mebr_config(args),
        workers=args.workers,
    )
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _write_meshes(detections: List[DetectedObject], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for k, det in enumerate(detections):
        write_obj(det.mesh(), out / f"instance_{k:02d}_{det.class_name}.obj")
    write_obj(scene_mesh(detections), out / "scene.obj")


def _predictions_document(scene_path: Path, mebr: bool, detections: List[DetectedObject]) -> dict:
    return {
        "schema": PREDICTIONS_SCHEMA,
        "scene": str(scene_path),
        "mebr": mebr,
        "instances": [det.to_dict() for det in detections],
    }


def cmd_infer(args: argparse.Namespace) -> int:
    scene_path = _require_file(args.scene, "scene")
    checkpoint_path = _require_file(args.checkpoint, "checkpoint")
    scene = read_scene(scene_path)
    model = Checkpoint.load(checkpoint_path).build_model()
    detections = model.predict(scene.points, _mebr_config(args) if args.mebr else None)

    out = Path(args.out)
    _write_meshes(detections, out)
    document = _predictions_document(scene_path, args.mebr, detections)
    (out / "predictions.json").write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    logger.info("%d instances written to %s", len(detections), out)
    return EXIT_OK


def read_predictions(path: Path) -> List[DetectedObject]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"invalid JSON: {e}") from e
    if not isinstance(document, dict) or document.get("schema") != PREDICTIONS_SCHEMA:
        raise SchemaError("schema", f"expected {PREDICTIONS_SCHEMA}")
    instances = document.get("instances")
    if not isinstance(instances, list):
        raise SchemaError("instances", "must be a list")
    detections = []
    for i, record in enumerate(instances):
        try:
            detections.append(DetectedObject.from_dict(record))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"instances[{i}]", str(e)) from e
    return detections


def cmd_export_mesh(args: argparse.Namespace) -> int:
    scene_path = _require_file(args.scene, "scene")
    scene = read_scene(scene_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.gt:
        for k, inst in enumerate(scene.instances):
            write_obj(inst.mesh(), out / f"gt_{k:02d}_{inst.shape.kind.name.lower()}.obj")
        return EXIT_OK

    if not args.predictions:
        raise UsageError("export-mesh needs --gt or --predictions")
    detections = read_predictions(_require_file(args.predictions, "predictions"))
    if args.mebr:
        detections = refine_detections(detections, scene.points, _mebr_config(args))
    _write_meshes(detections, out)
    document = _predictions_document(scene_path, args.mebr, detections)
    (out / "predictions.json").write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    labels = args.labels or [Path(p).stem for p in args.eval]
    if len(labels) != len(args.eval):
        raise UsageError("--labels must name every --eval file")
    rows = []
    for label, path in zip(labels, args.eval):
        rows.append((label, EvalReport.from_json(_require_file(path, "eval report").read_text(encoding="utf-8"))))
    table = format_table(rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(table)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    train_manifest = _require_file(args.manifest, "manifest")
    val_manifest = _require_file(args.val_manifest, "validation manifest")
    rows = run_ablation(train_manifest, val_manifest, cfg, args.out, seeds=args.seeds)
    for row in rows:
        print(f"{row.label}\t{row.mean('map_iou_25'):.4f}\t{row.mean('map_cd_01'):.4f}")
    return EXIT_OK


def _add_runtime_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--device", default=None, help="torch device (default: cuda if available, else cpu)")
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="default: %(default)s")
    parser.add_argument("--threads", type=int, default=None, help="intra-op threads (default: torch's choice)")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TrainConfig file (key = value lines)")
    parser.add_argument("--epochs", type=int, help="default: 100")
    parser.add_argument("--batch-size", type=int, help="default: 4")
    parser.add_argument("--seed", type=int, help="default: 0")
    parser.add_argument("--max-steps", type=int, help="stop early; default: 0 (no limit)")
    parser.add_argument("--workers", type=int, help="data loading workers; default: 0")
    parser.add_argument("--lr-max", type=float, help="default: 1e-4")
    parser.add_argument("--num-queries", type=int, help="default: 20")
    parser.add_argument("--grid-size", type=int, help="default: 64")
    parser.add_argument("--sgdq", type=on_off, help="on|off, default: on")
    parser.add_argument("--hybrid", type=on_off, help="on|off, default: on")
    parser.add_argument("--mebr", type=on_off, help="on|off for validation, default: on")
    parser.add_argument("--deep-supervision", type=on_off, help="on|off, default: on")
    parser.add_argument("--augment", type=on_off, help="on|off, default: on")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="scene-recon", description="Object-level scene reconstruction from partial scans.")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="default: %(default)s")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen-data", help="generate synthetic scenes")
    p.add_argument("--out", type=Path, help=f"target directory (default: ${DATA_ENV} or ./data)")
    p.add_argument("--config", type=Path, help="GenerationConfig file")
    p.add_argument("--scenes", type=int, help="default: 200")
    p.add_argument("--objects-min", type=int, help="default: 2")
    p.add_argument("--objects-max", type=int, help="default: 6")
    p.add_argument("--noise", type=float, help="point noise sigma in meters; default: 0.005")
    p.add_argument("--dropout", type=float, help="occluded fraction per object; default: 0.3")
    p.add_argument("--points-per-object", type=int, help="default: 1024")
    p.add_argument("--floor-points", type=int, help="default: 2048")
    p.add_argument("--shape-variation", type=float, help="default: 0")
    p.add_argument("--seed", type=int, help="default: 0")
    p.add_argument("--workers", type=int, default=0, help="default: %(default)s")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", type=Path, help=f"default: ${DATA_ENV}/{MANIFEST_NAME}")
    p.add_argument("--val-manifest", type=Path, help="validation scenes")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    _add_train_flags(p)
    _add_runtime_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help=f"default: ${DATA_ENV}/{MANIFEST_NAME}")
    p.add_argument("--mebr", type=on_off, default=True, help="on|off, default: on")
    p.add_argument("--d0", type=float, help="refinement threshold in meters; default: 0.1")
    p.add_argument("--eval-config", type=Path, help="EvalConfig file")
    p.add_argument("--voxel-grid", type=int, help="default: 32")
    p.add_argument("--ap-matching", choices=("greedy", "hungarian"), help="default: greedy")
    p.add_argument("--workers", type=int, default=0, help="default: %(default)s")
    p.add_argument("--out", type=Path, help="report JSON (default: stdout)")
    _add_runtime_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="reconstruct one scene")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--mebr", type=on_off, default=True, help="on|off, default: on")
    p.add_argument("--d0", type=float, help="default: 0.1")
    p.add_argument("--out", type=Path, required=True)
    _add_runtime_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-mesh", help="write ground-truth or predicted meshes of a scene")
    p.add_argument("--scene", type=Path, required=True)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--gt", action="store_true", help="export ground-truth meshes")
    source.add_argument("--predictions", type=Path, help="predictions JSON (schema 1)")
    p.add_argument("--mebr", type=on_off, default=False, help="refine predicted boxes; on|off, default: off")
    p.add_argument("--d0", type=float, help="default: 0.1")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("report", help="tabulate eval reports")
    p.add_argument("--eval", type=Path, nargs="+", required=True)
    p.add_argument("--labels", nargs="+", help="row labels (default: file stems)")
    p.add_argument("--out", type=Path, help="table file (default: stdout)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="train and evaluate the ablation rows")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--val-manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="default: 0 1 2")
    _add_train_flags(p)
    _add_runtime_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        if hasattr(args, "device"):
            configure(device=args.device, dtype=args.dtype, threads=args.threads)
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError, DoesNotExist) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except Exception as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
