"""
Example: generate a few scenes, train briefly, reconstruct one scene and evaluate.
"""

import tempfile
from pathlib import Path

from scene_recon import GenerationConfig, SceneSet, TrainConfig, build_dataset, configure, evaluate, train
from scene_recon.config import MebrConfig
from scene_recon.exceptions import DoesNotExist
from scene_recon.geometry3d import write_obj
from scene_recon.model import scene_mesh


def main():
    print("=== scene_recon example ===")

    # 1. Compute context
    print("\n1. Configuring runtime...")
    runtime = configure(device="cpu", threads=1)
    print(f"✓ {runtime.device}, {runtime.dtype}")

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)

        # 2. Synthetic data
        print("\n2. Generating scenes...")
        manifest = build_dataset(GenerationConfig(num_scenes=4, objects_max=3, seed=7), root / "data")
        scenes = SceneSet.from_manifest(manifest)
        print(f"✓ {scenes.count()} scenes listed in {manifest.name}")

        # 3. Query the manifest
        print("\n3. Querying scenes...")
        crowded = scenes.filter(lambda s: s.num_instances >= 3).all()
        print(f"✓ scenes with three objects: {len(crowded)}")
        try:
            scene = scenes.get(scene_id="scene_00000")
            print(f"✓ {scene.scene_id}: {scene.num_points} points, {scene.num_instances} objects")
        except DoesNotExist:
            print("✗ scene not found")
            return

        # 4. Train a small model
        print("\n4. Training...")
        cfg = TrainConfig(epochs=2, batch_size=2, grid_size=32, num_queries=8, seed=7)
        checkpoint = train(manifest, cfg, root / "run")
        print(f"✓ trained for {checkpoint.step} steps")

        # 5. Reconstruct one scene
        print("\n5. Reconstructing...")
        model = checkpoint.build_model()
        detections = model.predict(scene.points, MebrConfig())
        for det in detections:
            print(f"  - {det.class_name}: confidence {det.confidence:.3f}, box {det.box_source}")
        if detections:
            write_obj(scene_mesh(detections), root / "scene.obj")
            print("✓ scene mesh written")

        # 6. Evaluate
        print("\n6. Evaluating...")
        report = evaluate(checkpoint, manifest, mebr=True)
        print(f"✓ mAP@IoU0.25 = {report.map_iou_25:.3f}, Prec@0.25 = {report.prec_25:.3f}")


if __name__ == "__main__":
    main()
