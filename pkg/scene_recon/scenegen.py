"""
Procedural generation, serialization and augmentation of synthetic partial-scan scenes.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import List, Union

import numpy as np
import trimesh

from .exceptions import GenerationError, InvalidArgumentError, SceneFormatError
from .geometry3d import OrientedBox3D, TriangleMesh, axis_aligned_iou, rotate_z, world_aabb
from .shapecodec import place_mesh, primitive_mesh
from .utils import wrap_angle

logger = logging.getLogger(__name__)

MAGIC = b"DSCN"
VERSION = 1
MIN_INSTANCE_POINTS = 20
MAX_PLACEMENT_ATTEMPTS = 1000
MAX_OVERLAP_IOU = 0.05

_HEADER = struct.Struct("<4sIII")
_RECORD = np.dtype(
    [("class_id", "<u4"), ("box", "<f4", (7,)), ("kind", "<u4"), ("dims", "<f4", (3,))]
)


class ShapeKind(IntEnum):
    CUBOID = 0
    CYLINDER = 1
    ELLIPSOID = 2


CLASS_NAMES = tuple(kind.name.lower() for kind in ShapeKind)
NUM_CLASSES = len(CLASS_NAMES)

# Per-kind (xy range, z range) of box sizes in meters
_SIZE_RANGES = {
    ShapeKind.CUBOID: ((0.5, 1.2), (0.4, 0.9)),
    ShapeKind.CYLINDER: ((0.3, 0.7), (0.4, 1.0)),
    ShapeKind.ELLIPSOID: ((0.3, 0.8), (0.3, 0.8)),
}


@dataclass(frozen=True, eq=False)
class ShapeParams:
    kind: ShapeKind
    dims: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(dims <= 0) or np.any(dims > 1):
            raise InvalidArgumentError(f"shape dims must lie in (0, 1], got {dims}")
        object.__setattr__(self, "kind", ShapeKind(int(self.kind)))
        object.__setattr__(self, "dims", dims)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ShapeParams):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.dims, other.dims)

    def canonical_mesh(self) -> TriangleMesh:
        return primitive_mesh(self.kind, self.dims)


@dataclass(frozen=True, eq=False)
class SceneInstance:
    class_id: int
    box: OrientedBox3D
    shape: ShapeParams

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneInstance):
            return NotImplemented
        return self.class_id == other.class_id and self.box == other.box and self.shape == other.shape

    def mesh(self) -> TriangleMesh:
        """Complete ground-truth mesh in scene coordinates."""
        return place_mesh(self.shape.canonical_mesh(), self.box)


@dataclass(eq=False)
class SceneSample:
    """Points of one scene and per-instance ground truth. Ids of -1 mark background."""

    points: np.ndarray
    instance_ids: np.ndarray
    instances: List[SceneInstance]
    scene_id: str = ""

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.instance_ids = np.ascontiguousarray(self.instance_ids, dtype=np.int32).reshape(-1)
        if len(self.points) != len(self.instance_ids):
            raise InvalidArgumentError("points and instance_ids differ in length")
        if np.any(self.instance_ids < -1) or np.any(self.instance_ids >= len(self.instances)):
            raise InvalidArgumentError("instance id out of range")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.instance_ids, other.instance_ids)
            and self.instances == other.instances
        )

    @property
    def num_points(self) -> int:
        return len(self.points)

    @property
    def num_instances(self) -> int:
        return len(self.instances)

    def instance_mask(self, k: int) -> np.ndarray:
        return self.instance_ids == k

    def instance_points(self, k: int) -> np.ndarray:
        return self.points[self.instance_ids == k].astype(np.float64)


def _f32(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def _f32_yaw(yaw: float) -> float:
    value = np.float32(wrap_angle(yaw))
    while abs(float(value)) > math.pi:
        value = np.nextafter(value, np.float32(0))
    return float(value)


def _sample_box(rng: np.random.Generator, kind: ShapeKind, room: float) -> OrientedBox3D:
    (xy_lo, xy_hi), (z_lo, z_hi) = _SIZE_RANGES[kind]
    size = np.array([rng.uniform(xy_lo, xy_hi), rng.uniform(xy_lo, xy_hi), rng.uniform(z_lo, z_hi)])
    yaw = rng.uniform(-math.pi, math.pi)
    reach = 0.5 * float(np.hypot(size[0], size[1]))
    xy = rng.uniform(-room / 2 + reach, room / 2 - reach, size=2)
    center = np.array([xy[0], xy[1], size[2] / 2])
    return OrientedBox3D(center=_f32(center), size=_f32(size), yaw=_f32_yaw(yaw))


def _occlude(points: np.ndarray, center: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices kept after removing a contiguous azimuthal sector holding `fraction` of the points."""
    start = rng.uniform(-math.pi, math.pi)
    azimuth = np.arctan2(points[:, 1] - center[1], points[:, 0] - center[0])
    relative = np.remainder(azimuth - start, 2 * math.pi)
    order = np.argsort(relative, kind="stable")
    removed = int(math.floor(fraction * len(points)))
    removed = min(removed, len(points) - MIN_INSTANCE_POINTS)
    return np.sort(order[max(removed, 0) :])


def generate_scene(
    num_objects: int,
    noise_sigma: float,
    dropout_fraction: float,
    seed: int,
    points_per_object: int = 1024,
    floor_points: int = 2048,
    shape_variation: float = 0.0,
) -> SceneSample:
    """
    Generate one synthetic scene.

    Objects stand on a floor plane with random yaw and non-overlapping boxes. Each
    object surface is sampled, an angular sector is removed to simulate occlusion and
    Gaussian noise (truncated at 3 sigma) is added.

    Args:
        num_objects: objects in the scene, 1..16
        noise_sigma: noise scale in meters
        dropout_fraction: fraction of each object's points removed, in [0, 1)
        seed: seed of the PCG64 generator driving every random draw
        points_per_object: surface samples per object before occlusion
        floor_points: background samples on the floor
        shape_variation: dims drawn from [1 - v, 1]; 0 keeps boxes tight

    Returns:
        SceneSample

    Raises:
        GenerationError: if objects cannot be placed within 1000 attempts
    """
    if not 1 <= num_objects <= 16:
        raise InvalidArgumentError("num_objects must be in [1, 16]")
    if not 0 <= dropout_fraction < 1:
        raise InvalidArgumentError("dropout_fraction must be in [0, 1)")
    if noise_sigma < 0:
        raise InvalidArgumentError("noise_sigma must be non-negative")

    rng = np.random.default_rng(seed)
    room = 1.5 + 1.2 * math.ceil(math.sqrt(num_objects))

    instances: List[SceneInstance] = []
    footprints: List[OrientedBox3D] = []
    attempts = 0
    while len(instances) < num_objects:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise GenerationError(
                f"placed {len(instances)} of {num_objects} objects in {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        kind = ShapeKind(int(rng.integers(NUM_CLASSES)))
        box = _sample_box(rng, kind, room)
        footprint = world_aabb(box)
        if any(axis_aligned_iou(footprint, other) >= MAX_OVERLAP_IOU for other in footprints):
            continue
        if shape_variation > 0:
            dims = _f32(rng.uniform(1.0 - shape_variation, 1.0, size=3))
        else:
            dims = np.ones(3)
        instances.append(SceneInstance(class_id=int(kind), box=box, shape=ShapeParams(kind=kind, dims=dims)))
        footprints.append(footprint)

    clouds, ids = [], []

    floor = np.zeros((floor_points, 3))
    floor[:, :2] = rng.uniform(-room / 2, room / 2, size=(floor_points, 2))
    under_object = np.zeros(floor_points, dtype=bool)
    for instance in instances:
        lifted = floor.copy()
        lifted[:, 2] = instance.box.center[2]
        under_object |= instance.box.contains(lifted)
    floor = floor[~under_object]
    clouds.append(floor)
    ids.append(np.full(len(floor), -1))

    for k, instance in enumerate(instances):
        mesh = instance.mesh().to_trimesh()
        surface, _ = trimesh.sample.sample_surface(mesh, points_per_object, seed=int(rng.integers(2**31)))
        keep = _occlude(surface, instance.box.center, dropout_fraction, rng)
        clouds.append(surface[keep])
        ids.append(np.full(len(keep), k))

    points = np.concatenate(clouds)
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, size=points.shape)
        points = points + np.clip(noise, -3 * noise_sigma, 3 * noise_sigma)

    logger.debug("generated scene seed=%d with %d objects, %d points", seed, num_objects, len(points))
    return SceneSample(points=points, instance_ids=np.concatenate(ids), instances=instances, scene_id=f"seed{seed}")


def write_scene(scene: SceneSample, path: Union[str, Path]) -> None:
    records = np.zeros(scene.num_instances, dtype=_RECORD)
    for k, instance in enumerate(scene.instances):
        box = instance.box
        records[k]["class_id"] = instance.class_id
        records[k]["box"] = np.concatenate([box.center, box.size, [box.yaw]])
        records[k]["kind"] = int(instance.shape.kind)
        records[k]["dims"] = instance.shape.dims

    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, scene.num_points, scene.num_instances))
        fh.write(scene.points.astype("<f4").tobytes())
        fh.write(scene.instance_ids.astype("<i4").tobytes())
        fh.write(records.tobytes())


def read_scene(path: Union[str, Path]) -> SceneSample:
    """
    Read a scene file.

    Raises:
        SceneFormatError: naming the offending field for bad magic, version,
            truncated payloads or out-of-range values
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SceneFormatError("header", f"file has {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, n, k = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SceneFormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise SceneFormatError("version", f"expected {VERSION}, got {version}")

    offset = _HEADER.size
    sections = (("points", n * 12), ("instance_ids", n * 4), ("instances", k * _RECORD.itemsize))
    chunks = {}
    for name, nbytes in sections:
        if offset + nbytes > len(data):
            raise SceneFormatError(name, f"truncated: declared {nbytes} bytes, {len(data) - offset} available")
        chunks[name] = data[offset : offset + nbytes]
        offset += nbytes
    if offset != len(data):
        raise SceneFormatError("payload", f"{len(data) - offset} trailing bytes")

    points = np.frombuffer(chunks["points"], dtype="<f4").reshape(n, 3)
    instance_ids = np.frombuffer(chunks["instance_ids"], dtype="<i4")
    records = np.frombuffer(chunks["instances"], dtype=_RECORD)
    if np.any(instance_ids < -1) or np.any(instance_ids >= k):
        raise SceneFormatError("instance_ids", "instance id out of range")

    instances = []
    for record in records:
        if record["kind"] >= NUM_CLASSES:
            raise SceneFormatError("kind", f"unknown shape kind {record['kind']}")
        values = record["box"].astype(np.float64)
        try:
            box = OrientedBox3D(center=values[:3], size=values[3:6], yaw=float(values[6]))
            shape = ShapeParams(kind=int(record["kind"]), dims=record["dims"].astype(np.float64))
        except InvalidArgumentError as e:
            raise SceneFormatError("instances", str(e)) from e
        instances.append(SceneInstance(class_id=int(record["class_id"]), box=box, shape=shape))

    return SceneSample(points=points, instance_ids=instance_ids, instances=instances, scene_id=Path(path).stem)


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool = False
    rotate: bool = False
    angle: float = 0.0
    scale_enabled: bool = False
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not (self.flip or self.rotate or self.scale_enabled)


def draw_augmentation(seed: int) -> AugmentDraw:
    rng = np.random.default_rng(seed)
    coins = rng.random(3)
    angle = rng.uniform(-math.pi, math.pi)
    scale = rng.uniform(0.9, 1.1)
    return AugmentDraw(
        flip=bool(coins[0] < 0.5),
        rotate=bool(coins[1] < 0.5),
        angle=float(angle),
        scale_enabled=bool(coins[2] < 0.5),
        scale=float(scale),
    )


def apply_augmentation(scene: SceneSample, draw: AugmentDraw) -> SceneSample:
    """Apply flip, then z-rotation, then scaling to points and boxes alike."""
    if draw.is_identity:
        return SceneSample(scene.points.copy(), scene.instance_ids.copy(), list(scene.instances), scene.scene_id)

    points = scene.points.astype(np.float64)
    boxes = [(inst.box.center.copy(), inst.box.size.copy(), inst.box.yaw) for inst in scene.instances]

    if draw.flip:
        points[:, 0] = -points[:, 0]
        boxes = [(c * np.array([-1.0, 1.0, 1.0]), s, math.pi - yaw) for c, s, yaw in boxes]
    if draw.rotate:
        points = rotate_z(points, draw.angle)
        boxes = [(rotate_z(c, draw.angle), s, yaw + draw.angle) for c, s, yaw in boxes]
    if draw.scale_enabled:
        points = points * draw.scale
        boxes = [(c * draw.scale, s * draw.scale, yaw) for c, s, yaw in boxes]

    instances = [
        SceneInstance(
            class_id=inst.class_id,
            box=OrientedBox3D(center=c, size=s, yaw=float(wrap_angle(yaw))),
            shape=inst.shape,
        )
        for inst, (c, s, yaw) in zip(scene.instances, boxes)
    ]
    return SceneSample(points, scene.instance_ids.copy(), instances, scene.scene_id)


def augment(scene: SceneSample, seed: int) -> SceneSample:
    return apply_augmentation(scene, draw_augmentation(seed))
