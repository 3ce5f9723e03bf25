"""
Geometric primitives and box mathematics shared by the rest of the package.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import trimesh

from .exceptions import EmptyInputError, InvalidArgumentError
from .utils import wrap_angle

SIZE_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class OrientedBox3D:
    """Box with a yaw about the vertical axis. Sizes are full extents in meters."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    iou_score: Optional[float] = None

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size))):
            raise InvalidArgumentError("box center and size must be finite")
        if np.any(size <= 0):
            raise InvalidArgumentError(f"box size must be strictly positive, got {size}")
        yaw = float(self.yaw)
        if not np.isfinite(yaw):
            raise InvalidArgumentError("box yaw must be finite")
        if not -np.pi <= yaw <= np.pi:
            yaw = float(wrap_angle(yaw))
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", yaw)
        if self.iou_score is not None:
            object.__setattr__(self, "iou_score", float(self.iou_score))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OrientedBox3D):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.size, other.size)
            and self.yaw == other.yaw
            and self.iou_score == other.iou_score
        )

    def replace(self, **kwargs) -> "OrientedBox3D":
        values = {"center": self.center, "size": self.size, "yaw": self.yaw, "iou_score": self.iou_score}
        values.update(kwargs)
        return OrientedBox3D(**values)

    def corners(self) -> np.ndarray:
        """The 8 corners in scene coordinates."""
        signs = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
        return rotate_z(signs * self.size, self.yaw) + self.center

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        local = rotate_z(np.asarray(points, dtype=np.float64) - self.center, -self.yaw)
        return np.all(np.abs(local) <= self.size / 2 + margin, axis=-1)

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "yaw": self.yaw,
            "iou_score": self.iou_score,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OrientedBox3D":
        return cls(
            center=np.asarray(data["center"], dtype=np.float64),
            size=np.asarray(data["size"], dtype=np.float64),
            yaw=float(data["yaw"]),
            iou_score=data.get("iou_score"),
        )


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise InvalidArgumentError("face index out of range")
        degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if np.any(degenerate):
            raise InvalidArgumentError(f"{int(degenerate.sum())} degenerate face(s)")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(self.faces, other.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> "TriangleMesh":
        faces = np.asarray(mesh.faces, dtype=np.int64)
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        return cls(vertices=np.asarray(mesh.vertices, dtype=np.float64), faces=faces[keep])

    @classmethod
    def concatenate(cls, meshes) -> "TriangleMesh":
        vertices, faces, offset = [], [], 0
        for mesh in meshes:
            vertices.append(mesh.vertices)
            faces.append(mesh.faces + offset)
            offset += len(mesh.vertices)
        if not vertices:
            return cls(vertices=np.zeros((0, 3)))
        return cls(vertices=np.concatenate(vertices), faces=np.concatenate(faces))


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate points about the vertical axis by `angle` radians."""
    points = np.asarray(points, dtype=np.float64)
    if not np.isfinite(angle) or not np.all(np.isfinite(points)):
        raise InvalidArgumentError("rotate_z requires finite points and angle")
    c, s = np.cos(angle), np.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rotation.T


def aabb_from_points(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds of a point set as (center, size)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyInputError("aabb_from_points needs at least one point")
    lo, hi = points.min(axis=0), points.max(axis=0)
    return (lo + hi) / 2, hi - lo


def giou3d_tensor(
    center_a: torch.Tensor,
    size_a: torch.Tensor,
    center_b: torch.Tensor,
    size_b: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Axis-aligned 3D GIoU and IoU with broadcasting over leading dimensions.

    Yaw is ignored. Sizes are clamped to SIZE_EPS.

    Returns:
        (giou, iou) tensors of the broadcast shape
    """
    size_a = size_a.clamp_min(SIZE_EPS)
    size_b = size_b.clamp_min(SIZE_EPS)
    lo_a, hi_a = center_a - size_a / 2, center_a + size_a / 2
    lo_b, hi_b = center_b - size_b / 2, center_b + size_b / 2

    overlap = (torch.minimum(hi_a, hi_b) - torch.maximum(lo_a, lo_b)).clamp_min(0)
    inter = overlap.prod(-1)
    vol_a = size_a.prod(-1)
    vol_b = size_b.prod(-1)
    union = vol_a + vol_b - inter
    hull = (torch.maximum(hi_a, hi_b) - torch.minimum(lo_a, lo_b)).prod(-1)

    iou = inter / union
    giou = iou - (hull - union) / hull
    return giou, iou


def pairwise_giou3d(
    centers_a: torch.Tensor, sizes_a: torch.Tensor, centers_b: torch.Tensor, sizes_b: torch.Tensor
) -> torch.Tensor:
    """(A, 3) x (B, 3) boxes -> (A, B) GIoU."""
    giou, _ = giou3d_tensor(centers_a[:, None], sizes_a[:, None], centers_b[None], sizes_b[None])
    return giou


def _box_tensors(box: OrientedBox3D) -> Tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(box.center, dtype=torch.float64), torch.as_tensor(box.size, dtype=torch.float64)


def giou3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Generalized IoU of the axis-aligned representations of two boxes."""
    giou, _ = giou3d_tensor(*_box_tensors(a), *_box_tensors(b))
    return float(giou)


def axis_aligned_iou(a: OrientedBox3D, b: OrientedBox3D) -> float:
    _, iou = giou3d_tensor(*_box_tensors(a), *_box_tensors(b))
    return float(iou)


def world_aabb(box: OrientedBox3D) -> OrientedBox3D:
    """Axis-aligned box enclosing a rotated box."""
    center, size = aabb_from_points(box.corners())
    return OrientedBox3D(center=center, size=np.maximum(size, SIZE_EPS), yaw=0.0)


def voxel_iou_boxes(a: OrientedBox3D, b: OrientedBox3D, resolution: int = 64) -> float:
    """
    IoU of two rotated boxes by rasterization on a shared grid.

    Args:
        a, b: boxes, yaw respected
        resolution: voxels across the longest axis of the union bounds

    Returns:
        IoU in [0, 1]
    """
    if resolution < 8:
        raise InvalidArgumentError("resolution must be at least 8")
    corners = np.concatenate([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pitch = float((hi - lo).max()) / resolution
    counts = np.maximum(np.ceil((hi - lo) / pitch).astype(int), 1)
    axes = [lo[i] + (np.arange(counts[i]) + 0.5) * pitch for i in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    in_a = a.contains(centers)
    in_b = b.contains(centers)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def write_obj(mesh: TriangleMesh, path: Union[str, Path]) -> None:
    """Export through trimesh; an empty mesh gives an empty file."""
    path = Path(path)
    if mesh.is_empty:
        path.write_text("", encoding="utf-8")
        return
    mesh.to_trimesh().export(str(path), file_type="obj", include_normals=False, digits=12)


def read_obj(path: Union[str, Path]) -> TriangleMesh:
    """Load through trimesh, which resolves relative indices and triangulates polygons."""
    path = Path(path)
    if not path.read_text(encoding="utf-8").strip():
        return TriangleMesh(vertices=np.zeros((0, 3)))
    loaded = trimesh.load(str(path), file_type="obj", force="mesh", process=False)
    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
        return TriangleMesh(vertices=np.zeros((0, 3)))
    return TriangleMesh.from_trimesh(loaded)
