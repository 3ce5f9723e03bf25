"""
Ground-truth latent encoding and latent-to-mesh decoding for the primitive shapes.

Latent layout: one-hot kind (3 dims), relative dims (3 dims), zero padding.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Tuple

import numpy as np
import trimesh

from .geometry3d import OrientedBox3D, TriangleMesh, rotate_z

if TYPE_CHECKING:
    from .scenegen import ShapeParams

NUM_KINDS = 3
DEFAULT_SHAPE_DIM = 8
GT_SIGMA = 0.05
MIN_DIM = 0.05
SEGMENTS = 32


@dataclass(frozen=True, eq=False)
class ShapeLatent:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if mu.shape != log_sigma.shape or not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_sigma))):
            raise ValueError("ShapeLatent needs finite mu and log_sigma of equal shape")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", log_sigma)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


def encode_gt(shape: "ShapeParams", shape_dim: int = DEFAULT_SHAPE_DIM) -> ShapeLatent:
    mu = np.zeros(shape_dim)
    mu[int(shape.kind)] = 1.0
    mu[NUM_KINDS : NUM_KINDS + 3] = shape.dims
    return ShapeLatent(mu=mu, log_sigma=np.full(shape_dim, np.log(GT_SIGMA)))


def latent_to_params(z: np.ndarray) -> Tuple[int, np.ndarray]:
    """(kind, clamped dims) encoded by a latent; ties go to the lowest kind index."""
    z = np.asarray(z, dtype=np.float64)
    kind = int(np.argmax(z[:NUM_KINDS]))
    dims = np.clip(z[NUM_KINDS : NUM_KINDS + 3], MIN_DIM, 1.0)
    return kind, dims


@lru_cache(maxsize=256)
def _primitive(kind: int, dims: Tuple[float, float, float]) -> TriangleMesh:
    if kind == 0:
        mesh = trimesh.creation.box(extents=dims)
    elif kind == 1:
        mesh = trimesh.creation.cylinder(radius=0.5, height=1.0, sections=SEGMENTS)
        mesh.apply_transform(np.diag([*dims, 1.0]))
    elif kind == 2:
        mesh = trimesh.creation.uv_sphere(radius=0.5, count=[SEGMENTS, SEGMENTS])
        mesh.apply_transform(np.diag([*dims, 1.0]))
    else:
        raise ValueError(f"unknown primitive kind {kind}")
    return TriangleMesh.from_trimesh(mesh)


def primitive_mesh(kind: int, dims) -> TriangleMesh:
    """Canonical mesh of a primitive, inside [-0.5, 0.5]^3."""
    return _primitive(int(kind), tuple(float(d) for d in dims))


def decode(z: np.ndarray) -> TriangleMesh:
    kind, dims = latent_to_params(z)
    return primitive_mesh(kind, dims)


def place_mesh(mesh: TriangleMesh, box: OrientedBox3D) -> TriangleMesh:
    """Scale by box size, rotate by box yaw, translate to box center."""
    vertices = rotate_z(mesh.vertices * box.size, box.yaw) + box.center
    return TriangleMesh(vertices=vertices, faces=mesh.faces)
