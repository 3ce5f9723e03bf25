"""
Runtime module for scene_recon. Manages the process-wide compute context
(device, float dtype, determinism) used by model construction and training.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import torch

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class Runtime:
    device: torch.device
    dtype: torch.dtype
    deterministic: bool
    threads: Optional[int]


# Global runtime instance
_runtime: Optional[Runtime] = None


def configure(
    device: Optional[str] = None,
    dtype: str = "float32",
    deterministic: bool = True,
    threads: Optional[int] = None,
) -> Runtime:
    """
    Configure the compute context.

    Args:
        device: torch device string; defaults to "cuda" when available, else "cpu"
        dtype: "float32" or "float64"
        deterministic: request deterministic kernels
        threads: intra-op thread count; 1 gives the fully reproducible reference mode

    Returns:
        Runtime instance
    """
    global _runtime

    if dtype not in _DTYPES:
        raise ValueError(f"Unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    if device is None:
        device = "cuda" if torch.cuda.is_available() else "cpu"

    if threads is not None:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)

    _runtime = Runtime(
        device=torch.device(device),
        dtype=_DTYPES[dtype],
        deterministic=deterministic,
        threads=threads,
    )
    logger.debug("runtime configured: %s", _runtime)
    return _runtime


def reset() -> None:
    """
    Forget the configured runtime.
    """
    global _runtime
    _runtime = None


def get_runtime() -> Optional[Runtime]:
    """
    Get the current runtime.

    Returns:
        Runtime instance if configured, None otherwise
    """
    return _runtime


def ensure_runtime() -> Runtime:
    """
    Ensure that a runtime is configured, falling back to CPU reference mode.

    Returns:
        Runtime instance
    """
    if _runtime is None:
        return configure(device="cpu", threads=None)
    return _runtime
