import math
import random

import numpy as np
import torch


class classproperty:
    def __init__(self, func):
        self.fget = func

    def __get__(self, instance, owner):
        return self.fget(owner)


def wrap_angle(angle):
    """Wrap an angle (scalar, array or tensor) into [-pi, pi)."""
    if isinstance(angle, torch.Tensor):
        return torch.remainder(angle + math.pi, 2 * math.pi) - math.pi
    return np.remainder(np.asarray(angle, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def derive_seed(*parts: int) -> int:
    """Combine integers into a reproducible 63-bit seed."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
