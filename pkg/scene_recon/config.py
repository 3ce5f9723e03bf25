"""
Config module for scene_recon. Defines the Config base class and every configuration
used by the pipeline.
"""

import copy
from pathlib import Path
from typing import Any, Dict, List, Type, TypeVar, Union

from .exceptions import ConfigError
from .fields import BooleanField, CharField, Field, FloatField, IntegerField
from .utils import classproperty

C = TypeVar("C", bound="Config")


class ConfigMeta(type):
    """Metaclass for Config that collects the declared fields."""

    def __new__(mcs, name: str, bases: tuple, attrs: dict):
        # Skip processing for Config base class
        if name == "Config" and bases == (object,):
            return super().__new__(mcs, name, bases, attrs)

        fields: Dict[str, Field] = {}
        for base in bases:
            fields.update(getattr(base, "_fields", {}))

        for key, value in attrs.items():
            if isinstance(value, Field):
                value.name = key
                fields[key] = value

        attrs["_fields"] = fields
        return super().__new__(mcs, name, bases, attrs)


class Config(object, metaclass=ConfigMeta):
    """
    Base class for all configurations.
    Instances are validated on construction and on every update.
    """

    _fields: Dict[str, Field] = {}

    def __init__(self, **kwargs):
        unknown = sorted(set(kwargs) - set(self._fields))
        if unknown:
            raise ConfigError(
                f"Unknown key(s) for {type(self).__name__}: {', '.join(unknown)}"
            )
        for field_name, field in self._fields.items():
            value = kwargs.get(field_name, copy.copy(field.default))
            self._set(field_name, field, value)
        self.check()

    def _set(self, field_name: str, field: Field, value: Any) -> None:
        if isinstance(field, FloatField) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not field.validate(value):
            raise ConfigError(f"Invalid value for field '{field_name}': {value!r}")
        setattr(self, field_name, value)

    def check(self) -> None:
        """Validate cross-field invariants. Subclasses override."""

    @classproperty
    def field_names(cls) -> List[str]:
        return list(cls._fields)

    def to_dict(self) -> Dict[str, Any]:
        """Convert config instance to dictionary."""
        return {name: self.__dict__[name] for name in self._fields}

    @classmethod
    def from_dict(cls: Type[C], data: Dict[str, Any]) -> C:
        return cls(**data)

    def update(self, **kwargs) -> "Config":
        """Update config in place with new values."""
        for field_name, value in kwargs.items():
            if field_name not in self._fields:
                raise ConfigError(f"Unknown key for {type(self).__name__}: {field_name}")
            self._set(field_name, self._fields[field_name], value)
        self.check()
        return self

    def replace(self: C, **kwargs) -> C:
        """Return a copy with some values replaced."""
        return type(self)(**{**self.to_dict(), **kwargs})

    def __eq__(self, other: object) -> bool:
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        body = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items())
        return f"{type(self).__name__}({body})"

    def to_text(self) -> str:
        """Flat `key = value` text; described fields get a comment line."""
        lines = [f"# {type(self).__name__}"]
        for name in self.field_names:
            field = self._fields[name]
            if field.description:
                lines.append(f"# {field.describe()}")
            lines.append(f"{name} = {field.format(self.__dict__[name])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls: Type[C], text: str, strict: bool = True) -> C:
        """Parse the flat `key = value` format; `#` starts a comment."""
        values: Dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, text_value = (part.strip() for part in line.partition("="))
            field = cls._fields.get(key)
            if field is None:
                if strict:
                    raise ConfigError(f"line {lineno}: unknown key '{key}'")
                continue
            try:
                values[key] = field.parse(text_value)
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for '{key}': {e}") from e
        return cls(**values)

    @classmethod
    def read(cls: Type[C], path: Union[str, Path], strict: bool = True) -> C:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), strict=strict)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


class GenerationConfig(Config):
    """Synthetic scene generation."""

    num_scenes = IntegerField(default=200, min_value=1, description="scenes to generate")
    objects_min = IntegerField(default=2, min_value=1, max_value=16, description="fewest objects per scene")
    objects_max = IntegerField(default=6, min_value=1, max_value=16, description="most objects per scene")
    noise_sigma = FloatField(default=0.005, min_value=0.0, description="isotropic point noise, meters")
    dropout_fraction = FloatField(default=0.3, min_value=0.0, max_value=0.95, description="occluded sector fraction per object")
    points_per_object = IntegerField(default=1024, min_value=32, description="surface samples per object before occlusion")
    floor_points = IntegerField(default=2048, min_value=0, description="background floor samples")
    shape_variation = FloatField(default=0.0, min_value=0.0, max_value=0.9, description="dims drawn from [1 - v, 1]")
    seed = IntegerField(default=0, description="base seed; scene i uses seed + i")

    def check(self) -> None:
        if self.objects_min > self.objects_max:
            raise ConfigError("objects_min must not exceed objects_max")


class BackboneConfig(Config):
    """Dense voxel U-Net."""

    grid_size = IntegerField(default=64, min_value=16, description="voxels per axis of the base grid")
    width = IntegerField(default=32, min_value=1, description="channels of every U-Net stage")
    feature_dim = IntegerField(default=32, min_value=1, description="D^f of every pyramid level")
    levels = IntegerField(default=4, min_value=1, max_value=4, description="coarse levels L (strides 2..2^L)")
    margin = FloatField(default=0.05, min_value=0.0, description="relative margin around scene bounds")

    def check(self) -> None:
        if self.grid_size % (2**self.levels):
            raise ConfigError("grid_size must be divisible by 2**levels")


class ModelConfig(Config):
    """Decoder, queries and heads."""

    num_queries = IntegerField(default=20, min_value=1, description="M")
    semantic_dim = IntegerField(default=128, min_value=1, description="D_s")
    geometric_dim = IntegerField(default=128, min_value=1, description="D_g")
    num_heads = IntegerField(default=4, min_value=1, description="attention heads")
    ffn_multiplier = IntegerField(default=4, min_value=1, description="feed-forward width / (D_s + D_g)")
    num_layers = IntegerField(default=3, min_value=1, description="decoder layers")
    num_classes = IntegerField(default=3, min_value=1, description="C, excluding 'no object'")
    angle_bins = IntegerField(default=12, min_value=2, description="B")
    shape_dim = IntegerField(default=8, min_value=6, description="D_shape")
    query_seed = IntegerField(default=0, description="seed of the query initialization")
    sgdq_enabled = BooleanField(default=True, description="disentangled semantic/geometric queries")


class MatchCostConfig(Config):
    """Hybrid bipartite matching weights."""

    lambda_mask = FloatField(default=5.0, min_value=0.0, description="dice cost weight")
    lambda_box = FloatField(default=2.0, min_value=0.0, description="1 - GIoU cost weight")
    lambda_class = FloatField(default=2.0, min_value=0.0, description="1 - p(class) cost weight")
    hybrid = BooleanField(default=True, description="false: mask dice cost only")


class LossConfig(Config):
    """Loss weights; every term defaults to 1."""

    mask_bce = FloatField(default=1.0, min_value=0.0)
    mask_dice = FloatField(default=1.0, min_value=0.0)
    class_ce = FloatField(default=1.0, min_value=0.0)
    box_center = FloatField(default=1.0, min_value=0.0)
    box_size = FloatField(default=1.0, min_value=0.0)
    box_angle = FloatField(default=1.0, min_value=0.0)
    box_giou = FloatField(default=1.0, min_value=0.0)
    box_iou_score = FloatField(default=1.0, min_value=0.0)
    shape_latent = FloatField(default=1.0, min_value=0.0)
    no_object_weight = FloatField(default=0.1, min_value=0.0, description="'no object' CE down-weight")
    huber_delta = FloatField(default=1.0, min_value=0.0, exclusive_min=True)
    deep_supervision = BooleanField(default=True, description="mask/class loss at every decoder step")


class MebrConfig(Config):
    """Mask-enhanced box refinement."""

    d0 = FloatField(default=0.1, min_value=0.0, exclusive_min=True, description="size discrepancy threshold, meters")


class EvalConfig(Config):
    """Metric suite."""

    voxel_grid = IntegerField(default=32, min_value=4, description="voxels across the longest union axis")
    chamfer_samples = IntegerField(default=2048, min_value=512)
    pcr_tau = FloatField(default=0.1, min_value=0.0, exclusive_min=True, description="PCR inlier distance, meters")
    box_iou_resolution = IntegerField(default=64, min_value=8)
    ap_matching = CharField(default="greedy", choices=("greedy", "hungarian"))
    mesh_seed = IntegerField(default=0)


class TrainConfig(Config):
    """Optimization, schedule and ablation switches."""

    epochs = IntegerField(default=100, min_value=1)
    batch_size = IntegerField(default=4, min_value=1)
    lr_max = FloatField(default=1e-4, min_value=0.0, exclusive_min=True)
    lr_min = FloatField(default=1e-6, min_value=0.0)
    warmup_fraction = FloatField(default=0.3, min_value=0.0, max_value=1.0)
    weight_decay = FloatField(default=1e-4, min_value=0.0)
    grad_clip = FloatField(default=1.0, min_value=0.0, description="global norm; 0 disables")
    seed = IntegerField(default=0)
    val_every = IntegerField(default=5, min_value=1, description="epochs between validations")
    workers = IntegerField(default=0, min_value=0, description="data loading workers")
    max_steps = IntegerField(default=0, min_value=0, description="stop after this many steps; 0 = no limit")
    num_queries = IntegerField(default=20, min_value=1)
    grid_size = IntegerField(default=64, min_value=16)
    backbone_width = IntegerField(default=32, min_value=1)
    sgdq_enabled = BooleanField(default=True)
    hybrid_matching_enabled = BooleanField(default=True)
    mebr_enabled = BooleanField(default=True)
    deep_supervision_enabled = BooleanField(default=True)
    augment = BooleanField(default=True)

    def check(self) -> None:
        if not self.lr_min < self.lr_max:
            raise ConfigError("lr_min must be smaller than lr_max")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_queries=self.num_queries,
            sgdq_enabled=self.sgdq_enabled,
            query_seed=self.seed,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(grid_size=self.grid_size, width=self.backbone_width)

    def match_config(self) -> MatchCostConfig:
        return MatchCostConfig(hybrid=self.hybrid_matching_enabled)

    def loss_config(self) -> LossConfig:
        return LossConfig(deep_supervision=self.deep_supervision_enabled)
