"""
Fields module for scene_recon. Defines the Field classes used in Config definitions.
"""

from abc import ABC, abstractmethod
from typing import Any, Optional, Sequence


class Field(ABC):
    """Base class for all configuration field types."""

    TYPE_NAME: str = "value"

    def __init__(
        self,
        default: Any = None,
        description: str = "",
        nullable: bool = False,
    ):
        self.name = ""
        self.default = default
        self.description = description
        self.nullable = nullable

    @abstractmethod
    def validate(self, value: Any) -> bool:
        """Validate if the value is compatible with the field type."""
        pass

    @abstractmethod
    def parse(self, text: str) -> Any:
        """Convert the text form found in a config file to a value."""
        pass

    def format(self, value: Any) -> str:
        """Convert a value to its config file text form."""
        return "none" if value is None else str(value)

    def describe(self) -> str:
        return f"{self.name} ({self.TYPE_NAME}, default {self.format(self.default)}): {self.description}"


class _BoundedField(Field):
    def __init__(
        self,
        default: Any = None,
        description: str = "",
        min_value: Optional[float] = None,
        max_value: Optional[float] = None,
        exclusive_min: bool = False,
        **kwargs,
    ):
        super().__init__(default=default, description=description, **kwargs)
        self.min_value = min_value
        self.max_value = max_value
        self.exclusive_min = exclusive_min

    def _in_bounds(self, value: float) -> bool:
        if self.min_value is not None:
            if self.exclusive_min and value <= self.min_value:
                return False
            if value < self.min_value:
                return False
        if self.max_value is not None and value > self.max_value:
            return False
        return True


class IntegerField(_BoundedField):
    """Integer field type."""

    TYPE_NAME = "int"

    def validate(self, value: Any) -> bool:
        if value is None:
            return self.nullable
        if isinstance(value, bool) or not isinstance(value, int):
            return False
        return self._in_bounds(value)

    def parse(self, text: str) -> Any:
        if text.lower() == "none":
            return None
        return int(text)


class FloatField(_BoundedField):
    """Float field type."""

    TYPE_NAME = "float"

    def validate(self, value: Any) -> bool:
        if value is None:
            return self.nullable
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        if value != value:
            return False
        return self._in_bounds(float(value))

    def parse(self, text: str) -> Any:
        if text.lower() == "none":
            return None
        return float(text)

    def format(self, value: Any) -> str:
        return "none" if value is None else repr(float(value))


class BooleanField(Field):
    """Boolean field type."""

    TYPE_NAME = "bool"
    TRUE = ("true", "on", "yes", "1")
    FALSE = ("false", "off", "no", "0")

    def validate(self, value: Any) -> bool:
        if value is None:
            return self.nullable
        return isinstance(value, bool)

    def parse(self, text: str) -> Any:
        lowered = text.lower()
        if lowered in self.TRUE:
            return True
        if lowered in self.FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")

    def format(self, value: Any) -> str:
        return "true" if value else "false"


class CharField(Field):
    """String field type, optionally restricted to a set of choices."""

    TYPE_NAME = "str"

    def __init__(self, choices: Optional[Sequence[str]] = None, **kwargs):
        super().__init__(**kwargs)
        self.choices = tuple(choices) if choices else None

    def validate(self, value: Any) -> bool:
        if value is None:
            return self.nullable
        if not isinstance(value, str):
            return False
        return self.choices is None or value in self.choices

    def parse(self, text: str) -> Any:
        if self.nullable and text.lower() == "none":
            return None
        return text
