"""
Input validation utilities for configs and arrays
"""

from dataclasses import fields
from typing import Any, Dict, Iterable, Sequence, Tuple, Type, TypeVar

import numpy as np

from .exceptions import ConfigError, ValidationError

T = TypeVar("T")


class ConfigValidator:
    """Config field validation utilities"""

    @classmethod
    def positive(cls, name: str, value: float) -> None:
        """Require a strictly positive value"""
        if not value > 0:
            raise ValidationError(f"{name} must be positive, got {value}")

    @classmethod
    def non_negative(cls, name: str, value: float) -> None:
        """Require a value >= 0"""
        if not value >= 0:
            raise ValidationError(f"{name} must be non-negative, got {value}")

    @classmethod
    def in_range(
        cls, name: str, value: float, low: float, high: float, closed: bool = True
    ) -> None:
        """Require low <= value <= high (or < high when not closed)"""
        ok = low <= value <= high if closed else low <= value < high
        if not ok:
            bracket = "]" if closed else ")"
            raise ValidationError(
                f"{name} must lie in [{low}, {high}{bracket}, got {value}"
            )

    @classmethod
    def divisible(cls, name: str, value: int, divisor: int) -> None:
        """Require value to be a multiple of divisor"""
        if divisor <= 0 or value % divisor != 0:
            raise ValidationError(f"{name}={value} must be divisible by {divisor}")

    @classmethod
    def one_of(cls, name: str, value: Any, allowed: Iterable[Any]) -> None:
        """Require membership in an allowed set"""
        allowed = tuple(allowed)
        if value not in allowed:
            raise ValidationError(f"{name} must be one of {allowed}, got {value!r}")

    @classmethod
    def build(cls, config_cls: Type[T], data: Dict[str, Any]) -> T:
        """Build a dataclass config from a dict, rejecting unknown keys"""
        known = {f.name for f in fields(config_cls)}  # type: ignore[arg-type]
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(
                f"Unknown {config_cls.__name__} field(s): {', '.join(unknown)}"
            )
        kwargs = {}
        for key, value in data.items():
            # JSON has no tuples
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return config_cls(**kwargs)


class ArrayValidator:
    """Array shape and value validation utilities"""

    @classmethod
    def finite(cls, name: str, array: np.ndarray) -> None:
        """Reject NaN/Inf entries"""
        if not np.all(np.isfinite(array)):
            raise ValidationError(f"{name} contains non-finite values")

    @classmethod
    def same_shape(cls, a: Sequence[int], b: Sequence[int], what: str) -> None:
        """Require two shapes to match"""
        if tuple(a) != tuple(b):
            raise ValidationError(
                f"Shape mismatch for {what}: {tuple(a)} vs {tuple(b)}"
            )

    @classmethod
    def extent(cls, shape: Tuple[int, ...], expected: Tuple[int, ...]) -> None:
        """Require a spatial extent to match the expected one"""
        cls.same_shape(shape, expected, "spatial extent")
