"""Geometric and annotation value types shared by every stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

SCORE_TOL = 1e-12


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous image pixel coordinates (corner form)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box (need x2 > x1 and y2 > y1): {coords}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> BBox:
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def width(self) -> float:
        return self.x2 - self.x1

    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width() * self.height()

    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def contains(self, other: BBox) -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def clip(self, width: float, height: float) -> Optional[BBox]:
        """Clip to [0, width] x [0, height]; None if nothing is left."""
        x1, y1 = max(self.x1, 0.0), max(self.y1, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if x2 <= x1 or y2 <= y1:
            return None
        return BBox(x1, y1, x2, y2)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    if inter == 0.0:
        return 0.0
    if a == b:
        return 1.0
    return inter / (a.area() + b.area() - inter)


def ioa(a: BBox, b: BBox) -> float:
    """Intersection over the area of ``a`` (used against ignore regions)."""
    return _intersection(a, b) / a.area()


@dataclass(frozen=True)
class Annotation:
    image_id: str
    box: BBox
    visible_box: BBox
    ignore: bool = False

    def __post_init__(self):
        if not self.box.contains(self.visible_box):
            raise ValueError(
                f"visible box {self.visible_box.as_list()} not inside {self.box.as_list()}"
            )

    @property
    def visibility_ratio(self) -> float:
        return min(1.0, self.visible_box.area() / self.box.area())

    @property
    def height(self) -> float:
        return self.box.height()


@dataclass(frozen=True)
class Detection:
    """Decoded box with its detection, suppression and fused probabilities.

    ``score`` defaults to the fused value ``p_detect * (1 - p_suppress)``
    (or ``p_detect`` when no suppression probability is attached). An
    explicitly passed score must agree with that within ``SCORE_TOL``.
    """

    image_id: str
    box: BBox
    p_detect: float
    p_suppress: Optional[float] = None
    score: float = field(default=float("nan"))

    def __post_init__(self):
        _check_prob("p_detect", self.p_detect)
        if self.p_suppress is not None:
            _check_prob("p_suppress", self.p_suppress)
        expected = fused_score(self.p_detect, self.p_suppress)
        if math.isnan(self.score):
            object.__setattr__(self, "score", expected)
        elif abs(self.score - expected) > SCORE_TOL:
            raise ValueError(
                f"score {self.score!r} inconsistent with p_detect={self.p_detect!r}, "
                f"p_suppress={self.p_suppress!r} (expected {expected!r})"
            )

    def with_suppression(self, p_suppress: Optional[float]) -> Detection:
        return Detection(self.image_id, self.box, self.p_detect, p_suppress)


def fused_score(p_detect: float, p_suppress: Optional[float]) -> float:
    """Probability that a box is detected and not suppressed."""
    if p_suppress is None:
        return float(p_detect)
    return float(p_detect) * (1.0 - float(p_suppress))


def _check_prob(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class GridShape:
    height_px: int
    width_px: int
    stride: int = 4

    def __post_init__(self):
        if self.height_px <= 0 or self.width_px <= 0 or self.stride <= 0:
            raise ValueError(f"invalid grid shape {self}")

    @property
    def map_shape(self) -> tuple[int, int]:
        return (-(-self.height_px // self.stride), -(-self.width_px // self.stride))
