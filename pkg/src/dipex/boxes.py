"""Axis-aligned boxes in pixel coordinates plus the handful of geometric
primitives (IoU, hulls, size buckets) shared by the detector, the label
builder and the evaluator."""

from __future__ import annotations

import math
from dataclasses import dataclass

# COCO-style area buckets: small < 32^2 <= medium < 96^2 <= large.
SMALL_MAX_AREA = 32.0 ** 2
MEDIUM_MAX_AREA = 96.0 ** 2

SIZE_CLASSES = ("S", "M", "L")


@dataclass(frozen=True)
class BBox:
    """Box as (x_min, y_min, x_max, y_max), x_max >= x_min and y_max >= y_min."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"non-finite box coordinates: {self}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box: {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def to_xywh(self) -> tuple[float, float, float, float]:
        """COCO convention: top-left corner plus width/height."""
        return (self.x_min, self.y_min, self.width, self.height)

    @staticmethod
    def from_xywh(x: float, y: float, w: float, h: float) -> "BBox":
        return BBox(x, y, x + w, y + h)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return (cx, cy, self.width, self.height)

    def clip(self, width: float, height: float) -> "BBox":
        """Clip to an image of the given size; may produce a degenerate box."""
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, 0.0), width)
        y1 = min(max(self.y_max, 0.0), height)
        return BBox(x0, y0, max(x0, x1), max(y0, y1))

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def union_area(a: BBox, b: BBox) -> float:
    return a.area + b.area - intersection_area(a, b)


def hull_area(a: BBox, b: BBox) -> float:
    """Area of the smallest box enclosing both inputs."""
    return (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union is empty (two zero-area boxes)."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def size_class_from_area(area: float) -> str:
    if area < 0.0:
        raise ValueError(f"negative area: {area}")
    if area < SMALL_MAX_AREA:
        return "S"
    if area < MEDIUM_MAX_AREA:
        return "M"
    return "L"
