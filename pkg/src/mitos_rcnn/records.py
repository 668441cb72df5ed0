"""Annotation and detection records shared by the data, detection and eval code."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .boxes import Box


class ClassId(IntEnum):
    BACKGROUND = 0
    MITOTIC_FIGURE = 1
    NOT_MITOTIC_FIGURE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "ClassId":
        try:
            value = cls[label.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class name {label!r}") from None
        if value is cls.BACKGROUND:
            raise ValueError("background is not an annotation class")
        return value


NUM_CLASSES = len(ClassId)


@dataclass(frozen=True)
class BoxAnnotation:
    box: Box
    class_id: ClassId
    centroid: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "class_id", ClassId(self.class_id))
        if self.class_id is ClassId.BACKGROUND:
            raise ValueError("annotations cannot carry the background class")
        if self.box.w <= 0 or self.box.h <= 0:
            raise ValueError(f"annotation box must have positive size: {self.box}")
        cx, cy = self.centroid
        b = self.box
        if not (b.x <= cx <= b.x + b.w and b.y <= cy <= b.y + b.h):
            raise ValueError(f"centroid {self.centroid} lies outside its box {b}")

    def inside(self, width: float, height: float, tol: float = 1e-9) -> bool:
        b = self.box
        return b.x >= -tol and b.y >= -tol and b.x + b.w <= width + tol and b.y + b.h <= height + tol


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: ClassId
    score: float

    @property
    def centroid(self) -> tuple[float, float]:
        return self.box.center
