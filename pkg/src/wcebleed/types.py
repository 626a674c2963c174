"""Data carried between stages: boxes, labelled samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NON_BLEEDING, BLEEDING = 0, 1


@dataclass(frozen=True)
class BoxAnnotation:
    """Normalized centre/size box; ``class_id`` 0 is the single foreground class."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float, width: int, height: int, class_id: int = 0):
        return cls(
            float((x0 + x1) / 2 / width),
            float((y0 + y1) / 2 / height),
            float((x1 - x0) / width),
            float((y1 - y0) / height),
            int(class_id),
        )

    def to_xyxy(self, width: int, height: int) -> tuple[float, float, float, float]:
        return (
            (self.cx - self.w / 2) * width,
            (self.cy - self.h / 2) * height,
            (self.cx + self.w / 2) * width,
            (self.cy + self.h / 2) * height,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass
class LabeledSample:
    image: np.ndarray  # (H, W, 3) uint8
    class_probs: np.ndarray  # (non-bleeding, bleeding)
    boxes: list[BoxAnnotation] = field(default_factory=list)
    mask: np.ndarray | None = None  # (H, W) uint8 in {0, 1}
    image_id: str = ""

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.class_probs.shape != (2,) or abs(self.class_probs.sum() - 1.0) > 1e-6:
            raise ValueError(f"class_probs must be a 2-simplex vector, got {self.class_probs}")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def boxes_xyxy(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([b.to_xyxy(self.width, self.height) for b in self.boxes])


def one_hot(label: int) -> np.ndarray:
    out = np.zeros(2)
    out[label] = 1.0
    return out
