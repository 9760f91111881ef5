"""Axis-aligned box arithmetic.

Boxes use continuous, half-open pixel coordinates: pixel ``(i, j)`` covers
``[i, i+1) x [j, j+1)`` and its centre sits at ``(i + 0.5, j + 0.5)``.  The
same convention is used by :func:`codo.encoder.roi_align`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def aspect_ratio(self) -> float:
        return self.width / self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def inside(self, width: float, height: float) -> bool:
        return 0 <= self.x0 and 0 <= self.y0 and self.x1 <= width and self.y1 <= height

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class JitterConfig:
    iou_min: float = 0.6
    max_center_shift: float = 0.2
    max_scale_delta: float = 0.2
    max_attempts: int = 20

    def __post_init__(self) -> None:
        if not 0 < self.iou_min < 1:
            raise ValueError(f"iou_min must lie in (0, 1), got {self.iou_min}")
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.max_center_shift < 0 or not 0 <= self.max_scale_delta < 1:
            raise ValueError("jitter magnitudes out of range")


def area(box: BoundingBox) -> float:
    return box.area


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; symmetric and in ``[0, 1]``."""
    if a.area <= 0 or b.area <= 0:
        raise ValueError("iou of a zero-area box is undefined")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def clamp(box: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clip ``box`` to ``[0, width] x [0, height]``.

    Raises ``ValueError`` when nothing of the box survives.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    x0, y0 = max(box.x0, 0.0), max(box.y0, 0.0)
    x1, y1 = min(box.x1, float(width)), min(box.y1, float(height))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box.as_tuple()} lies outside the {width}x{height} image")
    return BoundingBox(x0, y0, x1, y1)


def hflip(box: BoundingBox, width: float) -> BoundingBox:
    return BoundingBox(width - box.x1, box.y0, width - box.x0, box.y1)


def _propose(box: BoundingBox, cfg: JitterConfig, rng: np.random.Generator) -> BoundingBox:
    w, h = box.width, box.height
    cx = (box.x0 + box.x1) / 2 + rng.uniform(-cfg.max_center_shift, cfg.max_center_shift) * w
    cy = (box.y0 + box.y1) / 2 + rng.uniform(-cfg.max_center_shift, cfg.max_center_shift) * h
    nw = w * rng.uniform(1 - cfg.max_scale_delta, 1 + cfg.max_scale_delta)
    nh = h * rng.uniform(1 - cfg.max_scale_delta, 1 + cfg.max_scale_delta)
    return BoundingBox(cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2)


def jitter_box(
    box: BoundingBox,
    cfg: JitterConfig,
    bounds: tuple[float, float],
    rng: np.random.Generator,
) -> BoundingBox:
    """Randomly perturb ``box`` so that it takes in some surrounding context.

    Candidates are drawn by rejection: a uniform centre shift and an
    independent uniform rescale of each side, clamped to ``bounds``.  The
    first candidate whose IoU with ``box`` exceeds ``cfg.iou_min`` wins; if
    none does within ``cfg.max_attempts`` the input box comes back unchanged.
    """
    width, height = bounds
    for _ in range(cfg.max_attempts):
        try:
            cand = clamp(_propose(box, cfg, rng), width, height)
        except ValueError:
            continue
        if iou(cand, box) > cfg.iou_min:
            return cand
    return box
