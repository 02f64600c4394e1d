"""Dense-area alerting over a predicted density map.

A sliding-window pass enumerates candidate boxes, the maximum per-box count
is compared against the dense warning criterion, and a single alert message
with crowd intensity and compass direction is emitted for the winning box.
Downstream flight control is out of scope; the message is the boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .density import DensityMap

DIRECTIONS = ("center", "N", "NE", "E", "SE", "S", "SW", "W", "NW")
# The central dead zone spans 10% of each image dimension.
CENTER_DEADZONE_FRACTION = 0.10


@dataclass
class CandidateBox:
    """Axis-aligned window in full-resolution map coordinates."""

    x0: int
    y0: int
    width: int
    height: int
    count: float


@dataclass
class AlertMessage:
    p_max: float
    p_d: float
    box: CandidateBox
    intensity: str  # "warning" iff p_max > p_d, else "normal"
    direction: str  # one of DIRECTIONS
    image_id: str = ""

    def to_json(self) -> str:
        payload = {
            "image_id": self.image_id,
            "p_max": self.p_max,
            "p_d": self.p_d,
            "intensity": self.intensity,
            "direction": self.direction,
            "box": {
                "x0": self.box.x0,
                "y0": self.box.y0,
                "width": self.box.width,
                "height": self.box.height,
                "count": self.box.count,
            },
        }
        return json.dumps(payload)


def _integral_image(values: np.ndarray) -> np.ndarray:
    ii = np.zeros((values.shape[0] + 1, values.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(values, axis=0), axis=1, out=ii[1:, 1:])
    return ii


def enumerate_boxes(density: DensityMap, box_size: tuple[int, int],
                    stride: int) -> list[CandidateBox]:
    """All grid-aligned windows with their contained people counts.

    Counts come from an integral image; they equal direct summation up to
    float rounding.
    """
    bw, bh = box_size
    h, w = density.image_size
    if bw > w or bh > h:
        raise ValueError(f"box {bw}x{bh} larger than map {w}x{h}")
    if bw < 1 or bh < 1:
        raise ValueError(f"box size must be positive, got {bw}x{bh}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    ii = _integral_image(density.values.data[0])
    boxes = []
    for y0 in range(0, h - bh + 1, stride):
        for x0 in range(0, w - bw + 1, stride):
            count = (ii[y0 + bh, x0 + bw] - ii[y0, x0 + bw]
                     - ii[y0 + bh, x0] + ii[y0, x0])
            boxes.append(CandidateBox(x0=x0, y0=y0, width=bw, height=bh,
                                      count=float(count)))
    return boxes


def find_pmax(boxes: list[CandidateBox]) -> CandidateBox:
    """Box with the maximum count; exact ties go to the smallest (y0, x0)."""
    if not boxes:
        raise ValueError("find_pmax needs at least one candidate box")
    best = boxes[0]
    for box in boxes[1:]:
        if box.count > best.count or (
                box.count == best.count and (box.y0, box.x0) < (best.y0, best.x0)):
            best = box
    return best


def _direction_of(box: CandidateBox, image_size: tuple[int, int]) -> str:
    h, w = image_size
    cx = box.x0 + box.width / 2.0
    cy = box.y0 + box.height / 2.0
    dx = cx - w / 2.0
    dy = cy - h / 2.0
    half_band_x = CENTER_DEADZONE_FRACTION * w / 2.0
    half_band_y = CENTER_DEADZONE_FRACTION * h / 2.0
    ew = "" if abs(dx) <= half_band_x else ("E" if dx > 0 else "W")
    ns = "" if abs(dy) <= half_band_y else ("S" if dy > 0 else "N")
    return (ns + ew) or "center"


def decide_alert(box: CandidateBox, p_d: float, image_size: tuple[int, int],
                 image_id: str = "") -> AlertMessage:
    """Compare the winning box against the warning criterion and attach the
    compass direction of its center relative to the image center."""
    if p_d < 0:
        raise ValueError(f"dense warning criterion must be >= 0, got {p_d}")
    intensity = "warning" if box.count > p_d else "normal"
    return AlertMessage(p_max=box.count, p_d=p_d, box=box, intensity=intensity,
                        direction=_direction_of(box, image_size), image_id=image_id)


def supervise(density: DensityMap, p_d: float,
              box_size: tuple[int, int] | None = None,
              stride: int | None = None, image_id: str = "") -> AlertMessage:
    """enumerate -> select maximum -> decide; deterministic end to end.

    Defaults: boxes of a quarter of each dimension, stride of one eighth of
    the shorter dimension.
    """
    h, w = density.image_size
    if box_size is None:
        box_size = (max(1, w // 4), max(1, h // 4))
    if stride is None:
        stride = max(1, min(h, w) // 8)
    boxes = enumerate_boxes(density, box_size, stride)
    best = find_pmax(boxes)
    return decide_alert(best, p_d, (h, w), image_id=image_id)
