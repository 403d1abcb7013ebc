"""Boxes, IoU, hard and soft NMS, and the dimension-floor filter."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

# 10**3.62 px^2 on a 416x416 input
REFERENCE_MIN_AREA = 10 ** 3.62
REFERENCE_INPUT_SIDE = 416


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: float = 1.0

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, class_id=0, score=1.0) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, class_id, score)


@dataclass
class DetectionSet:
    """Columnar set of boxes.

    ``xywh`` holds center x, center y, width, height in pixels. ``index``
    carries each box's identity (its raw-box index for detector output) so
    subsets can be compared by identity.
    """

    xywh: np.ndarray
    scores: np.ndarray
    class_ids: np.ndarray
    index: np.ndarray | None = None
    image_id: str = ""
    source_model: str = ""
    class_probs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.xywh = np.asarray(self.xywh, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if self.index is None:
            self.index = np.arange(len(self.scores), dtype=np.int64)
        else:
            self.index = np.asarray(self.index, dtype=np.int64).reshape(-1)
        n = len(self.scores)
        if not (len(self.xywh) == len(self.class_ids) == len(self.index) == n):
            raise ValueError("DetectionSet columns differ in length")

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def from_boxes(cls, boxes, image_id="", source_model="") -> "DetectionSet":
        boxes = list(boxes)
        return cls(
            np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4),
            np.array([b.score for b in boxes], dtype=np.float64),
            np.array([b.class_id for b in boxes], dtype=np.int64),
            image_id=image_id,
            source_model=source_model,
        )

    @classmethod
    def empty(cls, image_id="", source_model="") -> "DetectionSet":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64),
                   image_id=image_id, source_model=source_model)

    def boxes(self) -> list[Box]:
        return [
            Box(float(x), float(y), float(w), float(h), int(c), float(s))
            for (x, y, w, h), c, s in zip(self.xywh, self.class_ids, self.scores)
        ]

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        cx, cy, w, h = (np.ascontiguousarray(self.xywh[:, k]) for k in range(4))
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2

    def take(self, rows, scores=None) -> "DetectionSet":
        rows = np.asarray(rows, dtype=np.intp)
        return DetectionSet(
            self.xywh[rows],
            self.scores[rows] if scores is None else scores,
            self.class_ids[rows],
            self.index[rows],
            self.image_id,
            self.source_model,
            None if self.class_probs is None else self.class_probs[rows],
        )

    def clipped(self, width: float, height: float) -> "DetectionSet":
        """Clip boxes to the image rectangle [0, width] x [0, height]."""
        x1, y1, x2, y2 = self.corners()
        x1, x2 = np.clip(x1, 0, width), np.clip(x2, 0, width)
        y1, y2 = np.clip(y1, 0, height), np.clip(y2, 0, height)
        xywh = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=1)
        return DetectionSet(xywh, self.scores, self.class_ids, self.index,
                            self.image_id, self.source_model, self.class_probs)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0.0 else 0.0


def iou_matrix(a: DetectionSet, b: DetectionSet) -> np.ndarray:
    return _kernels.iou_matrix(*a.corners(), *b.corners())


def _score_order(scores: np.ndarray) -> np.ndarray:
    # descending score; equal scores keep the lower index first
    return np.argsort(-scores, kind="stable").astype(np.intp)


def nms(dets: DetectionSet, nt: float) -> DetectionSet:
    """Per-class greedy suppression of boxes with IoU >= ``nt``.

    Classes are processed in ascending id; within a class the output keeps
    selection order.
    """
    if not 0.0 < nt <= 1.0:
        raise ValueError(f"NMS threshold must be in (0, 1], got {nt}")
    if len(dets) == 0:
        return dets.take([])
    if not np.all(np.isfinite(dets.scores)):
        raise ValueError("scores must be finite")
    x1, y1, x2, y2 = dets.corners()
    keep = []
    for c in np.unique(dets.class_ids):
        rows = np.flatnonzero(dets.class_ids == c)
        order = rows[_score_order(dets.scores[rows])]
        keep.append(_kernels.nms_sorted(x1, y1, x2, y2, order, float(nt)))
    return dets.take(np.concatenate(keep))


def soft_nms(
    dets: DetectionSet,
    nt: float = 0.5,
    method: str = "linear",
    sigma: float = 0.5,
    score_floor: float = 0.001,
) -> DetectionSet:
    """Soft-NMS: overlapping boxes have their scores decayed, not removed.

    ``linear`` rescales by ``1 - IoU`` when IoU >= ``nt``; ``gaussian`` rescales
    every remaining box by ``exp(-IoU**2 / sigma)``. Boxes whose decayed score
    drops below ``score_floor`` are dropped. Returned scores are the decayed ones.
    """
    if method not in ("linear", "gaussian"):
        raise ValueError(f"unknown soft-NMS method {method!r}")
    if method == "gaussian" and sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 <= score_floor < 1.0:
        raise ValueError("score_floor must be in [0, 1)")
    if len(dets) == 0:
        return dets.take([])
    x1, y1, x2, y2 = dets.corners()
    rows_out, scores_out = [], []
    for c in np.unique(dets.class_ids):
        rows = np.flatnonzero(dets.class_ids == c)
        keep, kept = _kernels.soft_nms(
            np.ascontiguousarray(x1[rows]), np.ascontiguousarray(y1[rows]),
            np.ascontiguousarray(x2[rows]), np.ascontiguousarray(y2[rows]),
            np.ascontiguousarray(dets.scores[rows]),
            float(nt), int(method == "gaussian"), float(sigma), float(score_floor),
        )
        rows_out.append(rows[keep])
        scores_out.append(kept)
    return dets.take(np.concatenate(rows_out), np.concatenate(scores_out))


def scaled_min_area(input_side: int, base_area: float = REFERENCE_MIN_AREA) -> float:
    """Rescale the 416-px area floor to another square input size."""
    return base_area * (input_side / REFERENCE_INPUT_SIDE) ** 2


def dimension_floor_filter(dets: DetectionSet, min_area: float) -> DetectionSet:
    """Drop boxes whose area ``w*h`` is below ``min_area``."""
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    if min_area == 0:
        return dets
    area = dets.xywh[:, 2] * dets.xywh[:, 3]
    return dets.take(np.flatnonzero(area >= min_area))


def brute_force_nms_oracle(dets: DetectionSet, nt: float) -> DetectionSet:
    """Line-by-line greedy NMS over Box objects, used to cross-check :func:`nms`."""
    boxes = dets.boxes()
    selected = []
    for c in sorted(set(b.class_id for b in boxes)):
        # B^c and S^c
        remaining = [i for i, b in enumerate(boxes) if b.class_id == c]
        chosen = []
        while remaining:
            m = remaining[0]
            for i in remaining:
                if boxes[i].score > boxes[m].score:
                    m = i
            chosen.append(m)
            remaining.remove(m)
            for i in list(remaining):
                if iou(boxes[m], boxes[i]) >= nt:
                    remaining.remove(i)
        selected.extend(chosen)
    return dets.take(selected)

