"""Procedural synthetic scenes with analytic ground truth.

Four shape classes on a textured noise background:

    0 red square, 1 green circle, 2 blue triangle, 3 yellow bar
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import load_png, save_json, save_png

CLASS_NAMES = ("red_square", "green_circle", "blue_triangle", "yellow_bar")
CLASS_COLORS = np.array(
    [[0.85, 0.15, 0.12], [0.15, 0.75, 0.2], [0.15, 0.25, 0.9], [0.9, 0.85, 0.12]]
)
MIN_BOX_AREA = 16.0
MAX_PAIR_IOU = 0.3
PLACEMENT_RETRIES = 100
OBJECT_SCALE = 1.0  # shape sizes relative to a 64-px frame


@dataclass
class GroundTruth:
    """True objects of one image: ``xywh`` (m, 4) in pixels and class ids (m,)."""

    xywh: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.xywh = np.asarray(self.xywh, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.class_ids)

    def to_json(self) -> list[dict]:
        return [
            {"class_id": int(c), "cx": float(x), "cy": float(y), "w": float(w), "h": float(h)}
            for (x, y, w, h), c in zip(self.xywh, self.class_ids)
        ]

    @classmethod
    def from_json(cls, objects) -> "GroundTruth":
        return cls(
            [[o["cx"], o["cy"], o["w"], o["h"]] for o in objects],
            [o["class_id"] for o in objects],
        )


@dataclass
class Scene:
    image: np.ndarray
    truths: GroundTruth
    seed: int
    masks: list | None = None  # per-object pixel masks, kept for audits


def _background(rng, size):
    base = rng.uniform(0.3, 0.6) + rng.uniform(-0.05, 0.05, size=3)
    coarse = rng.uniform(-0.1, 0.1, size=(size // 8 + 2, size // 8 + 2, 3))
    # bilinear upsample of the coarse field
    t = (np.arange(size) + 0.5) / 8.0
    i0 = np.floor(t).astype(int)
    f = (t - i0)[:, None]
    rows = coarse[i0] * (1 - f[:, :, None]) + coarse[i0 + 1] * f[:, :, None]
    field = rows[:, i0] * (1 - f[None, :, :]) + rows[:, i0 + 1] * f[None, :, :]
    fine = rng.uniform(-0.03, 0.03, size=(size, size, 3))
    return np.clip(base + field + fine, 0.0, 1.0)


def _shape_mask(rng, cls, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    k = OBJECT_SCALE * size / 64.0
    if cls == 0:
        s = k * rng.uniform(8, 20)
        w = h = s
    elif cls == 1:
        w = h = k * rng.uniform(9, 21)
    elif cls == 2:
        w = k * rng.uniform(10, 22)
        h = w * rng.uniform(0.8, 1.0)
    else:
        long_side, short_side = k * rng.uniform(14, 26), k * rng.uniform(5, 8)
        w, h = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    x0 = rng.uniform(0, size - w)
    y0 = rng.uniform(0, size - h)
    if cls in (0, 3):
        mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    elif cls == 1:
        r = w / 2
        mask = (xx - x0 - r) ** 2 + (yy - y0 - r) ** 2 <= r * r
    else:
        # apex at top center, base along the bottom edge
        u = (yy - y0) / h
        half = 0.5 * w * u
        mask = (u >= 0) & (u <= 1) & (np.abs(xx - x0 - w / 2) <= half)
    return mask


def _tight_box(mask):
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    x1, x2 = xs.min(), xs.max() + 1
    y1, y2 = ys.min(), ys.max() + 1
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dtype=np.float64)


def _box_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def make_scene(seed: int, size: int = 64, max_objects: int = 4, num_classes: int = 4) -> Scene:
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
    rng = np.random.default_rng(seed)
    image = _background(rng, size)
    wanted = int(rng.integers(0, max_objects + 1)) if max_objects > 0 else 0
    boxes, classes, masks = [], [], []
    for _ in range(wanted):
        cls = int(rng.integers(0, num_classes))
        for _attempt in range(PLACEMENT_RETRIES):
            mask = _shape_mask(rng, cls, size)
            box = _tight_box(mask)
            if box is None or box[2] * box[3] < MIN_BOX_AREA:
                continue
            if all(_box_iou(box, b) <= MAX_PAIR_IOU for b in boxes):
                break
        else:
            continue  # could not place this object; scene gets fewer
        color = np.clip(CLASS_COLORS[cls] + rng.uniform(-0.1, 0.1, size=3), 0, 1)
        image[mask] = color
        boxes.append(box)
        classes.append(cls)
        masks.append(mask)
    truths = GroundTruth(np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64))
    return Scene(image, truths, seed, masks)


def generate(seed: int, count: int, size: int = 64, max_objects: int = 4,
             num_classes: int = 4) -> list[Scene]:
    """``count`` deterministic scenes; scene k is seeded from ``(seed, k)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if size % 8:
        raise ValueError("size must be a multiple of 8")
    return [
        make_scene(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), size,
                   max_objects, num_classes)
        for k in range(count)
    ]


def save_scene(scene: Scene, directory, stem: str) -> tuple[Path, Path]:
    directory = Path(directory)
    png, js = directory / f"{stem}.png", directory / f"{stem}.json"
    save_png(png, scene.image)
    save_json(js, {"seed": int(scene.seed), "size": int(scene.image.shape[0]),
                   "objects": scene.truths.to_json()})
    return png, js


def load_scene(png_path) -> Scene:
    png_path = Path(png_path)
    meta = json.loads(png_path.with_suffix(".json").read_text())
    return Scene(load_png(png_path), GroundTruth.from_json(meta["objects"]), int(meta.get("seed", 0)))


def load_scene_dir(directory) -> list[Scene]:
    return [load_scene(p) for p in sorted(Path(directory).glob("*.png"))]
