"""Adversarial losses over decoded, pre-NMS boxes.

All three losses share the confidence term ``(conf_i - 1)**2`` where
``conf_i = objectness_i * max(p_i)``, averaged over the boxes whose argmax
class is in the target set, then averaged over the target categories:

* ``f1`` adds the mean pairwise IoU to the other selected boxes of the class;
* ``f2`` adds the squared area fraction and the mean inverse squared center
  distance to the other selected boxes of the class;
* ``f3`` adds only the squared area fraction.

The class-selection mask is recomputed from the current probabilities at
every call and enters the graph as constant weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tape, TapeBuilder, Var

LOSS_KINDS = ("f1", "f2", "f3")
DISTANCE_EPS = 1e-6  # px^2, guards coincident centers in f2
IOU_EPS = 1e-12
GUARD_FLAG_D2 = 1e-4  # report the f2 guard when a selected pair is this close


@dataclass(frozen=True)
class TargetSet:
    """Attacked categories; ``categories=None`` means all classes."""

    categories: frozenset[int] | None = None

    @classmethod
    def all(cls) -> "TargetSet":
        return cls(None)

    @classmethod
    def of(cls, ids: Iterable[int]) -> "TargetSet":
        ids = frozenset(int(i) for i in ids)
        if not ids:
            raise ValueError("target set must be non-empty")
        return cls(ids)

    @classmethod
    def parse(cls, text: str) -> "TargetSet":
        text = text.strip().lower()
        if text in ("all", "*", ""):
            return cls.all()
        return cls.of(int(t) for t in text.split(","))

    def resolve(self, num_classes: int) -> list[int]:
        if self.categories is None:
            return list(range(num_classes))
        bad = [c for c in self.categories if not 0 <= c < num_classes]
        if bad:
            raise ValueError(f"target classes {bad} out of range for K={num_classes}")
        return sorted(self.categories)

    def __str__(self):
        return "all" if self.categories is None else ",".join(map(str, sorted(self.categories)))


@dataclass
class LossValue:
    total: float
    conf_term: float
    dim_term: float
    pair_term: float
    empty_categories: list[int] = field(default_factory=list)
    guard_active: bool = False

    @property
    def per_term(self) -> dict:
        return {"confidence": self.conf_term, "dimension": self.dim_term, "pairwise": self.pair_term,
                "empty_categories": list(self.empty_categories), "guard_active": self.guard_active}


@dataclass
class Selection:
    """Constant weights derived from the argmax-class mask for one batch."""

    box_weights: np.ndarray  # (N, n)
    pair_weights: np.ndarray | None  # (N, n, n), rows already scaled by box weight
    empty_categories: list[int]
    counts: np.ndarray  # (N, |targets|)
    mask: np.ndarray  # (N, n) bool, box selected for some target


def selection(probs: np.ndarray, targets: TargetSet, pairwise: bool = False) -> Selection:
    """Selection weights for a batch of class distributions ``(N, n, K)``.

    The loss of image b is ``sum_i w_i * (term_i + sum_j P_ij * pair_ij)``; the
    batch loss is the mean over images, folded into the weights.
    """
    probs = np.asarray(probs)
    if probs.ndim == 2:
        probs = probs[None]
    nimg, n, k = probs.shape
    cats = targets.resolve(k)
    labels = np.argmax(probs, axis=-1)
    member = labels[:, :, None] == np.asarray(cats, dtype=labels.dtype)  # (N, n, T)
    counts = member.sum(axis=1).astype(np.int64)  # (N, T)
    empty = {cats[t] for t in np.flatnonzero((counts == 0).any(axis=0))}
    with np.errstate(divide="ignore"):
        w_cat = np.where(counts > 0, 1.0 / (counts * len(cats) * nimg), 0.0)
    in_target = member.any(axis=-1)
    slot = np.argmax(member, axis=-1)  # target index of each selected box
    box_w = np.where(in_target, np.take_along_axis(w_cat, slot, axis=1), 0.0)
    pair_w = None
    if pairwise:
        peers = np.take_along_axis(counts, slot, axis=1) - 1
        with np.errstate(divide="ignore", invalid="ignore"):
            row_w = np.where(in_target & (peers > 0), box_w / peers, 0.0)
        same = (labels[:, :, None] == labels[:, None, :]) & in_target[:, :, None]
        same[:, np.arange(n), np.arange(n)] = False
        pair_w = np.where(same, row_w[:, :, None], 0.0)
    return Selection(box_w, pair_w, sorted(empty), counts, box_w > 0)


def loss_graph(tb: TapeBuilder, kind: str, boxes: dict[str, Var], box_w: Var,
               pair_w: Var | None, width: float, height: float) -> dict[str, Var]:
    """Append loss nodes; ``boxes`` maps conf/bx/by/bw/bh to ``(N, n)`` vars."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}")
    conf_term = tb.sum(box_w * tb.square(boxes["conf"] - 1.0))
    out = {"conf_term": conf_term}
    total = conf_term
    if kind in ("f2", "f3"):
        area = boxes["bw"] * boxes["bh"] * (1.0 / (width * height))
        dim_term = tb.sum(box_w * tb.square(area))
        out["dim_term"] = dim_term
        total = total + dim_term
    if kind == "f1":
        pair = tb.sum(pair_w * pairwise_iou(tb, boxes))
        out["pair_term"] = pair
        total = total + pair
    elif kind == "f2":
        n, m = boxes["bx"].shape
        xi, xj = tb.reshape(boxes["bx"], (n, m, 1)), tb.reshape(boxes["bx"], (n, 1, m))
        yi, yj = tb.reshape(boxes["by"], (n, m, 1)), tb.reshape(boxes["by"], (n, 1, m))
        d2 = tb.square(xi - xj) + tb.square(yi - yj)
        pair = tb.sum(pair_w * (1.0 / (d2 + DISTANCE_EPS)))
        out["pair_term"] = pair
        out["d2"] = d2
        total = total + pair
    out["total"] = total
    return out


def pairwise_iou(tb: TapeBuilder, boxes: dict[str, Var]) -> Var:
    """Differentiable ``(N, n, n)`` IoU matrix with clamped overlaps."""
    n, m = boxes["bx"].shape
    half_w, half_h = boxes["bw"] * 0.5, boxes["bh"] * 0.5
    x1, x2 = boxes["bx"] - half_w, boxes["bx"] + half_w
    y1, y2 = boxes["by"] - half_h, boxes["by"] + half_h
    col = lambda v: tb.reshape(v, (n, m, 1))  # noqa: E731
    row = lambda v: tb.reshape(v, (n, 1, m))  # noqa: E731
    # min(a, b) = a - relu(a - b);  max(a, b) = a + relu(b - a)
    ix2 = tb.minimum(col(x2), row(x2))
    ix1 = col(x1) + tb.relu(row(x1) - col(x1))
    iy2 = tb.minimum(col(y2), row(y2))
    iy1 = col(y1) + tb.relu(row(y1) - col(y1))
    inter = tb.relu(ix2 - ix1) * tb.relu(iy2 - iy1)
    area = boxes["bw"] * boxes["bh"]
    union = col(area) + row(area) - inter
    return inter / (union + IOU_EPS)


_LOSS_TAPES: dict = {}


def _standalone_tape(kind: str, nimg: int, n: int, width: float, height: float) -> Tape:
    key = (kind, nimg, n, width, height)
    tape = _LOSS_TAPES.get(key)
    if tape is None:
        tb = TapeBuilder()
        boxes = {k: tb.input(k, (nimg, n)) for k in ("conf", "bx", "by", "bw", "bh")}
        box_w = tb.input("box_w", (nimg, n))
        pair_w = tb.input("pair_w", (nimg, n, n)) if kind != "f3" else None
        tape = tb.build(**loss_graph(tb, kind, boxes, box_w, pair_w, width, height))
        _LOSS_TAPES[key] = tape
    return tape


class LossEvaluator:
    """Loss value and gradients w.r.t. box tensors for a batch of decoded boxes."""

    def __init__(self, kind: str, targets: TargetSet, width: float, height: float):
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {kind!r}")
        self.kind = kind
        self.targets = targets
        self.width = float(width)
        self.height = float(height)

    def __call__(self, boxes: dict[str, np.ndarray], probs: np.ndarray, need_grad: bool = True):
        """Returns ``(LossValue, grads)``.

        ``grads`` maps each box tensor the loss depends on to its gradient;
        ``f3`` ignores centers, so ``bx``/``by`` are absent for it.
        """
        conf = np.asarray(boxes["conf"])
        if conf.ndim == 1:
            boxes = {k: np.asarray(v)[None] for k, v in boxes.items()}
            probs = np.asarray(probs)[None]
        nimg, n = boxes["conf"].shape
        sel = selection(probs, self.targets, pairwise=self.kind != "f3")
        tape = _standalone_tape(self.kind, nimg, n, self.width, self.height)
        inputs = {k: boxes[k] for k in ("conf", "bx", "by", "bw", "bh")}
        inputs["box_w"] = sel.box_weights
        if self.kind != "f3":
            inputs["pair_w"] = sel.pair_weights
        fwd = tape.eval(inputs)
        guard = False
        if self.kind == "f2":
            close = (fwd["d2"] < GUARD_FLAG_D2) & (sel.pair_weights > 0)
            guard = bool(close.any())
        value = LossValue(
            float(fwd["total"]),
            float(fwd["conf_term"]),
            float(fwd["dim_term"]) if self.kind != "f1" else 0.0,
            float(fwd["pair_term"]) if self.kind != "f3" else 0.0,
            sel.empty_categories,
            guard,
        )
        grads = None
        if need_grad:
            wrt = ["conf", "bw", "bh"] if self.kind == "f3" else ["conf", "bx", "by", "bw", "bh"]
            grads = fwd.gradient("total", wrt)
        return value, grads


def _as_boxes(boxes) -> tuple[dict, np.ndarray]:
    if isinstance(boxes, dict):
        return {k: np.asarray(boxes[k], dtype=np.float64) for k in ("conf", "bx", "by", "bw", "bh")}, \
            np.asarray(boxes["probs"], dtype=np.float64)
    return {k: np.asarray(getattr(boxes, k), dtype=np.float64) for k in ("conf", "bx", "by", "bw", "bh")}, \
        np.asarray(boxes.probs, dtype=np.float64)


def loss_f1(boxes, targets: TargetSet, width: float, height: float) -> LossValue:
    b, p = _as_boxes(boxes)
    return LossEvaluator("f1", targets, width, height)(b, p, need_grad=False)[0]


def loss_f2(boxes, targets: TargetSet, width: float, height: float) -> LossValue:
    b, p = _as_boxes(boxes)
    return LossEvaluator("f2", targets, width, height)(b, p, need_grad=False)[0]


def loss_f3(boxes, targets: TargetSet, width: float, height: float) -> LossValue:
    b, p = _as_boxes(boxes)
    return LossEvaluator("f3", targets, width, height)(b, p, need_grad=False)[0]


def ensemble_loss(per_model_boxes: Sequence, base: str, targets: TargetSet,
                  width: float, height: float) -> LossValue:
    """Arithmetic mean of the base loss over models sharing one input image."""
    if not per_model_boxes:
        raise ValueError("ensemble needs at least one model")
    fn = {"f1": loss_f1, "f2": loss_f2, "f3": loss_f3}[base]
    vals = [fn(b, targets, width, height) for b in per_model_boxes]
    if len(vals) == 1:
        return vals[0]
    k = len(vals)
    return LossValue(
        sum(v.total for v in vals) / k,
        sum(v.conf_term for v in vals) / k,
        sum(v.dim_term for v in vals) / k,
        sum(v.pair_term for v in vals) / k,
        sorted(set().union(*[v.empty_categories for v in vals])),
        any(v.guard_active for v in vals),
    )
