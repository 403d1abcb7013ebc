"""FP rate, all-point-interpolated AP/mAP, distortion statistics and sweeps."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import DetectionSet, iou_matrix
from .scenes import GroundTruth

log = logging.getLogger(__name__)

__all__ = [
    "GroundTruth",
    "NO_DETECTIONS",
    "match_detections",
    "fp_rate",
    "average_precision",
    "mean_average_precision",
    "distortion_stats",
    "EvalCell",
    "EvalReport",
    "CSV_FIELDS",
    "sweep",
]


class _NoDetections:
    """Marker for metrics that are undefined because nothing was detected."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "no-detections"

    def __bool__(self):
        return False


NO_DETECTIONS = _NoDetections()


def match_detections(dets: DetectionSet, gt: GroundTruth, iou_match: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy one-to-one matching by descending score.

    Each detection, in score order, takes the highest-IoU still-unmatched
    ground truth of its class if that IoU is >= ``iou_match``.
    Returns ``(is_tp, matched_gt)`` aligned with ``dets`` rows; ``matched_gt``
    is -1 for false positives.
    """
    n = len(dets)
    is_tp = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(gt) == 0:
        return is_tp, matched
    gt_set = DetectionSet(gt.xywh, np.ones(len(gt)), gt.class_ids)
    ious = iou_matrix(dets, gt_set)
    taken = np.zeros(len(gt), dtype=bool)
    for i in np.argsort(-dets.scores, kind="stable"):
        cand = (gt.class_ids == dets.class_ids[i]) & ~taken
        if not cand.any():
            continue
        row = np.where(cand, ious[i], -1.0)
        j = int(np.argmax(row))
        if row[j] >= iou_match:
            taken[j] = True
            is_tp[i] = True
            matched[i] = j
    return is_tp, matched


def fp_rate(dets: DetectionSet, gt: GroundTruth, iou_match: float = 0.5):
    """Fraction of detections that match no ground truth; ``NO_DETECTIONS`` if empty."""
    if len(dets) == 0:
        return NO_DETECTIONS
    is_tp, _ = match_detections(dets, gt, iou_match)
    return float(np.count_nonzero(~is_tp)) / len(dets)


def _all_point_ap(tp_sorted: np.ndarray, npos: int) -> float:
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    dets_per_image: Sequence[DetectionSet],
    gts: Sequence[GroundTruth],
    iou_match: float = 0.5,
    class_id: int | None = None,
) -> float:
    """All-point interpolated AP of one class ranked across all images.

    With ``class_id=None`` every class is pooled (useful for single-class sets).
    Returns ``nan`` when the class has no ground-truth instances.
    """
    if len(dets_per_image) != len(gts):
        raise ValueError("need one detection set per ground truth")
    scores, flags = [], []
    npos = 0
    for dets, gt in zip(dets_per_image, gts):
        if class_id is not None:
            dets = dets.take(np.flatnonzero(dets.class_ids == class_id))
            gt = GroundTruth(gt.xywh[gt.class_ids == class_id], gt.class_ids[gt.class_ids == class_id])
        npos += len(gt)
        is_tp, _ = match_detections(dets, gt, iou_match)
        scores.append(dets.scores)
        flags.append(is_tp)
    if npos == 0:
        return float("nan")
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    return _all_point_ap(flags[order], npos)


def mean_average_precision(
    dets_per_image: Sequence[DetectionSet],
    gts: Sequence[GroundTruth],
    num_classes: int,
    iou_match: float = 0.5,
) -> tuple[float, dict[int, float]]:
    """Mean AP over classes that have ground truth; empty classes are skipped."""
    per_class = {}
    for c in range(num_classes):
        ap = average_precision(dets_per_image, gts, iou_match, class_id=c)
        if np.isnan(ap):
            log.info("class %d has no ground truth; excluded from mAP", c)
            continue
        per_class[c] = ap
    if not per_class:
        return float("nan"), per_class
    return float(np.mean(list(per_class.values()))), per_class


def distortion_stats(results) -> dict[str, tuple[float, float, float]]:
    """(max, mean, min) of L2 norm and L0 count over attack results."""
    results = list(results)
    if not results:
        raise ValueError("distortion_stats needs at least one result")
    out = {}
    for key, attr in (("l2", "l2_distortion"), ("l0", "l0_distortion")):
        vals = np.array([float(getattr(r, attr)) for r in results])
        out[key] = (float(vals.max()), float(vals.mean()), float(vals.min()))
    return out


# -- sweep harness -------------------------------------------------------------

CSV_FIELDS = (
    "gamma", "nt", "nms_kind", "defence_min_area", "iou_match", "fp_rate", "map",
    "n_boxes", "n_gt", "mean_l2", "mean_l0", "status",
)


@dataclass
class EvalCell:
    gamma: float | None
    nt: float
    nms_kind: str
    defence_min_area: float
    iou_match: float
    fp_rate: float | None
    map: float | None
    n_boxes: int
    n_gt: int
    mean_l2: float
    mean_l0: float
    status: str = "ok"

    def row(self) -> dict:
        def fmt(x):
            if x is None or (isinstance(x, float) and np.isnan(x)):
                return ""
            return f"{x:.6g}" if isinstance(x, float) else x

        return {k: fmt(getattr(self, k)) if k != "gamma" or self.gamma is not None else "benign"
                for k in CSV_FIELDS}


@dataclass
class EvalReport:
    nt_values: list[float]
    gamma_values: list[float | None]
    iou_matches: list[float]
    cells: list[EvalCell] = field(default_factory=list)
    results: dict = field(default_factory=dict, repr=False)

    def select(self, **kw) -> list[EvalCell]:
        return [c for c in self.cells if all(getattr(c, k) == v for k, v in kw.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            writer.writeheader()
            for cell in self.cells:
                writer.writerow(cell.row())


def evaluate_examples(
    images: Sequence[np.ndarray],
    gts: Sequence[GroundTruth],
    model,
    nt: float,
    nms_kind: str = "hard",
    defence_min_area: float = 0.0,
    iou_match: float = 0.5,
    objectness_threshold: float = 0.5,
) -> dict:
    """Detect every image and compute mean FP rate and mAP for one setting."""
    from .detector import detect

    dets = [detect(img, model, objectness_threshold, nt, nms_kind, defence_min_area) for img in images]
    return score_detections(dets, gts, model.num_classes, iou_match)


def score_detections(dets, gts, num_classes, iou_match) -> dict:
    rates = [fp_rate(d, g, iou_match) for d, g in zip(dets, gts)]
    defined = [r for r in rates if r is not NO_DETECTIONS]
    m, _ = mean_average_precision(dets, gts, num_classes, iou_match)
    return {
        "fp_rate": float(np.mean(defined)) if defined else NO_DETECTIONS,
        "fp_rates": rates,
        "n_undefined": len(rates) - len(defined),
        "map": m,
        "n_boxes": int(sum(len(d) for d in dets)),
        "n_gt": int(sum(len(g) for g in gts)),
        "detections": dets,
    }


def sweep(
    scenes,
    models,
    gamma_grid: Sequence[float],
    nt_grid: Sequence[float],
    nms_kind: str = "hard",
    defence_min_areas: Sequence[float] = (0.0,),
    iou_matches: Sequence[float] = (0.5, 0.75),
    attack_config=None,
    include_benign: bool = True,
    eval_model=None,
    attack_cache: dict | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Attack each scene once per gamma, then re-detect across the NMS grid.

    ``models`` drive the attack (one model, or several for an ensemble);
    ``eval_model`` (default: first model) is the detector being scored.
    A failing cell is recorded with a status string instead of aborting.
    """
    from .attack import AttackConfig, run_attack

    if not gamma_grid and not include_benign:
        raise ValueError("empty gamma grid")
    if not nt_grid:
        raise ValueError("empty NMS threshold grid")
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    eval_model = eval_model or models[0]
    base_cfg = attack_config or AttackConfig()
    gts = [sc.truths for sc in scenes]
    report = EvalReport(list(nt_grid), ([None] if include_benign else []) + list(gamma_grid),
                        list(iou_matches))
    cache = attack_cache if attack_cache is not None else {}

    def attack_all(gamma):
        from dataclasses import replace

        cfg = replace(base_cfg, gamma=gamma)
        todo = [k for k in range(len(scenes)) if (gamma, k) not in cache]
        if jobs > 1 and len(todo) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(jobs) as pool:
                outs = list(pool.map(run_attack, [scenes[k].image for k in todo],
                                     [models] * len(todo), [cfg] * len(todo)))
        else:
            outs = [run_attack(scenes[k].image, models, cfg) for k in todo]
        for k, res in zip(todo, outs):
            cache[(gamma, k)] = res
        return [cache[(gamma, k)] for k in range(len(scenes))]

    for gamma in report.gamma_values:
        try:
            if gamma is None:
                images = [sc.image for sc in scenes]
                l2 = l0 = 0.0
            else:
                results = attack_all(gamma)
                report.results[gamma] = results
                images = [r.adversarial_quantized for r in results]
                stats = distortion_stats(results)
                l2, l0 = stats["l2"][1], stats["l0"][1]
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.exception("attack failed for gamma=%s", gamma)
            for nt in nt_grid:
                for area in defence_min_areas:
                    for im in iou_matches:
                        report.cells.append(EvalCell(gamma, nt, nms_kind, area, im, None, None, 0,
                                                     sum(len(g) for g in gts), float("nan"),
                                                     float("nan"), f"attack-error: {exc}"))
            continue
        for nt in nt_grid:
            for area in defence_min_areas:
                for im in iou_matches:
                    try:
                        out = evaluate_examples(images, gts, eval_model, nt, nms_kind, area, im)
                        fp = out["fp_rate"]
                        status = "ok" if fp is not NO_DETECTIONS else "no-detections"
                        if fp is not NO_DETECTIONS and out["n_undefined"]:
                            status = f"ok ({out['n_undefined']} images without detections)"
                        cell = EvalCell(gamma, nt, nms_kind, area, im,
                                        None if fp is NO_DETECTIONS else fp, out["map"],
                                        out["n_boxes"], out["n_gt"], l2, l0, status)
                    except Exception as exc:  # noqa: BLE001
                        log.exception("evaluation failed")
                        cell = EvalCell(gamma, nt, nms_kind, area, im, None, None, 0, 0,
                                        l2, l0, f"eval-error: {exc}")
                    report.cells.append(cell)
    return report
