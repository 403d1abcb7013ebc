"""L2 and L0 attacks that flood the post-NMS output with false positives.

The image is reparameterized as ``x' = (tanh(w) + 1) / 2`` so every iterate
stays in [0, 1].  Each binary-search round restarts from ``w0 = atanh(2x - 1)``
and runs plain gradient descent on ``||x' - x||^2 + c * f(x')``.  An iterate
succeeds when ``f(x') <= f(x) * (1 - gamma)``.  The constant ``c`` is then
bisected: a successful round lowers ``c_max``, a failed one raises ``c_min``.

The L0 variant uses the same objective but only moves the pixels with the
largest gradient magnitude at each step; all other pixels keep their exact
original values.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imageio import quantize
from .losses import LOSS_KINDS, LossEvaluator, LossValue, TargetSet

log = logging.getLogger(__name__)

NORMS = ("l2", "l0")
L0_TOLERANCE = 1e-6
TANH_EDGE = 1.0 - 1e-12  # keeps atanh finite for saturated pixels
TRACE_FIELDS = ("round", "iteration", "c", "loss", "l2_distortion", "l0_distortion", "success")


@dataclass(frozen=True)
class AttackConfig:
    gamma: float = 0.3
    targets: TargetSet = field(default_factory=TargetSet.all)
    norm: str = "l2"
    eta: float = 1e-2
    max_iteration: int = 500
    binary_steps: int = 5
    c_init: float = 10.0
    c_min: float = 0.0
    c_max: float = 1e4
    seed: int = 0
    loss_kind: str = "f3"
    l0_top_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.c_min < self.c_max:
            raise ValueError("c_min must be below c_max")
        if self.max_iteration < 0 or self.binary_steps < 1:
            raise ValueError("need max_iteration >= 0 and binary_steps >= 1")
        if not 0.0 < self.l0_top_fraction <= 1.0:
            raise ValueError("l0_top_fraction must be in (0, 1]")


@dataclass
class AttackResult:
    original: np.ndarray
    adversarial: np.ndarray
    success: bool
    best_c: float
    loss_init: float
    loss: LossValue
    trace: list = field(default_factory=list, repr=False)
    intervals: list = field(default_factory=list)  # (c, c_min, c_max, round_success)

    @property
    def perturbation(self) -> np.ndarray:
        return self.adversarial - self.original

    @property
    def l2_distortion(self) -> float:
        return float(np.linalg.norm(self.perturbation))

    @property
    def l0_distortion(self) -> int:
        return l0_count(self.perturbation)

    @property
    def adversarial_quantized(self) -> np.ndarray:
        return quantize(self.adversarial)

    def summary(self) -> dict:
        return {
            "success": bool(self.success),
            "best_c": float(self.best_c),
            "loss_init": float(self.loss_init),
            "loss": float(self.loss.total),
            "l2_distortion": self.l2_distortion,
            "l0_distortion": int(self.l0_distortion),
            "empty_categories": list(self.loss.empty_categories),
            "intervals": [list(map(float, iv[:3])) + [bool(iv[3])] for iv in self.intervals],
        }


def l0_count(delta: np.ndarray) -> int:
    """Number of pixels with any channel changed by more than 1e-6."""
    delta = np.asarray(delta)
    return int(np.count_nonzero(np.any(np.abs(delta) > L0_TOLERANCE, axis=-1)))


def success_test(loss_now: float, loss_init: float, gamma: float) -> bool:
    return bool(loss_now <= loss_init * (1.0 - gamma))


def to_tanh_space(x: np.ndarray) -> np.ndarray:
    """The free variable ``w0`` whose image under the reparameterization is ``x``."""
    return np.arctanh(np.clip(2.0 * np.asarray(x, dtype=np.float64) - 1.0, -TANH_EDGE, TANH_EDGE))


def from_tanh_space(x: np.ndarray, omega: np.ndarray, omega0: np.ndarray | None = None):
    """Perturbed image and ``delta`` for free variable ``omega``.

    Coordinates where ``omega`` still equals ``omega0`` return ``x`` exactly,
    so pixels the optimizer never touched carry no round-off.
    """
    adv = 0.5 * (np.tanh(omega) + 1.0)
    if omega0 is not None:
        adv = np.where(omega == omega0, x, adv)
    return adv, adv - x


class ImageObjective:
    """Adversarial loss of an image batch and its gradient, averaged over models."""

    def __init__(self, models, loss_kind: str, targets: TargetSet):
        self.models = list(models) if isinstance(models, (list, tuple)) else [models]
        if not self.models:
            raise ValueError("need at least one model")
        side = self.models[0].input_side
        for m in self.models[1:]:
            if m.input_side != side or m.num_classes != self.models[0].num_classes:
                raise ValueError("ensemble members must share input side and class count")
        self.side = side
        self.loss = LossEvaluator(loss_kind, targets, side, side)

    def __call__(self, images: np.ndarray, need_grad: bool = True):
        vals, grad = [], None
        for model in self.models:
            fwd = model.forward(images)
            boxes = {k: fwd[k] for k in ("conf", "bx", "by", "bw", "bh")}
            value, g = self.loss(boxes, fwd["probs"], need_grad)
            vals.append(value)
            if need_grad:
                gi = fwd.vjp(g, "image")
                grad = gi if grad is None else grad + gi
        k = len(vals)
        if k == 1:
            value = vals[0]
        else:
            value = LossValue(
                sum(v.total for v in vals) / k,
                sum(v.conf_term for v in vals) / k,
                sum(v.dim_term for v in vals) / k,
                sum(v.pair_term for v in vals) / k,
                sorted(set().union(*[v.empty_categories for v in vals])),
                any(v.guard_active for v in vals),
            )
        if grad is not None:
            grad = grad / k
            if np.ndim(images) == 3:
                grad = grad[0]
        return value, grad


def _l0_mask(grad_omega: np.ndarray, fraction: float) -> np.ndarray | None:
    """Per-pixel mask selecting the top ``fraction`` of pixels by gradient norm."""
    if fraction >= 1.0:
        return None
    mag = np.sqrt(np.sum(grad_omega * grad_omega, axis=-1)).ravel()
    k = max(1, int(np.ceil(fraction * mag.size)))
    # stable ranking so ties resolve to the lower flat index
    top = np.argsort(-mag, kind="stable")[:k]
    mask = np.zeros(mag.size, dtype=bool)
    mask[top] = True
    return mask.reshape(grad_omega.shape[:-1])[..., None]


def run_attack(image: np.ndarray, models, cfg: AttackConfig, trace_path=None) -> AttackResult:
    """Run the configured attack on one ``(H, W, 3)`` image."""
    x = np.asarray(image, dtype=np.float64)
    objective = ImageObjective(models, cfg.loss_kind, cfg.targets)
    if x.shape != (objective.side, objective.side, 3):
        raise ValueError(f"image shape {x.shape} does not match model input side {objective.side}")
    omega0 = to_tanh_space(x)
    init_value, _ = objective(x, need_grad=False)
    loss_init = init_value.total
    if not np.isfinite(loss_init):
        raise FloatingPointError("initial loss is not finite")
    if init_value.empty_categories:
        log.info("target categories without selected boxes: %s", init_value.empty_categories)
    threshold = loss_init * (1.0 - cfg.gamma)

    c, c_lo, c_hi = cfg.c_init, cfg.c_min, cfg.c_max
    best = None  # (distortion key, adv, c)
    fallback = (np.inf, x.copy(), c)  # min-loss iterate if nothing succeeds
    trace, intervals = [], []
    for rnd in range(cfg.binary_steps):
        omega = omega0.copy()
        round_success = False
        for it in range(cfg.max_iteration + 1):
            adv, delta = from_tanh_space(x, omega, omega0)
            value, g_img = objective(adv, need_grad=it < cfg.max_iteration)
            loss = value.total
            l2sq = float(np.sum(delta * delta))
            l0 = l0_count(delta)
            ok = bool(np.isfinite(loss)) and loss <= threshold
            trace.append((rnd, it, c, loss, np.sqrt(l2sq), l0, ok))
            if not np.isfinite(loss):
                log.warning("non-finite loss in round %d iteration %d; round aborted", rnd, it)
                ok = round_success = False
                break
            if ok:
                round_success = True
                key = (l0, l2sq) if cfg.norm == "l0" else (l2sq,)
                if best is None or key < best[0]:
                    best = (key, adv.copy(), c)
            elif loss < fallback[0]:
                fallback = (loss, adv.copy(), c)
            if it == cfg.max_iteration:
                break
            dx_domega = 0.5 * (1.0 - np.tanh(omega) ** 2)
            grad = (2.0 * delta + c * g_img) * dx_domega
            if cfg.norm == "l0":
                mask = _l0_mask(grad, cfg.l0_top_fraction)
                if mask is not None:
                    grad = grad * mask
            omega = omega - cfg.eta * grad
        intervals.append((c, c_lo, c_hi, round_success))
        if round_success:
            c_hi = min(c, c_hi)
        else:
            c_lo = max(c, c_lo)
        c = 0.5 * (c_lo + c_hi)

    if best is not None:
        adv, best_c = best[1], best[2]
    else:
        adv, best_c = fallback[1], fallback[2]
    final, _ = objective(adv, need_grad=False)
    result = AttackResult(
        original=x,
        adversarial=adv,
        success=bool(np.isfinite(final.total)) and success_test(final.total, loss_init, cfg.gamma),
        best_c=best_c,
        loss_init=loss_init,
        loss=final,
        trace=trace,
        intervals=intervals,
    )
    if trace_path is not None:
        write_trace(trace_path, trace)
    return result


def l2_attack(image, models, cfg: AttackConfig, trace_path=None) -> AttackResult:
    if cfg.norm != "l2":
        raise ValueError("l2_attack needs cfg.norm == 'l2'")
    return run_attack(image, models, cfg, trace_path)


def l0_attack(image, models, cfg: AttackConfig, trace_path=None) -> AttackResult:
    if cfg.norm != "l0":
        raise ValueError("l0_attack needs cfg.norm == 'l0'")
    return run_attack(image, models, cfg, trace_path)


def write_trace(path, trace: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for rnd, it, c, loss, l2, l0, ok in trace:
            w.writerow([rnd, it, repr(float(c)), repr(float(loss)), repr(float(l2)), int(l0), int(ok)])
