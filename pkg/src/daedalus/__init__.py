"""Desk-scale lab for adversarial examples that break non-maximum suppression.

Seeded micro-detectors are trained on synthetic shape scenes, then attacked
with L2/L0 perturbations (and printable posters) that flood the post-NMS
output with false positives.
"""
__version__ = "0.1.0"

from ._kernels import BACKEND  # noqa: E402
from .attack import AttackConfig, AttackResult, l0_attack, l2_attack, run_attack  # noqa: E402
from .detector import DetectorModel, build_micro, detect, load_model, save_model, train_micro  # noqa: E402
from .geometry import Box, DetectionSet, iou, nms, soft_nms  # noqa: E402
from .losses import TargetSet, loss_f1, loss_f2, loss_f3  # noqa: E402
from .scenes import GroundTruth, Scene, generate  # noqa: E402

__all__ = [
    "__version__", "BACKEND", "AttackConfig", "AttackResult", "l0_attack", "l2_attack", "run_attack",
    "DetectorModel", "build_micro", "detect", "load_model", "save_model", "train_micro",
    "Box", "DetectionSet", "iou", "nms", "soft_nms", "TargetSet", "loss_f1", "loss_f2", "loss_f3",
    "GroundTruth", "Scene", "generate",
]
