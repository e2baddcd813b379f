"""Endpoint-error metrics.

The class-balanced metric here is a simplified speed-normalised EPE: for each
class, mean EPE over its dynamic points divided by their mean ground-truth
speed, then averaged over classes. It follows the intent of Bucket
Normalized EPE but uses no speed buckets, so its values are not comparable
with leaderboard numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import FlowVectors, FrameSequence
from .ode import extract_flow
from .scenegen import DYNAMIC_THRESHOLD


@dataclass
class EpeReport:
    mean_epe: float
    static_epe: Optional[float]
    dynamic_epe: Optional[float]
    per_class_dynamic_normalized: dict[int, float] = field(default_factory=dict)
    mean_dynamic_normalized: Optional[float] = None
    num_points: int = 0
    num_dynamic: int = 0

    def to_lines(self) -> list[str]:
        """``metric=value`` lines; absent values are written as ``absent``."""

        def fmt(v):
            return "absent" if v is None else repr(float(v))

        lines = [
            f"mean_epe={fmt(self.mean_epe)}",
            f"static_epe={fmt(self.static_epe)}",
            f"dynamic_epe={fmt(self.dynamic_epe)}",
            f"mean_dynamic_normalized={fmt(self.mean_dynamic_normalized)}",
            f"num_points={self.num_points}",
            f"num_dynamic={self.num_dynamic}",
        ]
        for cls in sorted(self.per_class_dynamic_normalized):
            lines.append(f"dynamic_normalized.class_{cls}={fmt(self.per_class_dynamic_normalized[cls])}")
        return lines

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


def endpoint_errors(pred: FlowVectors, gt: FlowVectors) -> np.ndarray:
    if pred.source_frame != gt.source_frame:
        raise ValueError("pred and gt flows start from different frames")
    if len(pred) != len(gt):
        raise ValueError(f"pred has {len(pred)} residuals, gt has {len(gt)}")
    diff = pred.residuals - gt.residuals
    return np.sqrt(np.sum(diff * diff, axis=1))


def average_epe(errors) -> float:
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("average_epe of an empty error list")
    return float(np.mean(e))


def _report(errors, gt_residuals, classes, threshold) -> EpeReport:
    if not threshold > 0:
        raise ValueError("dynamic speed threshold must be > 0")
    errors = np.asarray(errors, dtype=np.float64)
    speed = np.linalg.norm(np.asarray(gt_residuals, dtype=np.float64), axis=1)
    classes = np.asarray(classes).reshape(-1)
    if not (len(errors) == len(speed) == len(classes)):
        raise ValueError("errors, ground truth and classes are misaligned")
    dynamic = speed >= threshold

    per_class = {}
    for cls in np.unique(classes[dynamic]):
        sel = dynamic & (classes == cls)
        per_class[int(cls)] = float(np.mean(errors[sel]) / np.mean(speed[sel]))

    return EpeReport(
        mean_epe=average_epe(errors),
        static_epe=float(np.mean(errors[~dynamic])) if np.any(~dynamic) else None,
        dynamic_epe=float(np.mean(errors[dynamic])) if np.any(dynamic) else None,
        per_class_dynamic_normalized=per_class,
        mean_dynamic_normalized=float(np.mean(list(per_class.values()))) if per_class else None,
        num_points=len(errors),
        num_dynamic=int(dynamic.sum()),
    )


def dynamic_normalized_report(
    pred: FlowVectors, gt: FlowVectors, classes, dynamic_speed_threshold: float = DYNAMIC_THRESHOLD
) -> EpeReport:
    return _report(endpoint_errors(pred, gt), gt.residuals, classes, dynamic_speed_threshold)


def evaluate_sequence(fld, seq: FrameSequence, dynamic_speed_threshold: float = DYNAMIC_THRESHOLD) -> EpeReport:
    """Pool one-step flow errors over every frame that has a successor."""
    if not seq.has_gt or not seq.has_classes:
        raise ValueError("sequence lacks ground-truth flow or class ids")
    errors, gts, classes = [], [], []
    for t in range(seq.num_intervals):
        frame = seq.frames[t]
        if len(frame) == 0:
            continue
        pred = extract_flow(fld, seq, t, 1)
        gt = FlowVectors(frame.gt_flow, t, t + 1)
        errors.append(endpoint_errors(pred, gt))
        gts.append(frame.gt_flow)
        classes.append(frame.class_id)
    return _report(np.concatenate(errors), np.concatenate(gts), np.concatenate(classes), dynamic_speed_threshold)
