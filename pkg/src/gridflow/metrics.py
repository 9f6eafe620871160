"""IoU, precision-recall AUC and vehicle retention for predicted grids."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import VehicleInstance

RETENTION_MIN_CELLS = 10
RETENTION_PROB = 0.3


def iou(pred, target, threshold: float = 0.5) -> float:
    p = np.asarray(pred) >= threshold
    t = np.asarray(target) > 0.5
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


def pr_thresholds(n: int = 100, include_one: bool = False) -> np.ndarray:
    return np.linspace(0.0, 1.0, n, endpoint=include_one)


def pr_curve(pred, target, n_thresholds: int = 100, include_one: bool = False):
    """Precision and recall per threshold (prediction positive when ``p >= tau``)."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target).ravel() > 0.5
    taus = pr_thresholds(n_thresholds, include_one)
    positive = p[None, :] >= taus[:, None]
    tp = np.count_nonzero(positive & t[None, :], axis=1)
    n_pos_pred = np.count_nonzero(positive, axis=1)
    n_true = np.count_nonzero(t)
    precision = np.where(n_pos_pred > 0, tp / np.maximum(n_pos_pred, 1), 1.0)
    recall = tp / n_true
    return taus, precision, recall


def pr_auc(pred, target, n_thresholds: int = 100, include_one: bool = False) -> Optional[float]:
    """Trapezoidal area under the PR curve; ``None`` when ``target`` has no positive.

    Points are ordered by recall (ties by descending precision) and anchored at
    recall 0 with the precision of the highest threshold.
    """
    if not np.any(np.asarray(target) > 0.5):
        return None
    _, precision, recall = pr_curve(pred, target, n_thresholds, include_one)
    order = np.lexsort((-precision, recall))
    r = np.concatenate([[0.0], recall[order]])
    pr = np.concatenate([[precision[-1]], precision[order]])
    return float(np.sum(np.diff(r) * (pr[1:] + pr[:-1]) / 2.0))


def footprint_stats(pred, mask, prob: float = RETENTION_PROB) -> int:
    return int(np.count_nonzero((np.asarray(pred) > prob) & mask))


@dataclass
class RetentionCounts:
    dynamic_retained: int = 0
    dynamic_total: int = 0
    static_retained: int = 0
    static_total: int = 0
    lost_ids: list = field(default_factory=list)

    def __add__(self, other: "RetentionCounts") -> "RetentionCounts":
        return RetentionCounts(self.dynamic_retained + other.dynamic_retained,
                               self.dynamic_total + other.dynamic_total,
                               self.static_retained + other.static_retained,
                               self.static_total + other.static_total,
                               self.lost_ids + other.lost_ids)

    @property
    def dynamic_rate(self) -> Optional[float]:
        return self.dynamic_retained / self.dynamic_total if self.dynamic_total else None

    @property
    def static_rate(self) -> Optional[float]:
        return self.static_retained / self.static_total if self.static_total else None


def retention(pred_seq: Sequence, future_instances: Sequence[Sequence[VehicleInstance]],
              current_instances: Sequence[VehicleInstance], shape: tuple[int, int],
              min_cells: int = RETENTION_MIN_CELLS, prob: float = RETENTION_PROB,
              every_step: bool = True) -> RetentionCounts:
    """Count vehicles whose predicted occupancy keeps overlapping their GT footprint.

    ``pred_seq[k]`` is the prediction for horizon step ``k`` and
    ``future_instances[k]`` the GT instances at that step. A vehicle counts as
    overlapping at a step when at least ``min_cells`` cells inside its footprint
    exceed ``prob``. Vehicles that leave the grid (absent at some step, or with
    fewer than ``min_cells`` in-grid footprint cells) are excluded. With
    ``every_step=False`` a vehicle is lost only if it fails at the final step.
    """
    counts = RetentionCounts()
    for vi in current_instances:
        masks = []
        for inst in future_instances:
            match = next((x for x in inst if x.id == vi.id), None)
            masks.append(None if match is None else match.footprint(shape))
        if any(m is None or np.count_nonzero(m) < min_cells for m in masks):
            continue
        hits = [footprint_stats(p, m, prob) >= min_cells for p, m in zip(pred_seq, masks)]
        kept = all(hits) if every_step else hits[-1]
        if vi.dynamic:
            counts.dynamic_total += 1
            counts.dynamic_retained += int(kept)
        else:
            counts.static_total += 1
            counts.static_retained += int(kept)
        if not kept:
            counts.lost_ids.append(vi.id)
    return counts


def vehicle_iou(pred, gt_footprint: np.ndarray, region: np.ndarray, threshold: float = 0.5) -> float:
    """IoU restricted to ``region`` (e.g. the vehicle's swept neighbourhood)."""
    p = (np.asarray(pred) >= threshold) & region
    t = gt_footprint & region
    union = np.count_nonzero(p | t)
    return 1.0 if union == 0 else np.count_nonzero(p & t) / union


def dilate(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            shifted = np.zeros_like(mask)
            shifted[max(dr, 0):h + min(dr, 0), max(dc, 0):w + min(dc, 0)] = \
                mask[max(-dr, 0):h + min(-dr, 0), max(-dc, 0):w + min(-dc, 0)]
            out |= shifted
    return out


@dataclass
class SequenceScores:
    """Scores for one (input window, horizon) evaluation."""

    iou_y: list
    iou_w: list
    auc_y: list
    auc_w: list
    retention: RetentionCounts
    has_dynamic: bool = False


def score_sequence(y_future: Sequence, w_future: Sequence, gt_semantic: Sequence,
                   gt_future_instances: Sequence, current_instances: Sequence,
                   retention_source: str = "w", every_step: bool = True) -> SequenceScores:
    shape = np.asarray(gt_semantic[0]).shape
    iy = [iou(p, t) for p, t in zip(y_future, gt_semantic)]
    iw = [iou(p, t) for p, t in zip(w_future, gt_semantic)]
    ay = [pr_auc(p, t) for p, t in zip(y_future, gt_semantic)]
    aw = [pr_auc(p, t) for p, t in zip(w_future, gt_semantic)]
    source = w_future if retention_source == "w" else y_future
    ret = retention(source, gt_future_instances, current_instances, shape, every_step=every_step)
    return SequenceScores(iy, iw, ay, aw, ret, any(vi.dynamic for vi in current_instances))


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(math.fsum(vals) / len(vals)) if vals else None


def _seq_mean(values) -> Optional[float]:
    per = [_mean(v) for v in values]
    return _mean(per)


def evaluate(scores: Sequence[SequenceScores]) -> dict:
    """Aggregate per-sequence scores: mean over steps, then over sequences.

    Means use ``math.fsum`` so the report is independent of sequence order.
    """
    if not scores:
        raise ValueError("cannot evaluate an empty dataset")
    horizon = len(scores[0].iou_w)
    per_step = []
    for k in range(horizon):
        per_step.append({
            "step": k + 1,
            "iou_y": _mean(s.iou_y[k] for s in scores),
            "iou_w": _mean(s.iou_w[k] for s in scores),
            "auc_y": _mean(s.auc_y[k] for s in scores),
            "auc_w": _mean(s.auc_w[k] for s in scores),
        })
    total = RetentionCounts()
    for s in scores:
        total = total + RetentionCounts(s.retention.dynamic_retained, s.retention.dynamic_total,
                                        s.retention.static_retained, s.retention.static_total)
    dyn = [s for s in scores if s.has_dynamic]
    return {
        "n_sequences": len(scores),
        "horizon": horizon,
        "mean": {
            "iou_y": _seq_mean(s.iou_y for s in scores),
            "iou_w": _seq_mean(s.iou_w for s in scores),
            "auc_y": _seq_mean(s.auc_y for s in scores),
            "auc_w": _seq_mean(s.auc_w for s in scores),
        },
        "mean_dynamic_scenes": {
            "n_sequences": len(dyn),
            "iou_y": _seq_mean(s.iou_y for s in dyn),
            "iou_w": _seq_mean(s.iou_w for s in dyn),
        },
        "per_step": per_step,
        "retention": {
            "dynamic": {"retained": total.dynamic_retained, "total": total.dynamic_total,
                        "rate": total.dynamic_rate},
            "static": {"retained": total.static_retained, "total": total.static_total,
                       "rate": total.static_rate},
        },
    }
