"""Scoring of predictions against windowed ground truth."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .baseline import GridPrediction
from .dataset import Window
from .metrics import evaluate, score_sequence

PER_STEP_COLUMNS = ("step", "iou_y", "iou_w", "auc_y", "auc_w")


def score_windows(pred: GridPrediction, windows: Sequence[Window], retention_every_step: bool = True,
                  workers: Optional[int] = None) -> dict:
    """EvalReport dict for ``pred`` over ``windows`` (same order)."""
    if len(pred) != len(windows):
        raise ValueError(f"{len(pred)} predictions for {len(windows)} windows")

    def one(i):
        w = windows[i]
        return score_sequence(pred.y_future[i], pred.w_future[i], w.targets[1:, 0], w.future_instances,
                              w.current_instances, every_step=retention_every_step)

    with ThreadPoolExecutor(max_workers=workers or 1) as pool:
        scores = list(pool.map(one, range(len(windows))))
    return evaluate(scores)


def per_step_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PER_STEP_COLUMNS)
    for row in report["per_step"]:
        writer.writerow(["" if row[c] is None else repr(row[c]) for c in PER_STEP_COLUMNS])
    return buf.getvalue()


def occupancy_frequency(samples: Sequence[np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """Fraction of samples with ``p >= threshold`` per cell."""
    stack = np.stack([np.asarray(s) >= threshold for s in samples])
    return stack.mean(axis=0)
