"""Top-k counting metrics and the repetition-score fast counter."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .geometry import as_boxes, box_iou

MATCH_IOU = 0.3


def topk_count_estimate(boxes, counts, gt_boxes, k: int, iou_thresh: float = MATCH_IOU) -> float:
    """
    Count estimate from the first ``k`` proposals.

    ``boxes``/``counts`` must already be ordered by repetition score. Proposals
    with IoU >= ``iou_thresh`` against any GT box are averaged; if none
    qualifies, all ``k`` counts are averaged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = np.asarray(counts, dtype=np.float64)[:k]
    if len(counts) == 0:
        raise ValueError("need at least one proposal")
    boxes = as_boxes(boxes)[:k]
    gt = np.zeros((0, 4)) if gt_boxes is None or len(gt_boxes) == 0 else as_boxes(gt_boxes)
    if len(gt):
        hit = box_iou(boxes, gt).max(axis=1) >= iou_thresh
        if hit.any():
            return float(counts[hit].mean())
    return float(counts.mean())


def fast_count(proposals, gt_boxes, k: int = 1, iou_thresh: float = MATCH_IOU) -> float:
    """Top-k estimate using each proposal's repetition score as its count."""
    boxes = [p.box for p in proposals]
    return topk_count_estimate(boxes, [p.repetition for p in proposals], gt_boxes, k, iou_thresh)


def mae_rmse(pairs: Sequence) -> tuple[float, float]:
    """(MAE, RMSE) over ``(y, y_hat)`` pairs."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("mae_rmse needs at least one pair")
    err = arr[:, 0] - arr[:, 1]
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err**2)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])
