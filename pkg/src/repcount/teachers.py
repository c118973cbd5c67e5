"""
Label and density teachers for unannotated content.

A label teacher maps anchor boxes on an image to ``(y*, c*)``; a density
teacher maps an exemplar box to a target density map. The oracle versions read
the complete synthetic ground truth (``AnnotatedImage.hidden_gt``) and stand in
for pretrained networks. Real teachers only need the same call signatures.
"""

from __future__ import annotations

from typing import Optional, Protocol

import numpy as np

from .dataio import AnnotatedImage, HiddenClass
from .densitymap import DEFAULT_SIGMA, render_density
from .geometry import as_boxes, box_iou

ORACLE_IOU = 0.5


class LabelTeacher(Protocol):
    def __call__(self, boxes: np.ndarray, image: AnnotatedImage) -> tuple[np.ndarray, np.ndarray]: ...


class DensityTeacher(Protocol):
    def __call__(self, box, image: AnnotatedImage) -> np.ndarray: ...


def _hidden_arrays(hidden_gt: list[HiddenClass]):
    boxes = [hc.boxes for hc in hidden_gt if hc.count]
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    cls = np.concatenate([np.full(hc.count, i) for i, hc in enumerate(hidden_gt) if hc.count])
    return np.vstack(boxes), cls


def _best_class(boxes, hidden_gt, thresh):
    """Per box: index into hidden_gt of the best-IoU instance's class, -1 if below thresh."""
    boxes = as_boxes(boxes)
    all_boxes, cls = _hidden_arrays(hidden_gt)
    if len(all_boxes) == 0:
        return np.full(len(boxes), -1)
    ious = box_iou(boxes, all_boxes)
    best = ious.argmax(axis=1)
    return np.where(ious.max(axis=1) > thresh, cls[best], -1)


def oracle_label_teacher(anchor, hidden_gt: list[HiddenClass], thresh: float = ORACLE_IOU):
    """``(1, class count)`` if the anchor's best hidden match has IoU > thresh, else ``(0, 0)``."""
    c = _best_class(anchor, hidden_gt, thresh)[0]
    if c < 0:
        return 0, 0.0
    return 1, float(hidden_gt[c].count)


def oracle_density_teacher(
    exemplar, hidden_gt: list[HiddenClass], h: int, w: int,
    sigma: float = DEFAULT_SIGMA, thresh: float = ORACLE_IOU,
) -> np.ndarray:
    """Rendered dot map of the exemplar's hidden class, or zeros over background."""
    c = _best_class(exemplar, hidden_gt, thresh)[0]
    if c < 0:
        return np.zeros((h, w))
    return render_density(hidden_gt[c].dots, h, w, sigma)


class OracleLabelTeacher:
    def __init__(self, thresh: float = ORACLE_IOU):
        self.thresh = thresh

    def __call__(self, boxes, image: AnnotatedImage):
        if image is None or image.hidden_gt is None:
            raise ValueError("the oracle label teacher needs hidden ground truth")
        c = _best_class(boxes, image.hidden_gt, self.thresh)
        counts = np.array([hc.count for hc in image.hidden_gt], dtype=np.float64)
        y = (c >= 0).astype(np.int64)
        return y, np.where(c >= 0, counts[np.maximum(c, 0)], 0.0)


class OracleDensityTeacher:
    def __init__(self, sigma: float = DEFAULT_SIGMA, thresh: float = ORACLE_IOU):
        self.sigma, self.thresh = sigma, thresh

    def __call__(self, box, image: AnnotatedImage) -> np.ndarray:
        if image.hidden_gt is None:
            raise ValueError("the oracle density teacher needs hidden ground truth")
        return oracle_density_teacher(
            box, image.hidden_gt, image.height, image.width, self.sigma, self.thresh
        )


def make_teachers(mode: str, sigma: float = DEFAULT_SIGMA) -> tuple[Optional[LabelTeacher], Optional[DensityTeacher]]:
    """``"oracle"`` or ``"none"`` (no knowledge transfer)."""
    if mode == "oracle":
        return OracleLabelTeacher(), OracleDensityTeacher(sigma)
    if mode == "none":
        return None, None
    raise ValueError(f"unknown teacher mode {mode!r}")
