"""
Box geometry
============

Axis-aligned boxes in corner format ``(x1, y1, x2, y2)`` with continuous pixel
coordinates (origin top-left). Everything here works on numpy arrays of shape
``(N, 4)``; single boxes are accepted wherever a length-4 sequence makes sense.

Contents: IoU, Faster R-CNN box parameterization, anchor tiling, anchor target
assignment (ground truth + optional label teacher), greedy NMS and the
balanced anchor minibatch sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

if TYPE_CHECKING:
    from .dataio import AnnotatedImage

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1

# provenance of the repetition target c*
PROV_GT, PROV_TEACHER, PROV_IGNORE = 0, 1, 2

# anchor (y*, c*) source for anchors away from every annotated box
LabelTeacher = Callable[[np.ndarray, "AnnotatedImage"], "tuple[np.ndarray, np.ndarray]"]


def as_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.ndim == 1:
        b = b[None, :]
    if b.ndim != 2 or b.shape[1] != 4:
        raise ValueError(f"boxes must have shape (N, 4), got {b.shape}")
    return b


def box_area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def box_iou(boxes1, boxes2) -> np.ndarray:
    """
    Pairwise IoU.

    Args:
        boxes1: (N, 4) boxes
        boxes2: (M, 4) boxes

    Returns:
        (N, M) IoU matrix; pairs with zero union give 0.
    """
    a, b = as_boxes(boxes1), as_boxes(boxes2)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a, b) -> float:
    """IoU of two single boxes."""
    return float(box_iou(a, b)[0, 0])


def clip_boxes(boxes, height: float, width: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def _center_size(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_boxes(boxes, anchors) -> np.ndarray:
    """
    Regression targets ``(tx, ty, tw, th)`` of ``boxes`` relative to ``anchors``.

    tx = (cx - cxa) / wa, ty = (cy - cya) / ha, tw = log(w / wa), th = log(h / ha)
    """
    cx, cy, w, h = _center_size(as_boxes(boxes))
    cxa, cya, wa, ha = _center_size(as_boxes(anchors))
    return np.stack(
        [(cx - cxa) / wa, (cy - cya) / ha, np.log(w / wa), np.log(h / ha)], axis=1
    )


def decode_boxes(deltas, anchors) -> np.ndarray:
    """Inverse of :func:`encode_boxes`."""
    d = as_boxes(deltas)
    cxa, cya, wa, ha = _center_size(as_boxes(anchors))
    cx = d[:, 0] * wa + cxa
    cy = d[:, 1] * ha + cya
    w = np.exp(d[:, 2]) * wa
    h = np.exp(d[:, 3]) * ha
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(box, anchor) -> np.ndarray:
    return encode_boxes(box, anchor)[0]


def decode_box(delta, anchor) -> np.ndarray:
    return decode_boxes(delta, anchor)[0]


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor shapes tiled at every feature location.

    ``aspect_ratios`` are h/w. Each anchor has area ``size**2``.
    """

    sizes: tuple = (32.0, 64.0, 128.0, 256.0)
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    stride: int = 16

    def __post_init__(self):
        if not self.sizes or min(self.sizes) <= 0:
            raise ValueError("anchor sizes must be positive")
        if not self.aspect_ratios or min(self.aspect_ratios) <= 0:
            raise ValueError("aspect ratios must be positive")
        if self.stride <= 0:
            raise ValueError("stride must be positive")

    @property
    def num_anchors(self) -> int:
        return len(self.sizes) * len(self.aspect_ratios)

    def base_shapes(self) -> np.ndarray:
        """(k, 2) array of (w, h), size-major then ratio."""
        shapes = []
        for s in self.sizes:
            for r in self.aspect_ratios:
                w = s / np.sqrt(r)
                shapes.append((w, w * r))
        return np.asarray(shapes, dtype=np.float64)


def generate_anchors(cfg: AnchorConfig, feat_h: int, feat_w: int) -> np.ndarray:
    """
    Tile anchors over a ``feat_h x feat_w`` grid.

    Order is row-major over locations, then (size, ratio) within a location, so
    anchor ``(i * feat_w + j) * k + a`` sits at feature cell ``(i, j)``.

    Returns:
        (feat_h * feat_w * k, 4) boxes
    """
    if feat_h < 1 or feat_w < 1:
        raise ValueError("feature map must be at least 1x1")
    s = cfg.stride
    ys, xs = np.meshgrid(
        s * (np.arange(feat_h) + 0.5), s * (np.arange(feat_w) + 0.5), indexing="ij"
    )
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1)  # (L, 2)
    half = cfg.base_shapes() / 2.0  # (k, 2)
    c = centers[:, None, :]
    boxes = np.concatenate([c - half[None], c + half[None]], axis=2)
    return boxes.reshape(-1, 4)


@dataclass
class AnchorTargets:
    """Per-anchor training targets.

    labels: 1 positive, 0 negative, -1 ignore.
    deltas: regression targets, only meaningful where labels == 1.
    repetition: c*, only meaningful where ``rep_mask``.
    provenance: PROV_GT / PROV_TEACHER / PROV_IGNORE, the source of c*.
    """

    labels: np.ndarray
    deltas: np.ndarray
    repetition: np.ndarray
    provenance: np.ndarray
    max_iou: np.ndarray = field(repr=False)

    @property
    def rep_mask(self) -> np.ndarray:
        return self.provenance != PROV_IGNORE

    @property
    def num_teacher(self) -> int:
        return int(np.sum(self.provenance == PROV_TEACHER))

    def summary(self) -> dict:
        return {
            "positive": int(np.sum(self.labels == POSITIVE)),
            "negative": int(np.sum(self.labels == NEGATIVE)),
            "ignore": int(np.sum(self.labels == IGNORE)),
            "teacher": self.num_teacher,
            "teacher_positive": int(
                np.sum((self.provenance == PROV_TEACHER) & (self.labels == POSITIVE))
            ),
        }


def assign_anchor_targets(
    anchors,
    gt_boxes,
    gt_counts,
    teacher: Optional[LabelTeacher] = None,
    image: Optional["AnnotatedImage"] = None,
    pos_thresh: float = 0.7,
    neg_thresh: float = 0.3,
) -> AnchorTargets:
    """
    Label anchors with the Faster R-CNN protocol plus repetition targets.

    Positive: IoU > ``pos_thresh`` with some GT box, or best anchor for some GT box.
    Negative: max IoU < ``neg_thresh``. Everything else is ignored.
    Positives regress toward their best GT box and take that box's class count
    as c*. Anchors with zero IoU against every annotated box are handed to
    ``teacher`` (if any), which supplies both y* and c*.
    """
    anchors = as_boxes(anchors)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    deltas = np.zeros((n, 4))
    rep = np.zeros(n)
    prov = np.full(n, PROV_IGNORE, dtype=np.int8)

    gt = np.zeros((0, 4)) if gt_boxes is None or len(gt_boxes) == 0 else as_boxes(gt_boxes)
    counts = np.asarray(gt_counts if gt_counts is not None else [], dtype=np.float64)
    if len(counts) != len(gt):
        raise ValueError("need one count per GT box")
    if np.any(counts < 1):
        raise ValueError("GT counts must be >= 1")

    if len(gt):
        ious = box_iou(anchors, gt)
        max_iou = ious.max(axis=1)
        best_gt = ious.argmax(axis=1)
        labels[:] = IGNORE
        labels[max_iou < neg_thresh] = NEGATIVE
        pos = max_iou > pos_thresh
        # every GT box gets its best anchor(s), ties included
        gt_best = ious.max(axis=0)
        ties = (ious == gt_best[None, :]) & (gt_best[None, :] > 0)
        forced = np.nonzero(ties)
        pos[forced[0]] = True
        best_gt[forced[0]] = forced[1]
        labels[pos] = POSITIVE
        deltas[pos] = encode_boxes(gt[best_gt[pos]], anchors[pos])
        rep[pos] = counts[best_gt[pos]]
        prov[pos] = PROV_GT
    else:
        max_iou = np.zeros(n)

    if teacher is not None:
        free = max_iou == 0
        if np.any(free):
            y_t, c_t = teacher(anchors[free], image)
            labels[free] = np.where(np.asarray(y_t) > 0, POSITIVE, NEGATIVE)
            rep[free] = np.asarray(c_t, dtype=np.float64)
            prov[free] = PROV_TEACHER

    return AnchorTargets(labels, deltas, rep, prov, max_iou)


def nms(boxes, scores, iou_thresh: float = 0.7) -> np.ndarray:
    """
    Greedy non-maximum suppression.

    Returns:
        indices of kept boxes, sorted by descending score
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must be in (0, 1)")
    b = as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    keep = []
    suppressed = np.zeros(len(b), dtype=bool)
    ious = box_iou(b, b) if len(b) else np.zeros((0, 0))
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def sample_anchor_batch(
    labels, batch: int, rng: np.random.Generator
) -> np.ndarray:
    """Up to ``batch // 2`` positives, the rest negatives, drawn without replacement."""
    if batch < 2:
        raise ValueError("batch must be >= 2")
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), batch // 2)
    n_neg = min(len(neg), batch - n_pos)
    pos = rng.choice(pos, n_pos, replace=False) if n_pos else pos[:0]
    neg = rng.choice(neg, n_neg, replace=False) if n_neg else neg[:0]
    return np.concatenate([pos, neg]).astype(np.int64)

