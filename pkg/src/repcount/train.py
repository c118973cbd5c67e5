"""
Two-stage training.

Stage 1 fits the RepRPN on anchor targets (ground truth plus optional teacher
labels). Stage 2 freezes it, picks exemplars with it, and fits the DPN to the
target density of each exemplar.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, module_arrays, optimizer_arrays, params_digest
from .config import TrainConfig, build_backbone, build_dpn, build_rpn
from .dataio import AnnotatedImage
from .densitymap import render_density
from .dpn import mse_loss
from .geometry import AnchorTargets, assign_anchor_targets, box_iou, sample_anchor_batch
from .reprpn import make_proposals, reprpn_loss, select_exemplars
from .teachers import make_teachers

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class StageOrderError(RuntimeError):
    """Stage 2 was started without a stage-1 checkpoint."""


def _emit(sink, record: dict):
    if sink is not None:
        sink(record)


def jsonl_sink(fh) -> Callable[[dict], None]:
    def write(rec):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()
    return write


def image_targets(
    img: AnnotatedImage, anchors: np.ndarray, teacher=None
) -> AnchorTargets:
    """Anchor targets for one image: annotated class boxes + optional teacher."""
    gt = img.annotation_boxes()
    counts = np.full(len(gt), float(img.gt_count))
    return assign_anchor_targets(anchors, gt, counts, teacher=teacher, image=img)


@dataclass
class _RPNItem:
    fm: torch.Tensor
    targets: AnchorTargets
    labelled: np.ndarray = field(repr=False)


def train_reprpn(
    dataset: Sequence[AnnotatedImage],
    cfg: TrainConfig,
    sink: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """
    Stage 1. Returns a ``reprpn`` checkpoint holding the weights, Adam state,
    per-epoch loss log and anchor target statistics.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    dtype = cfg.torch_dtype
    backbone = build_backbone(cfg)
    backbone_digest = params_digest(backbone)
    rpn = build_rpn(cfg)
    label_teacher, _ = make_teachers(cfg.teacher, cfg.sigma)
    rng = np.random.default_rng(cfg.seed)

    items = []
    stats = {"positive": 0, "negative": 0, "ignore": 0, "teacher": 0, "teacher_positive": 0}
    for img in dataset:
        fm = backbone.extract(img.image, dtype)
        anchors = rpn.anchors_for(fm.shape[1], fm.shape[2])
        t = image_targets(img, anchors, label_teacher)
        for key, v in t.summary().items():
            stats[key] += v
        items.append(_RPNItem(fm, t, np.flatnonzero(t.labels >= 0)))

    opt = torch.optim.Adam(rpn.parameters(), lr=cfg.lr)
    loss_log = []
    rpn.train()
    for epoch in range(cfg.epochs_rpn):
        order = rng.permutation(len(items))
        total = 0.0
        for i in order:
            it = items[i]
            if cfg.anchor_batch > 0:
                idx = sample_anchor_batch(it.targets.labels, cfg.anchor_batch, rng)
            else:
                idx = it.labelled
            preds = rpn.heads(rpn.encode(it.fm))
            loss = reprpn_loss(preds, it.targets, idx, cfg.lam)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite RepRPN loss at epoch {epoch}, image {dataset[i].name}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        rec = {"stage": "rpn", "epoch": epoch, "loss": total / len(items)}
        loss_log.append(rec["loss"])
        _emit(sink, rec)

    if params_digest(backbone) != backbone_digest:
        raise RuntimeError("backbone parameters changed during training")
    arrays = module_arrays("rpn", rpn)
    arrays.update(optimizer_arrays("opt", opt))
    meta = {
        "config": cfg.to_dict(),
        "loss_log": loss_log,
        "target_stats": stats,
        "backbone_digest": backbone_digest,
        "num_images": len(dataset),
    }
    return Checkpoint("reprpn", meta, arrays)


def load_rpn(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None):
    if ckpt is None or ckpt.kind != "reprpn":
        raise StageOrderError("stage 2 needs a stage-1 (reprpn) checkpoint")
    cfg = cfg or TrainConfig.from_dict(ckpt.meta["config"])
    rpn = build_rpn(cfg)
    rpn.load_state_dict({k: v.to(cfg.torch_dtype) if v.is_floating_point() else v
                         for k, v in ckpt.state_dict("rpn").items()})
    rpn.requires_grad_(False)
    rpn.eval()
    return rpn


@torch.no_grad()
def propose(rpn, fm: torch.Tensor, image_hw):
    preds = rpn(fm)
    anchors = rpn.anchors_for(fm.shape[1], fm.shape[2])
    return make_proposals(preds, anchors, image_hw), preds["encoded"]


def exemplar_target(img: AnnotatedImage, box, density_teacher, sigma: float):
    """Z* for an exemplar: annotated dot map if it touches an annotated box, else the teacher."""
    ann = img.annotation_boxes()
    if len(ann) and box_iou(box, ann).max() > 0:
        return render_density(img.dots, img.height, img.width, sigma), "ground-truth"
    if density_teacher is not None:
        return density_teacher(box, img), "teacher"
    return None, "skipped"


def train_dpn(
    dataset: Sequence[AnnotatedImage],
    rpn_ckpt: Checkpoint,
    cfg: Optional[TrainConfig] = None,
    sink: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """
    Stage 2. The RepRPN from ``rpn_ckpt`` stays frozen; images where it yields
    no usable exemplar are skipped with a warning.
    """
    if rpn_ckpt is None or getattr(rpn_ckpt, "kind", None) != "reprpn":
        raise StageOrderError("stage 2 needs a stage-1 (reprpn) checkpoint")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = cfg or TrainConfig.from_dict(rpn_ckpt.meta["config"])
    dtype = cfg.torch_dtype
    backbone = build_backbone(cfg)
    rpn = load_rpn(rpn_ckpt, TrainConfig.from_dict(rpn_ckpt.meta["config"]).updated(dtype=cfg.dtype))
    rpn_digest = params_digest(rpn)
    dpn = build_dpn(cfg)
    _, density_teacher = make_teachers(cfg.teacher, cfg.sigma)
    rng = np.random.default_rng(cfg.seed + 1)
    stride = backbone.stride

    items = []
    stats = {"exemplars": 0, "ground-truth": 0, "teacher": 0, "skipped": 0, "images_skipped": 0}
    for img in dataset:
        fm = backbone.extract(img.image, dtype)
        props, encoded = propose(rpn, fm, (img.height, img.width))
        chosen = select_exemplars(props, cfg.top_k, cfg.nms_thresh, key=cfg.selection)
        pairs = []
        for p in chosen:
            z, source = exemplar_target(img, p.box, density_teacher, cfg.sigma)
            stats[source] += 1
            if z is not None:
                pairs.append((p.box, torch.as_tensor(z, dtype=dtype)))
        stats["exemplars"] += len(chosen)
        if not pairs:
            stats["images_skipped"] += 1
            log.warning("no usable exemplar for %s; skipped", img.name)
            continue
        image_fm = encoded if cfg.dpn.image_features == "encoder" else fm
        boxes = [b for b, _ in pairs]
        items.append((img, fm, image_fm, (boxes, torch.stack([z for _, z in pairs]))))
    if not items:
        raise RuntimeError("no image produced a usable exemplar")

    opt = torch.optim.Adam(dpn.parameters(), lr=cfg.lr)
    loss_log = []
    for epoch in range(cfg.epochs_dpn):
        total = 0.0
        for i in rng.permutation(len(items)):
            img, fm, image_fm, pairs = items[i]
            boxes, z_star = pairs
            z = dpn.predict_many(image_fm, fm, boxes, stride, (img.height, img.width))
            # mean over exemplars of the per-map MSE
            loss = mse_loss(z, z_star)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite DPN loss at epoch {epoch}, image {img.name}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        rec = {"stage": "dpn", "epoch": epoch, "loss": total / len(items)}
        loss_log.append(rec["loss"])
        _emit(sink, rec)

    if params_digest(rpn) != rpn_digest:
        raise RuntimeError("RepRPN parameters changed during stage 2")
    arrays = module_arrays("dpn", dpn)
    arrays.update(optimizer_arrays("opt", opt))
    meta = {
        "config": cfg.to_dict(),
        "loss_log": loss_log,
        "exemplar_stats": stats,
        "rpn_digest": rpn_ckpt.digest(),
        "rpn_target_stats": rpn_ckpt.meta.get("target_stats", {}),
        "num_images": len(dataset),
    }
    return Checkpoint("dpn", meta, arrays)


def load_dpn(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None):
    if ckpt is None or ckpt.kind != "dpn":
        raise ValueError("expected a dpn checkpoint")
    cfg = cfg or TrainConfig.from_dict(ckpt.meta["config"])
    dpn = build_dpn(cfg)
    dpn.load_state_dict({k: v.to(cfg.torch_dtype) for k, v in ckpt.state_dict("dpn").items()})
    dpn.requires_grad_(False)
    dpn.eval()
    return dpn


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average over complete windows."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window

