"""Inference: backbone -> RepRPN -> exemplar selection -> one density map per exemplar."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import TrainConfig, build_backbone
from .dataio import AnnotatedImage
from .densitymap import count
from .evaluate import fast_count, mae_rmse, pearson, topk_count_estimate
from .reprpn import Proposal, select_exemplars
from .train import load_dpn, load_rpn, propose


@dataclass
class Exemplar:
    proposal: Proposal
    density: Optional[np.ndarray]

    @property
    def count(self) -> float:
        # below the DPN cut the repetition score is the count
        if self.density is None:
            return self.proposal.repetition
        return count(self.density)


class RepCounter:
    def __init__(self, cfg: TrainConfig, rpn, dpn=None, training: Optional[dict] = None):
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        self.rpn = rpn
        self.dpn = dpn
        # provenance of the weights, echoed into eval reports
        self.training = training or {}

    @classmethod
    def from_checkpoints(cls, rpn_ckpt: Checkpoint, dpn_ckpt: Optional[Checkpoint] = None) -> "RepCounter":
        cfg = TrainConfig.from_dict((dpn_ckpt or rpn_ckpt).meta["config"])
        rpn = load_rpn(rpn_ckpt, TrainConfig.from_dict(rpn_ckpt.meta["config"]).updated(dtype=cfg.dtype))
        dpn = load_dpn(dpn_ckpt, cfg) if dpn_ckpt is not None else None
        training = {
            "teacher": cfg.teacher,
            "rpn_target_stats": rpn_ckpt.meta.get("target_stats", {}),
            "rpn_digest": rpn_ckpt.digest(),
        }
        if dpn_ckpt is not None:
            training["dpn_exemplar_stats"] = dpn_ckpt.meta.get("exemplar_stats", {})
            training["dpn_digest"] = dpn_ckpt.digest()
        return cls(cfg, rpn, dpn, training)

    @torch.no_grad()
    def predict(self, image: np.ndarray, top_k: int, dpn_k: Optional[int] = None) -> list[Exemplar]:
        """
        Top ``top_k`` exemplars by repetition score. The first ``dpn_k``
        (default: all) get a DPN density map; the rest keep only the
        repetition count.
        """
        dtype = self.cfg.torch_dtype
        h, w = image.shape[:2]
        fm = self.backbone.extract(image, dtype)
        props, encoded = propose(self.rpn, fm, (h, w))
        chosen = select_exemplars(props, top_k, self.cfg.nms_thresh, key=self.cfg.selection)
        dpn_k = len(chosen) if dpn_k is None else dpn_k
        image_fm = encoded if self.cfg.dpn.image_features == "encoder" else fm
        out = []
        for i, p in enumerate(chosen):
            z = None
            if self.dpn is not None and i < dpn_k:
                z = self.dpn.predict(image_fm, fm, p.box, self.backbone.stride, (h, w)).double().numpy()
            out.append(Exemplar(p, z))
        return out


def evaluate_dataset(counter: RepCounter, dataset: Sequence[AnnotatedImage], ks=(1, 3, 5)) -> dict:
    """
    Top-k MAE/RMSE of the full pipeline and of the repetition-only counter.

    GT boxes for the IoU match are the annotated dots expanded to the mean
    exemplar size.
    """
    ks = sorted(set(int(k) for k in ks))
    kmax = ks[-1]
    per_image = []
    dpn_pairs = {k: [] for k in ks}
    rep_pairs = {k: [] for k in ks}
    top1_rep, gts = [], []
    for img in dataset:
        gt_boxes = img.annotation_boxes()
        exemplars = counter.predict(img.image, kmax)
        y = float(img.gt_count)
        rec = {
            "image": img.name,
            "gt_count": y,
            "exemplars": [
                {
                    "box": [round(float(v), 4) for v in e.proposal.box],
                    "repetition": e.proposal.repetition,
                    "objectness": e.proposal.objectness,
                    "count": e.count,
                }
                for e in exemplars
            ],
            "estimates": {},
        }
        if exemplars:
            boxes = [e.proposal.box for e in exemplars]
            counts = [e.count for e in exemplars]
            props = [e.proposal for e in exemplars]
            top1_rep.append(props[0].repetition)
            gts.append(y)
            for k in ks:
                est = topk_count_estimate(boxes, counts, gt_boxes, k)
                fast = fast_count(props, gt_boxes, k)
                dpn_pairs[k].append((y, est))
                rep_pairs[k].append((y, fast))
                rec["estimates"][str(k)] = {"pipeline": est, "repetition": fast}
        else:
            for k in ks:
                dpn_pairs[k].append((y, 0.0))
                rep_pairs[k].append((y, 0.0))
        per_image.append(rec)

    metrics = {}
    for k in ks:
        mae, rmse = mae_rmse(dpn_pairs[k])
        fmae, frmse = mae_rmse(rep_pairs[k])
        metrics[str(k)] = {"mae": mae, "rmse": rmse, "repetition_mae": fmae, "repetition_rmse": frmse}
    return {
        "ks": ks,
        "num_images": len(dataset),
        "metrics": metrics,
        "top1_repetition_pearson": pearson(top1_rep, gts),
        "training": counter.training,
        "images": per_image,
    }
