"""
Repetitive Region Proposal Network.

Backbone features are flattened to a sequence, positions added, and passed
through stacked multi-head self-attention. Three 1x1 conv heads then predict,
for every anchor, an objectness logit, a repetition score (how many times the
object in the anchor occurs in the image) and box deltas.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import from_sequence, positional_embeddings, to_sequence
from .geometry import (
    POSITIVE,
    AnchorConfig,
    AnchorTargets,
    as_boxes,
    clip_boxes,
    decode_boxes,
    generate_anchors,
    nms,
)


@dataclass
class RepRPNConfig:
    d: int = 64
    layers: int = 5
    heads: int = 8
    anchor_sizes: tuple = (32.0, 64.0, 128.0, 256.0)
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    stride: int = 16
    # scale attention logits by 1/sqrt(d_head); False gives softmax(X_Q X_K^T) as written
    scaled: bool = True
    # residual + feed-forward transformer layers instead of plain stacked attention
    standard: bool = False
    layer_norm: bool = True
    # backbone channels; a fixed random 1x1 projection maps them to d when they differ
    in_channels: int | None = None
    # "default": xavier attention, N(0, 0.01) heads; "paper": every weight N(0, 1e-3)
    init: str = "default"

    def __post_init__(self):
        self.anchor_sizes = tuple(float(s) for s in self.anchor_sizes)
        self.aspect_ratios = tuple(float(r) for r in self.aspect_ratios)
        if self.d % 2:
            raise ValueError("d must be even")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by {self.heads} heads")
        if self.init not in ("default", "paper"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def anchors(self) -> AnchorConfig:
        return AnchorConfig(self.anchor_sizes, self.aspect_ratios, self.stride)

    def to_dict(self) -> dict:
        return asdict(self)


class SelfAttention(nn.Module):
    """Multi-head ``softmax(X W_Q (X W_K)^T) X W_V`` with an output projection."""

    def __init__(self, d: int, heads: int = 8, scaled: bool = True):
        super().__init__()
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.d, self.heads, self.scaled = d, heads, scaled
        self.w_q = nn.Parameter(torch.empty(d, d))
        self.w_k = nn.Parameter(torch.empty(d, d))
        self.w_v = nn.Parameter(torch.empty(d, d))
        self.w_o = nn.Parameter(torch.empty(d, d))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.xavier_uniform_(w)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        return x.reshape(n, self.heads, -1).transpose(0, 1)  # (heads, n, dh)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(heads, n, n) row-stochastic attention matrices."""
        q, k = self._split(x @ self.w_q), self._split(x @ self.w_k)
        logits = q @ k.transpose(1, 2)
        if self.scaled:
            logits = logits / math.sqrt(q.shape[-1])
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.attention_weights(x)
        u = a @ self._split(x @ self.w_v)  # (heads, n, dh)
        return u.transpose(0, 1).reshape(x.shape[0], self.d) @ self.w_o


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, scaled: bool, standard: bool, layer_norm: bool):
        super().__init__()
        self.attn = SelfAttention(d, heads, scaled)
        self.standard = standard
        self.norm1 = nn.LayerNorm(d) if (layer_norm or standard) else nn.Identity()
        if standard:
            self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))
            self.norm2 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.standard:
            return self.norm1(self.attn(x))
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ffn(x))


class RepRPN(nn.Module):
    def __init__(self, cfg: RepRPNConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or RepRPNConfig()
        k = cfg.anchors.num_anchors
        self.k = k
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg.d, cfg.heads, cfg.scaled, cfg.standard, cfg.layer_norm)
            for _ in range(cfg.layers)
        )
        self.obj_head = nn.Conv2d(cfg.d, k, 1)
        self.rep_head = nn.Conv2d(cfg.d, k, 1)
        self.box_head = nn.Conv2d(cfg.d, 4 * k, 1)
        c_in = cfg.in_channels or cfg.d
        if c_in != cfg.d:
            g = torch.Generator().manual_seed(c_in * 1009 + cfg.d)
            self.register_buffer("proj", torch.randn(c_in, cfg.d, generator=g) / math.sqrt(c_in))
        else:
            self.proj = None
        self.reset_parameters()

    def reset_parameters(self):
        paper = self.cfg.init == "paper"
        for name, p in self.named_parameters():
            if "norm" in name:
                continue  # LayerNorm keeps its unit/zero affine init
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif paper:
                nn.init.normal_(p, std=1e-3)
            elif name.startswith("encoder"):
                nn.init.xavier_uniform_(p.view(p.shape[0], -1))
            else:
                nn.init.normal_(p, std=0.01)

    def encode(self, fm: torch.Tensor) -> torch.Tensor:
        """(C, Hf, Wf) backbone features -> U' of shape (d, Hf, Wf)."""
        _, hf, wf = fm.shape
        pos = positional_embeddings(hf, wf, self.cfg.d)
        x = to_sequence(fm, pos, self.proj)
        return from_sequence(self.encode_sequence(x), hf, wf)

    def encode_sequence(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.encoder:
            x = layer(x)
        return x

    def heads(self, u: torch.Tensor) -> dict:
        """
        Per-anchor predictions from U' (d, Hf, Wf).

        Anchor index is ``(i * Wf + j) * k + a``, matching ``generate_anchors``.
        """
        u = u[None]
        k = self.k
        logits = self.obj_head(u)[0].permute(1, 2, 0).reshape(-1)
        rep = self.rep_head(u)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.box_head(u)[0].permute(1, 2, 0).reshape(-1, k, 4).reshape(-1, 4)
        return {"logits": logits, "objectness": torch.sigmoid(logits), "repetition": rep, "deltas": deltas}

    def forward(self, fm: torch.Tensor) -> dict:
        u = self.encode(fm)
        out = self.heads(u)
        out["encoded"] = u
        return out

    def anchors_for(self, hf: int, wf: int) -> np.ndarray:
        return generate_anchors(self.cfg.anchors, hf, wf)


# ---------------------------------------------------------------------------
# proposals and exemplar selection
# ---------------------------------------------------------------------------


@dataclass
class Proposal:
    box: np.ndarray
    objectness: float
    repetition: float
    anchor_index: int = -1
    extra: dict = field(default_factory=dict, repr=False)


def make_proposals(preds: dict, anchors: np.ndarray, image_hw) -> list[Proposal]:
    """Decode every anchor's deltas into a clipped box; clamp repetition at 0."""
    deltas = preds["deltas"].detach().double().cpu().numpy()
    boxes = clip_boxes(decode_boxes(deltas, anchors), *image_hw)
    obj = preds["objectness"].detach().double().cpu().numpy()
    rep = np.clip(preds["repetition"].detach().double().cpu().numpy(), 0, None)
    return [Proposal(boxes[i], float(obj[i]), float(rep[i]), i) for i in range(len(boxes))]


def select_exemplars(
    proposals: list[Proposal], top_k: int, nms_thresh: float = 0.7, min_size: float = 1.0,
    key: str = "repetition",
) -> list[Proposal]:
    """
    Highest-scoring proposals after NMS on the same score.

    ``key`` is ``"repetition"`` or ``"objectness"``; the latter ranks like a
    plain RPN. Degenerate boxes (side < ``min_size``) are dropped first. Ties
    are broken by anchor index so the result does not depend on input order.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if key not in ("repetition", "objectness"):
        raise ValueError(f"unknown selection key {key!r}")
    props = [
        p for p in proposals
        if p.box[2] - p.box[0] >= min_size and p.box[3] - p.box[1] >= min_size
    ]
    if not props:
        return []
    props.sort(key=lambda p: (-getattr(p, key), p.anchor_index))
    boxes = as_boxes([p.box for p in props])
    scores = np.array([getattr(p, key) for p in props])
    keep = nms(boxes, scores, nms_thresh)
    return [props[i] for i in keep[:top_k]]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def binary_cross_entropy_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # exact zero at logits = +-inf for binary targets
    return torch.where(target > 0.5, F.softplus(-logits), F.softplus(logits))


def reprpn_loss(preds: dict, targets: AnchorTargets, sampled_idx, lam: float = 1.0) -> torch.Tensor:
    """
    Mean over sampled anchors of
    ``lam * BCE(y, y*) + lam * smoothL1(b - b*) [positive] + smoothL1(c - c*) [c* defined]``.

    Box smooth-L1 is summed over the four coordinates.
    """
    logits = preds["logits"]
    idx = np.asarray(sampled_idx, dtype=np.int64)
    if len(idx) == 0:
        return logits.sum() * 0.0
    labels = targets.labels[idx]
    if np.any(labels < 0):
        raise ValueError("sampled anchors must be labelled positive or negative")
    dtype, dev = logits.dtype, logits.device
    t_idx = torch.as_tensor(idx, device=dev)
    y_star = torch.as_tensor(labels == POSITIVE, dtype=dtype, device=dev)
    b_star = torch.as_tensor(targets.deltas[idx], dtype=dtype, device=dev)
    c_star = torch.as_tensor(targets.repetition[idx], dtype=dtype, device=dev)
    c_mask = torch.as_tensor(targets.rep_mask[idx], dtype=dtype, device=dev)

    cls = binary_cross_entropy_logits(logits[t_idx], y_star)
    reg = smooth_l1(preds["deltas"][t_idx] - b_star).sum(dim=1) * y_star
    # masked entries may hold arbitrary targets; zero them before the loss
    rep = smooth_l1((preds["repetition"][t_idx] - c_star) * c_mask) * c_mask
    return (lam * cls + lam * reg + rep).mean()
