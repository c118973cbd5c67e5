"""
Frozen backbone, positional embeddings and map <-> sequence reshaping.

The backbone is a small fixed random convnet standing in for a pretrained
feature extractor. Anything with an ``extract`` method of the same signature
(uint8 image in, ``(C, Hf, Wf)`` tensor out) and ``stride`` / ``channels``
attributes can replace it.
"""

from __future__ import annotations

import math
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class FeatureExtractor(Protocol):
    stride: int
    channels: int

    def extract(self, image: np.ndarray, dtype: torch.dtype = ...) -> torch.Tensor: ...


class FrozenBackbone(nn.Module):
    """
    Conv3x3 (+ ReLU except on the last stage) + average-pool stages with seeded
    He-normal weights, followed by per-image channel standardization.

    ``strides`` gives the downsampling of each stage; the total stride is their
    product. Parameters have ``requires_grad=False`` and are never registered
    with an optimizer.
    """

    def __init__(self, channels: int = 64, strides=(4, 2, 2), widths=None, seed: int = 0):
        super().__init__()
        widths = list(widths or [channels // 2] * (len(strides) - 1)) + [channels]
        if len(widths) != len(strides):
            raise ValueError("one width per stage")
        self.strides = tuple(int(s) for s in strides)
        self.stride = int(np.prod(self.strides))
        self.channels = channels
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.convs) - 1
        for i, (conv, s) in enumerate(zip(self.convs, self.strides)):
            x = conv(x)
            if i < last:  # linear last stage keeps features signed
                x = F.relu(x)
            if s > 1:
                x = F.avg_pool2d(x, s)
        # per-image channel standardization puts features on the scale of the positional embeddings
        return F.instance_norm(x, eps=1e-5)

    @torch.no_grad()
    def extract(self, image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """
        Args:
            image: (H, W, 3) uint8 array, or a (B, 3, H, W) float tensor

        Returns:
            (C, Hf, Wf) for a single image, (B, C, Hf, Wf) for a batch;
            Hf = ceil(H / stride)
        """
        single = not torch.is_tensor(image)
        x = image_to_tensor(image, dtype) if single else image.to(dtype)
        h, w = x.shape[-2:]
        ph = -h % self.stride
        pw = -w % self.stride
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        out = self(x.to(self.convs[0].weight.dtype)).to(dtype)
        return out[0] if single else out


def extract_features(backbone: FeatureExtractor, image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return backbone.extract(image, dtype)


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) uint8 -> (1, 3, H, W) centred in [-0.5, 0.5]."""
    arr = np.asarray(image, dtype=np.float64) / 255.0 - 0.5
    return torch.as_tensor(arr.transpose(2, 0, 1)[None].copy(), dtype=dtype)


def sinusoid_1d(n: int, dim: int) -> np.ndarray:
    """(n, dim) sin/cos table over positions 0..n-1."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    freqs = 1.0 / (10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim))
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(pos * freqs)
    out[:, 1::2] = np.cos(pos * freqs[: dim // 2])
    return out


def positional_embeddings(hf: int, wf: int, d: int) -> np.ndarray:
    """
    (hf, wf, d) embeddings: first d/2 channels encode the row, last d/2 the column.
    """
    if d % 2:
        raise ValueError(f"embedding size must be even, got {d}")
    half = d // 2
    rows = sinusoid_1d(hf, half)
    cols = sinusoid_1d(wf, half)
    out = np.empty((hf, wf, d))
    out[:, :, :half] = rows[:, None, :]
    out[:, :, half:] = cols[None, :, :]
    return out


def to_sequence(fm: torch.Tensor, pos=None, proj: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    (C, Hf, Wf) feature map -> (Hf*Wf, d) sequence, row-major, plus positions.

    ``proj`` is a fixed (C, d) matrix, required when C differs from the
    embedding size of ``pos``.
    """
    if fm.dim() != 3:
        raise ValueError(f"expected a (C, Hf, Wf) map, got {tuple(fm.shape)}")
    c, hf, wf = fm.shape
    s = fm.permute(1, 2, 0).reshape(hf * wf, c)
    if proj is not None:
        if proj.shape[0] != c:
            raise ValueError(f"projection expects {proj.shape[0]} channels, map has {c}")
        s = s @ proj.to(s.dtype)
    if pos is None:
        return s
    pos = torch.as_tensor(pos, dtype=s.dtype)
    if pos.shape[:2] != (hf, wf) or pos.shape[2] != s.shape[1]:
        raise ValueError(
            f"positional embeddings {tuple(pos.shape)} do not match sequence of {hf}x{wf}x{s.shape[1]}"
        )
    return s + pos.reshape(hf * wf, -1)


def from_sequence(u: torch.Tensor, hf: int, wf: int) -> torch.Tensor:
    """(Hf*Wf, d) -> (d, Hf, Wf)."""
    if u.dim() != 2 or u.shape[0] != hf * wf:
        raise ValueError(f"sequence of shape {tuple(u.shape)} cannot fill a {hf}x{wf} map")
    return u.reshape(hf, wf, -1).permute(2, 0, 1)
