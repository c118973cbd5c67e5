"""
Density Prediction Network.

An exemplar box is ROI-pooled from the feature map, correlated with the whole
feature map, and the one-channel correlation map is decoded into a density map
the size of the input image. Summing that map gives the exemplar's count.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def roi_pool(fm: torch.Tensor, box, stride: float, p: int = 3) -> torch.Tensor:
    """
    Bilinear ROI pooling, one sample at the centre of each of ``p x p`` bins.

    Feature cell ``(i, j)`` covers image pixels ``[j*stride, (j+1)*stride)``
    horizontally and its value sits at the cell centre. Samples outside the
    map are clamped to the border.

    Args:
        fm: (C, Hf, Wf)
        box: (x1, y1, x2, y2) in image pixels
        stride: image pixels per feature cell

    Returns:
        (C, p, p)
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    _, hf, wf = fm.shape
    x1, y1, x2, y2 = (float(v) / stride for v in np.asarray(box, dtype=np.float64))
    t = (np.arange(p) + 0.5) / p
    xs = x1 + t * (x2 - x1) - 0.5
    ys = y1 + t * (y2 - y1) - 0.5
    xs = np.clip(xs, 0, wf - 1)
    ys = np.clip(ys, 0, hf - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), wf - 1)
    y0 = np.minimum(np.floor(ys).astype(np.int64), hf - 1)
    x1i = np.minimum(x0 + 1, wf - 1)
    y1i = np.minimum(y0 + 1, hf - 1)
    ax = torch.as_tensor(xs - x0, dtype=fm.dtype)
    ay = torch.as_tensor(ys - y0, dtype=fm.dtype)

    def gather(yi, xi):
        return fm[:, torch.as_tensor(yi)[:, None], torch.as_tensor(xi)[None, :]]

    top = gather(y0, x0) * (1 - ax) + gather(y0, x1i) * ax
    bottom = gather(y1i, x0) * (1 - ax) + gather(y1i, x1i) * ax
    return top * (1 - ay)[:, None] + bottom * ay[:, None]


def correlate(fm: torch.Tensor, ex: torch.Tensor) -> torch.Tensor:
    """
    Slide the (C, P, P) exemplar over the (C, Hf, Wf) map, summing over channels.

    Zero padding keeps the output at (Hf, Wf); values are divided by C * P * P.
    """
    if fm.shape[0] != ex.shape[0]:
        raise ValueError(f"channel mismatch: map has {fm.shape[0]}, exemplar has {ex.shape[0]}")
    c, ph, pw = ex.shape
    x = F.pad(fm[None], ((pw - 1) // 2, pw // 2, (ph - 1) // 2, ph // 2))
    return F.conv2d(x, ex[None])[0, 0] / (c * ph * pw)


@dataclass
class DPNConfig:
    widths: tuple = (32, 32, 16, 16, 1)
    roi_size: int = 3
    upsample_stages: int = 3
    # "default": kaiming convs; "paper": every weight N(0, 1e-3)
    init: str = "default"
    # image-side features: "backbone" or "encoder" (the RepRPN attention output U')
    image_features: str = "backbone"
    # fixed multiplier on the decoder output; unit activations ~ typical per-pixel density
    output_scale: float = 0.01

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5 or self.widths[-1] != 1:
            raise ValueError("DPN needs five conv widths ending in 1")
        if not 0 <= self.upsample_stages <= 4:
            raise ValueError("upsample_stages must be in [0, 4]")
        if self.image_features not in ("backbone", "encoder"):
            raise ValueError(f"unknown image_features {self.image_features!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class DensityPredictor(nn.Module):
    """Five 3x3 convs, x2 bilinear upsampling after the first three, exact resize."""

    def __init__(self, cfg: DPNConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DPNConfig()
        convs, c_in = [], 1
        for c_out in cfg.widths:
            convs.append(nn.Conv2d(c_in, c_out, 3, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.reset_parameters()

    def reset_parameters(self):
        for conv in self.convs:
            if self.cfg.init == "paper":
                nn.init.normal_(conv.weight, std=1e-3)
            else:
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def forward(self, corr: torch.Tensor, image_h: int, image_w: int) -> torch.Tensor:
        """(Hf, Wf) or (B, Hf, Wf) correlation maps -> (image_h, image_w) nonnegative densities."""
        single = corr.dim() == 2
        x = corr.reshape(-1, 1, *corr.shape[-2:])
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i < self.cfg.upsample_stages:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.interpolate(x, size=(image_h, image_w), mode="bilinear", align_corners=False)
        x = x * self.cfg.output_scale
        return x[0, 0] if single else x[:, 0]

    def predict(self, image_fm: torch.Tensor, exemplar_fm: torch.Tensor, box, stride: float, image_hw) -> torch.Tensor:
        """Density map for one exemplar box."""
        return self.predict_many(image_fm, exemplar_fm, [box], stride, image_hw)[0]

    def predict_many(self, image_fm, exemplar_fm, boxes, stride: float, image_hw) -> torch.Tensor:
        """(B, H, W) density maps, one per box, decoded as a batch."""
        corr = torch.stack(
            [correlate(image_fm, roi_pool(exemplar_fm, b, stride, self.cfg.roi_size)) for b in boxes]
        )
        return self(corr, *image_hw)


def mse_loss(z: torch.Tensor, z_star: torch.Tensor) -> torch.Tensor:
    """(1 / HW) * sum (z - z*)^2."""
    if tuple(z.shape) != tuple(z_star.shape):
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_star.shape)}")
    return torch.mean((z - z_star) ** 2)
