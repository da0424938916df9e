"""Fully convolutional discriminator for adversarial training.

Five 4x4 stride-2 conv blocks (LeakyReLU 0.2, no batch norm, channel
progression K -> 64 -> 128 -> 256 -> 512 -> 1) squeeze a class
probability map into a single-channel score map, which one bilinear
interpolation brings back to the input resolution.  A sigmoid turns the
scores into per-pixel confidences of "this looks like ground truth
rather than a segmentor output".
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DataError

# Confidences are kept strictly inside (0, 1) so BCE terms stay finite
# even when float32 sigmoid saturates.
CONFIDENCE_EPS = 1e-6


def one_hot(labels: Tensor, num_classes: int) -> Tensor:
    """Integer label map (B, H, W) or (H, W) -> float one-hot (B, K, H, W) / (K, H, W)."""
    if labels.dtype.is_floating_point:
        raise DataError(f"labels must be integer-typed, got {labels.dtype}")
    bad = labels[(labels < 0) | (labels >= num_classes)]
    if bad.numel():
        raise DataError(
            f"label value {int(bad.flatten()[0])} outside 0..{num_classes - 1}"
        )
    hot = F.one_hot(labels.long(), num_classes)
    return hot.movedim(-1, -3).to(torch.float32)


class Discriminator(nn.Module):
    """Maps (B, K, H, W) probability maps to (B, 1, H, W) confidences in (0, 1)."""

    def __init__(self, num_classes: int, base_channels: int = 64) -> None:
        super().__init__()
        if num_classes < 2:
            raise DataError(f"num_classes must be at least 2, got {num_classes}")
        if base_channels < 1:
            raise DataError(f"base_channels must be positive, got {base_channels}")
        self.num_classes = num_classes
        b = base_channels
        self.conv1 = nn.Conv2d(num_classes, b, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(b, b * 2, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(b * 2, b * 4, 4, stride=2, padding=1)
        self.conv4 = nn.Conv2d(b * 4, b * 8, 4, stride=2, padding=1)
        self.conv5 = nn.Conv2d(b * 8, 1, 4, stride=2, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, mean=0.0, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, probs: Tensor) -> Tensor:
        if probs.dim() != 4:
            raise DataError(f"expected a 4-D (B, K, H, W) batch, got {tuple(probs.shape)}")
        if probs.shape[1] != self.num_classes:
            raise DataError(f"expected {self.num_classes} class channels, got {probs.shape[1]}")
        h, w = probs.shape[-2:]
        if h < 32 or w < 32:
            raise DataError(f"input {h}x{w} too small for five stride-2 stages")
        x = self.act(self.conv1(probs))
        x = self.act(self.conv2(x))
        x = self.act(self.conv3(x))
        x = self.act(self.conv4(x))
        x = self.conv5(x)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return torch.sigmoid(x).clamp(CONFIDENCE_EPS, 1.0 - CONFIDENCE_EPS)
