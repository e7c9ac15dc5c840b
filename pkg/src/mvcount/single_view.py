"""Single-view crowd counting: features, density decoding, count supervision.

The counter is a small convolutional encoder-decoder: seven 3x3 conv layers
with two stride-2 reductions produce features at 1/4 resolution, and four
dilated conv layers decode them into a non-negative density map whose spatial
sum is the predicted count. It can be trained either against density-map
ground truth (full supervision) or from per-view total counts alone, with a
nested-crop ranking penalty supplying spatial structure in the weak regime:
a region's count can never be smaller than any of its sub-regions'.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

RANKING_WEIGHT = 10.0  # fixed coefficient of the hinge term in the weak loss

# nested-crop sampler: each side is 50-90% of its parent's, uniform placement
CROP_SHRINK_MIN = 0.5
CROP_SHRINK_MAX = 0.9


class FeatureExtractor(nn.Module):
    """7 conv layers, two stride-2 stages; output is H/4 x W/4 x channels."""

    def __init__(self, channels: int = 32, in_channels: int = 1):
        super().__init__()
        half = max(channels // 2, 4)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, half, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, half, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, channels, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.channels = channels

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] % 4 or images.shape[-2] % 4:
            raise ValueError(
                f"image size {tuple(images.shape[-2:])} not divisible by 4; pad the input"
            )
        return self.net(images)


class DensityDecoder(nn.Module):
    """4 dilated conv layers (dilation 2) and a softplus head; no downsampling.

    The output bias starts low so an untrained net predicts a near-empty map
    rather than a dense one.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        half, quarter = max(channels // 2, 4), max(channels // 4, 4)
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=2, dilation=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, half, 3, padding=2, dilation=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, half, 3, padding=2, dilation=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, quarter, 3, padding=2, dilation=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(quarter, 1, 1),
            nn.Softplus(),
        )
        with torch.no_grad():
            self.net[-2].bias.fill_(-4.0)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


class CountingNet(nn.Module):
    """Image -> density map. Any callable with this shape contract can stand in."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.extractor = FeatureExtractor(channels)
        self.decoder = DensityDecoder(channels)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.extractor(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) -> (B, H/4, W/4) non-negative density."""
        return self.decoder(self.extractor(images)).squeeze(1)


@dataclass(frozen=True)
class CropRegion:
    """Half-open cell rectangle [x0, x1) x [y0, y1) on a feature map."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"empty crop {self}")

    def contains(self, other: "CropRegion") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def count_region(density: torch.Tensor, crop: CropRegion) -> torch.Tensor:
    """Differentiable person count inside a crop: the density mass over it."""
    h, w = density.shape[-2:]
    if not (0 <= crop.x0 and crop.x1 <= w and 0 <= crop.y0 and crop.y1 <= h):
        raise ValueError(f"crop {crop} outside {h}x{w} map")
    return density[..., crop.y0 : crop.y1, crop.x0 : crop.x1].sum()


def sample_nested_crops(h: int, w: int, n: int, rng: np.random.Generator) -> list[CropRegion]:
    """n crops, each containing the next; sides shrink by 50-90% per level."""
    if n < 2:
        raise ValueError("need at least 2 nesting levels")
    if int(min(h, w) * CROP_SHRINK_MIN**n) < 1:
        raise ValueError(f"{h}x{w} map too small for {n} nesting levels")
    crops: list[CropRegion] = []
    ph, pw, px, py = h, w, 0, 0
    for _ in range(n):
        cw = int(rng.integers(int(np.ceil(CROP_SHRINK_MIN * pw)), int(CROP_SHRINK_MAX * pw) + 1))
        ch = int(rng.integers(int(np.ceil(CROP_SHRINK_MIN * ph)), int(CROP_SHRINK_MAX * ph) + 1))
        cw, ch = max(cw, 1), max(ch, 1)
        cx = int(rng.integers(px, px + pw - cw + 1))
        cy = int(rng.integers(py, py + ph - ch + 1))
        crops.append(CropRegion(x0=cx, y0=cy, x1=cx + cw, y1=cy + ch))
        ph, pw, px, py = ch, cw, cx, cy
    return crops


def _validate_nesting(crops) -> None:
    for view_crops in crops:
        for outer, inner in zip(view_crops, view_crops[1:]):
            if not outer.contains(inner):
                raise ValueError(f"crops not nested: {outer} does not contain {inner}")


def count_ranking_loss(
    pred_counts,
    gt_counts,
    nested_counts,
    crops=None,
) -> torch.Tensor:
    """Weak supervision: squared count error plus the nested-crop ranking hinge.

        sum_i (c_i - c_i^gt)^2
        + 10 * sum_i sum_{j<k} max(count(A_ik) - count(A_ij), 0)

    nested_counts[i] lists each view's region counts ordered outermost first,
    so every later (smaller) region may not out-count an earlier one. Passing
    the crops themselves re-checks the containment ordering.
    """
    if crops is not None:
        _validate_nesting(crops)
    total = None
    for c, c_gt in zip(pred_counts, gt_counts):
        term = (c - float(c_gt)) ** 2
        total = term if total is None else total + term
    for chain in nested_counts:
        for j in range(len(chain)):
            for k in range(j + 1, len(chain)):
                hinge = RANKING_WEIGHT * torch.clamp(chain[k] - chain[j], min=0.0)
                total = hinge if total is None else total + hinge
    return total


def density_map_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Full supervision: summed squared per-cell error over all views."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).sum()
