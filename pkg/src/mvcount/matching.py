"""Cross-view matching: homography regression, match scores, view weights.

For every ordered view pair (i, j) a regressor predicts the view-i -> view-j
homography from a global correlation volume between the two views' alignment
features. A match network scores, per cell of view i, the probability that
the same person is also visible in view j, using view-i counting features
concatenated with view-j features warped into frame i. A confidence network
rates each view's per-cell reliability from its alignment features plus
encoded camera-distance information. The per-view weight maps

    W_i = C_i / (C_i + sum_{j != i} warp(C_j, H_ij) * M_ij)

then split each person's count across the views that see them.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Homography, homography_from_free_entries, warp_features
from .single_view import FeatureExtractor

CONFIDENCE_FLOOR = 1e-6  # keeps every confidence strictly positive


def correlation_volume(feat_a: torch.Tensor, feat_b: torch.Tensor, pooled: int = 8) -> torch.Tensor:
    """Global cosine-similarity volume between feat_a cells and pooled feat_b.

    feat_b is average-pooled to pooled x pooled reference cells; the output
    (pooled^2, h, w) holds, per feat_a cell, its cosine similarity against
    every reference cell. Zero-norm fibers get similarity 0.
    """
    if feat_a.shape != feat_b.shape:
        raise ValueError("correlation inputs must share a shape")
    c, h, w = feat_a.shape
    ref = F.adaptive_avg_pool2d(feat_b[None], pooled)[0].reshape(c, pooled * pooled)

    def unit(x, dim):
        norm = x.norm(dim=dim, keepdim=True)
        return x / torch.clamp(norm, min=1e-12)

    a = unit(feat_a.reshape(c, h * w), dim=0)
    b = unit(ref, dim=0)
    return (b.T @ a).reshape(pooled * pooled, h, w)


class HomographyNet(nn.Module):
    """Predicts the 8 free homography entries for an ordered view pair.

    Owns its feature extractor (the counting features are not shared); the
    decoder collapses the correlation volume with two strided convs and
    regresses the entries with a small MLP. Entry [2,2] is fixed at 1, which
    both the normalized ground truth and the non-overlap sentinel satisfy.
    """

    def __init__(self, channels: int = 32, pooled: int = 8):
        super().__init__()
        self.extractor = FeatureExtractor(channels)
        self.pooled = pooled
        vol = pooled * pooled
        self.decoder = nn.Sequential(
            nn.Conv2d(vol, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(64 * 16, 128),
            nn.ReLU(inplace=True),
            nn.Linear(128, 8),
        )

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.extractor(images)

    def forward(self, feat_i: torch.Tensor, feat_j: torch.Tensor) -> torch.Tensor:
        vol = correlation_volume(feat_i, feat_j, self.pooled)
        return self.decoder(vol[None])[0]


def homography_from_prediction(entries: torch.Tensor) -> Homography:
    """Assemble a predicted 8-vector into a normalized Homography."""
    return homography_from_free_entries(entries.detach().cpu().numpy())


def homography_loss(predictions: dict, targets: dict) -> torch.Tensor:
    """Summed squared error over the 8 free entries of every ordered pair."""
    if set(predictions) != set(targets):
        raise ValueError(
            f"pair sets differ: {sorted(predictions)} vs {sorted(targets)}"
        )
    total = None
    for pair, pred in predictions.items():
        tgt = targets[pair]
        if isinstance(tgt, Homography):
            tgt = tgt.free_entries()
        tgt = torch.as_tensor(np.asarray(tgt, dtype=np.float64), dtype=pred.dtype)
        term = ((pred - tgt) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no pairs to score")
    return total


class MatchNet(nn.Module):
    """Scores each view-i cell's probability of having a match in view j."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels // 2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // 2, 1, 3, padding=1),
        )

    def forward(self, feat_i: torch.Tensor, warped_feat_j: torch.Tensor) -> torch.Tensor:
        """(C, h, w) x 2 -> (h, w) in [0, 1]."""
        x = torch.cat([feat_i, warped_feat_j], dim=0)[None]
        return torch.sigmoid(self.net(x))[0, 0]


def predict_match(
    match_net: MatchNet, feat_i: torch.Tensor, feat_j: torch.Tensor, hom: Homography
) -> torch.Tensor:
    """Warp view-j counting features into frame i and score the match map."""
    return match_net(feat_i, warp_features(feat_j, hom))


def match_supervision_loss(predictions: dict, targets: dict) -> torch.Tensor:
    """sum over pairs of || M * M_gt - M_gt ||^2 for binary M_gt.

    Only cells with ground truth 1 are penalized (pulled toward 1); the score
    everywhere else is left to be shaped by the scene-count objective. The
    gradient at ground-truth-zero cells is exactly zero by construction.
    """
    if set(predictions) != set(targets):
        raise ValueError("match prediction/target pair sets differ")
    total = None
    for pair, m in predictions.items():
        gt = torch.as_tensor(targets[pair], dtype=m.dtype)
        if gt.shape != m.shape:
            raise ValueError(f"match map shape mismatch on pair {pair}")
        if not torch.logical_or(gt == 0, gt == 1).all():
            raise ValueError(f"match ground truth for pair {pair} is not binary")
        term = ((m * gt - gt) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no pairs to score")
    return total


class DistanceEncoder(nn.Module):
    """Camera-distance map (meters, image resolution) -> feature-scale channels."""

    def __init__(self, channels: int = 8, normalizer: float = 40.0):
        super().__init__()
        self.normalizer = normalizer
        self.net = nn.Sequential(
            nn.Conv2d(1, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.channels = channels

    def forward(self, distance: torch.Tensor, map_hw: tuple) -> torch.Tensor:
        x = (distance / self.normalizer)[None, None]
        x = F.interpolate(x, size=map_hw, mode="bilinear", align_corners=True)
        return self.net(x)[0]


class ConfidenceNet(nn.Module):
    """Per-cell reliability in (1e-6, 1] from alignment + distance features."""

    def __init__(self, channels: int = 32, distance_channels: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels + distance_channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels // 2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // 2, 1, 3, padding=1),
        )

    def forward(self, feat: torch.Tensor, distance_feat: torch.Tensor) -> torch.Tensor:
        x = torch.cat([feat, distance_feat], dim=0)[None]
        raw = torch.sigmoid(self.net(x))[0, 0]
        return CONFIDENCE_FLOOR + (1.0 - CONFIDENCE_FLOOR) * raw


def view_weight_maps(
    confidences: list[torch.Tensor],
    matches: dict,
    homographies: dict,
) -> list[torch.Tensor]:
    """Per-view weight maps W_i = C_i / (C_i + sum_j warp(C_j, H_ij) * M_ij).

    `matches[(i, j)]` scores view-i cells against view j; `homographies[(i, j)]`
    maps view-i coordinates into view j, so warping brings C_j into frame i.
    With a single view (or all-zero match maps) the weights are exactly 1.
    Confidences must be strictly positive, which keeps every denominator
    positive and every weight in (0, 1].
    """
    v = len(confidences)
    weights = []
    for i in range(v):
        c_i = confidences[i]
        if not bool((c_i > 0).all()):
            raise ValueError(f"confidence map {i} is not strictly positive")
        denom = c_i
        for j in range(v):
            if j == i:
                continue
            c_j_in_i = warp_features(confidences[j], homographies[(i, j)])
            denom = denom + c_j_in_i * matches[(i, j)]
        if not bool((denom > 0).all()):
            raise ValueError("weight denominator must be strictly positive")
        weights.append(c_i / denom)
    return weights
