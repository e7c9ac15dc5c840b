"""The five-network bundle and the per-frame inference pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import Homography
from .matching import (
    ConfidenceNet,
    DistanceEncoder,
    HomographyNet,
    MatchNet,
    homography_from_prediction,
    predict_match,
    view_weight_maps,
)
from .single_view import CountingNet

NET_NAMES = ("counting", "homography", "match", "confidence", "distance_encoder")


@dataclass
class ModelBundle:
    counting: CountingNet
    homography: HomographyNet
    match: MatchNet
    confidence: ConfidenceNet
    distance_encoder: DistanceEncoder
    channels: int
    distance_channels: int

    @classmethod
    def build(cls, channels: int = 32, distance_channels: int = 8, seed: int = 0) -> "ModelBundle":
        torch.manual_seed(seed)
        return cls(
            counting=CountingNet(channels),
            homography=HomographyNet(channels),
            match=MatchNet(channels),
            confidence=ConfidenceNet(channels, distance_channels),
            distance_encoder=DistanceEncoder(distance_channels),
            channels=channels,
            distance_channels=distance_channels,
        )

    def nets(self) -> dict:
        return {name: getattr(self, name) for name in NET_NAMES}

    def named_parameters(self, names=NET_NAMES) -> dict:
        out = {}
        for name in names:
            for pname, p in self.nets()[name].named_parameters():
                out[f"{name}.{pname}"] = p
        return out

    def freeze(self, names) -> None:
        for name in names:
            for p in self.nets()[name].parameters():
                p.requires_grad_(False)

    def state_arrays(self) -> dict:
        """All parameters as float32 numpy arrays keyed by qualified name."""
        return {
            k: p.detach().cpu().numpy().astype("float32")
            for k, p in self.named_parameters().items()
        }

    def load_state_arrays(self, arrays: dict, names=NET_NAMES) -> None:
        with torch.no_grad():
            for k, p in self.named_parameters(names).items():
                if k not in arrays:
                    raise KeyError(f"checkpoint is missing parameter {k}")
                p.copy_(torch.from_numpy(arrays[k].reshape(p.shape)))


@dataclass
class FrameOutputs:
    """Everything the pipeline produces for one frame (indices follow `views`)."""

    views: list
    densities: torch.Tensor  # (V, h, w)
    homographies: dict  # (i, j) positions within `views` -> Homography
    matches: dict  # (i, j) -> (h, w)
    confidences: list  # per view (h, w)
    weights: list  # per view (h, w)
    scene: torch.Tensor  # scalar


def run_frame(
    bundle: ModelBundle,
    images: torch.Tensor,
    distances: list,
    *,
    use_distance: bool = True,
    unit_weights: bool = False,
) -> FrameOutputs:
    """Full pipeline on one frame: images (V, 1, H, W) -> weighted scene count.

    `distances` lists each view's (H, W) distance tensor. Pairs are drawn
    within the provided views only; a single view degenerates to weight 1
    everywhere. `unit_weights` forces W = 1 (the naive summing baseline).
    """
    v = images.shape[0]
    feat_c = bundle.counting.features(images)
    densities = bundle.counting.decoder(feat_c).squeeze(1)
    h, w = densities.shape[-2:]
    feat_h = bundle.homography.features(images)
    homs: dict = {}
    matches: dict = {}
    for i in range(v):
        for j in range(v):
            if i == j:
                continue
            vec = bundle.homography(feat_h[i], feat_h[j])
            hom = homography_from_prediction(vec)
            homs[(i, j)] = hom
            matches[(i, j)] = predict_match(bundle.match, feat_c[i], feat_c[j], hom)
    confidences = []
    for i in range(v):
        if use_distance:
            dfeat = bundle.distance_encoder(distances[i], (h, w))
        else:
            dfeat = torch.zeros(bundle.distance_channels, h, w, dtype=images.dtype)
        confidences.append(bundle.confidence(feat_h[i], dfeat))
    if unit_weights:
        weights = [torch.ones(h, w, dtype=images.dtype) for _ in range(v)]
    else:
        weights = view_weight_maps(confidences, matches, homs)
    scene = torch.stack([(wm * d).sum() for wm, d in zip(weights, densities)]).sum()
    return FrameOutputs(
        views=list(range(v)),
        densities=densities,
        homographies=homs,
        matches=matches,
        confidences=confidences,
        weights=weights,
        scene=scene,
    )
