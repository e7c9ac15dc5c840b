"""Run configuration: one nested YAML file drives generation, training and eval."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class SceneConfig:
    """Synthetic multi-camera scene parameters."""

    views: int = 3
    image_w: int = 64
    image_h: int = 64
    extent: float = 12.0  # people uniform on [-extent/2, extent/2]^2 (meters)
    people_min: int = 10
    people_max: int = 22
    head_height: float = 1.7
    focal_px: float = 50.0
    # cameras sit on an arc around the scene center; radii/heights cycle
    # through these patterns so views differ in range and hence reliability
    cam_radii: list = field(default_factory=lambda: [7.5, 10.5, 9.0, 12.0])
    cam_heights: list = field(default_factory=lambda: [5.0, 6.5, 5.5, 7.0])
    arc_span_deg: float = 80.0
    blob_radius_m: float = 0.17  # apparent head size driving the render sigma
    blob_sigma_min_px: float = 0.8
    blob_sigma_max_px: float = 2.6
    render_ref_sigma_px: float = 1.4  # fixes the 8-bit intensity scale
    occlusion_radius_px: float = 3.0
    far_plane: float = 40.0
    density_sigma_cells: float = 0.5
    match_radius_cells: float = 1.25
    feature_stride: int = 4
    train_frames: int = 200
    test_frames: int = 50
    seed: int = 7

    def validate(self) -> None:
        if self.views < 1:
            raise ValueError("views must be >= 1")
        if self.people_min < 1 or self.people_max < self.people_min:
            raise ValueError("invalid people count range")
        if self.image_w % self.feature_stride or self.image_h % self.feature_stride:
            raise ValueError("image size must be divisible by the feature stride")


@dataclass
class LossWeights:
    """Coefficients of the combined training objective."""

    lam: float = 1.0  # single-view count loss
    beta: float = 1.0  # match-map supervision
    gamma: float = 1.0  # homography supervision

    def validate(self) -> None:
        if min(self.lam, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    supervision: str = "full"  # "full" (density maps) or "weak" (counts + ranking)
    seed: int = 7
    channels: int = 32
    distance_channels: int = 8
    nested_crops: int = 3
    lr_svcc: float = 1e-3
    lr_homography: float = 1e-3
    lr_fusion: float = 1e-3
    epochs_svcc: int = 25
    epochs_homography: int = 15
    epochs_fusion: int = 25
    loss_weights: LossWeights = field(default_factory=LossWeights)
    use_distance: bool = True
    use_match_supervision: bool = True

    def validate(self) -> None:
        if self.supervision not in ("full", "weak"):
            raise ValueError(f"supervision must be 'full' or 'weak', got {self.supervision!r}")
        if min(self.lr_svcc, self.lr_homography, self.lr_fusion) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.epochs_svcc, self.epochs_homography, self.epochs_fusion) < 1:
            raise ValueError("epochs must be >= 1")
        if self.nested_crops < 2:
            raise ValueError("nested_crops must be >= 2")
        self.loss_weights.validate()


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.scene.validate()
        self.train.validate()


def default_config() -> RunConfig:
    return RunConfig()


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def _from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if dataclasses.is_dataclass(f.type) if isinstance(f.type, type) else False:
            value = _from_dict(f.type, value)
        elif f.name == "loss_weights" and isinstance(value, dict):
            value = LossWeights(**value)
        kwargs[f.name] = value
    unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig(
        scene=_from_dict(SceneConfig, data.get("scene", {})),
        train=_from_dict(TrainConfig, data.get("train", {})),
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path=None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)
    if path is not None:
        Path(path).write_text(text)
    return text
