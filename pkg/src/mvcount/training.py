"""Staged training: single-view counter, homography regressor, then fusion.

Stage "svcc" trains the counting net under the selected supervision (density
maps, or counts plus the nested-crop ranking penalty). Stage "homography"
trains the pair regressor against DLT ground truth. Stage "fusion" freezes
both and trains the match and confidence nets (and the distance encoder)
under the scene-count objective plus optional match supervision; the frozen
stages' outputs are precomputed once per frame, so fusion epochs are cheap.

Every stage is deterministic given its seed, writes a per-epoch loss-curve
CSV and figure, and a checkpoint tagged with the stage and a config snapshot.
All ground-truth reads go through the access-logged reader under an explicit
purpose, which is what makes the weak-supervision audit checkable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, config_to_dict
from .dataio import FrameReader
from .fusion import scene_count, scene_count_loss, total_loss
from .geometry import Homography, homography_from_free_entries
from .matching import (
    homography_loss,
    match_supervision_loss,
    predict_match,
    view_weight_maps,
)
from .model import ModelBundle
from .single_view import count_ranking_loss, count_region, density_map_loss, sample_nested_crops
from .substrate import Adam, forward_backward

STAGES = ("svcc", "homography", "fusion")


def stage_checkpoint_path(run_dir, stage: str) -> Path:
    return Path(run_dir) / f"{stage}.ckpt"


@dataclass
class StageResult:
    stage: str
    checkpoint: Path
    curve_csv: Path
    final_loss: float


def _write_curve(run_dir: Path, stage: str, rows: list, fieldnames: list) -> Path:
    path = run_dir / f"{stage}_loss.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        writer.writerows(rows)
    try:
        from .render import save_curve_figure

        save_curve_figure(rows, fieldnames, run_dir / f"{stage}_loss.png", title=f"{stage} training loss")
    except Exception:
        pass  # figures are best-effort; the CSV is the record
    return path


def _frame_images(reader: FrameReader, fid: int, views: int) -> torch.Tensor:
    return torch.stack([torch.from_numpy(reader.image(fid, v))[None] for v in range(views)])


def _ordered_pairs(views: int) -> list:
    return [(i, j) for i in range(views) for j in range(views) if i != j]


def train_stage_svcc(cfg: RunConfig, reader: FrameReader, run_dir) -> StageResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    bundle = ModelBundle.build(tc.channels, tc.distance_channels, tc.seed)
    params = bundle.named_parameters(["counting"])
    opt = Adam(list(params.values()), tc.lr_svcc)
    rng = np.random.default_rng(tc.seed * 1000 + 1)
    v = reader.manifest.views
    h = reader.manifest.image_size[1] // cfg.scene.feature_stride
    w = reader.manifest.image_size[0] // cfg.scene.feature_stride
    train_ids = reader.manifest.frames("train")
    rows = []
    final = float("nan")
    for epoch in range(tc.epochs_svcc):
        order = rng.permutation(train_ids)
        epoch_loss = 0.0
        for fid in order:
            with reader.purpose("svcc_loss"):
                images = _frame_images(reader, fid, v)
                density = bundle.counting(images)
                if tc.supervision == "full":
                    gt = torch.stack(
                        [
                            torch.from_numpy(
                                reader.density_gt(
                                    fid, view, cfg.scene.density_sigma_cells, (h, w)
                                )
                            )
                            for view in range(v)
                        ]
                    )
                    loss = density_map_loss(density, gt)
                else:
                    counts = [density[view].sum() for view in range(v)]
                    gt_counts = [reader.view_count(fid, view) for view in range(v)]
                    crops = [sample_nested_crops(h, w, tc.nested_crops, rng) for _ in range(v)]
                    nested = [
                        [count_region(density[view], crop) for crop in crops[view]]
                        for view in range(v)
                    ]
                    loss = count_ranking_loss(counts, gt_counts, nested, crops)
            opt.zero_grad()
            forward_backward(loss)
            opt.step()
            epoch_loss += float(loss)
        final = epoch_loss / len(order)
        rows.append([epoch, f"{final:.6f}"])
    curve = _write_curve(run_dir, "svcc", rows, ["epoch", "loss"])
    ckpt = save_checkpoint(
        stage_checkpoint_path(run_dir, "svcc"),
        "svcc",
        bundle.state_arrays(),
        config_to_dict(cfg),
        {"step_count": opt.state.step_count},
    )
    return StageResult("svcc", ckpt, curve, final)


def train_stage_homography(cfg: RunConfig, reader: FrameReader, run_dir) -> StageResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    bundle = ModelBundle.build(tc.channels, tc.distance_channels, tc.seed)
    params = bundle.named_parameters(["homography"])
    opt = Adam(list(params.values()), tc.lr_homography)
    rng = np.random.default_rng(tc.seed * 1000 + 2)
    v = reader.manifest.views
    pairs = _ordered_pairs(v)
    train_ids = reader.manifest.frames("train")
    targets_by_frame = {}
    for fid in train_ids:
        with reader.purpose("homography_gt"):
            targets_by_frame[fid] = {
                (i, j): reader.homography_gt(fid, i, j).free_entries() for i, j in pairs
            }
    rows = []
    final = float("nan")
    for epoch in range(tc.epochs_homography):
        order = rng.permutation(train_ids)
        epoch_loss = 0.0
        for fid in order:
            with reader.purpose("homography_input"):
                images = _frame_images(reader, fid, v)
            feats = bundle.homography.features(images)
            preds = {
                (i, j): bundle.homography(feats[i], feats[j]) for i, j in pairs
            }
            loss = homography_loss(preds, targets_by_frame[fid])
            opt.zero_grad()
            forward_backward(loss)
            opt.step()
            epoch_loss += float(loss)
        final = epoch_loss / len(order)
        rows.append([epoch, f"{final:.6f}"])
    curve = _write_curve(run_dir, "homography", rows, ["epoch", "loss"])
    ckpt = save_checkpoint(
        stage_checkpoint_path(run_dir, "homography"),
        "homography",
        bundle.state_arrays(),
        config_to_dict(cfg),
        {"step_count": opt.state.step_count},
    )
    return StageResult("homography", ckpt, curve, final)


@dataclass
class _FrozenFrame:
    """Per-frame tensors that stage "fusion" never needs to recompute."""

    feat_c: torch.Tensor  # (V, C, h, w) counting features
    densities: torch.Tensor  # (V, h, w)
    feat_h: torch.Tensor  # (V, C, h, w) alignment features
    homs: dict  # (i, j) -> predicted Homography
    warped_fc: dict  # (i, j) -> view-j counting features in frame i
    match_gt: dict  # (i, j) -> (h, w) float tensor
    distances: list  # per view (H, W) tensor
    scene_gt: float
    l_h: float  # homography loss of the frozen predictor (logged only)
    l_di: float  # single-view loss of the frozen counter (logged only)


def _load_bundle_from(run_dir, stages: list, cfg: RunConfig) -> ModelBundle:
    tc = cfg.train
    bundle = ModelBundle.build(tc.channels, tc.distance_channels, tc.seed)
    for stage in stages:
        path = stage_checkpoint_path(run_dir, stage)
        if not path.exists():
            raise CheckpointError(
                f"stage 'fusion' requires the {stage!r} checkpoint; missing file {path}"
            )
        ck = load_checkpoint(path)
        names = ["counting"] if stage == "svcc" else ["homography"]
        bundle.load_state_arrays(ck.tensors, names)
    return bundle


def train_stage_fusion(cfg: RunConfig, reader: FrameReader, run_dir) -> StageResult:
    run_dir = Path(run_dir)
    tc = cfg.train
    bundle = _load_bundle_from(run_dir, ["svcc", "homography"], cfg)
    bundle.freeze(["counting", "homography"])
    trainable = ["match", "confidence"] + (["distance_encoder"] if tc.use_distance else [])
    params = bundle.named_parameters(trainable)
    opt = Adam(list(params.values()), tc.lr_fusion)
    rng = np.random.default_rng(tc.seed * 1000 + 3)
    v = reader.manifest.views
    pairs = _ordered_pairs(v)
    h = reader.manifest.image_size[1] // cfg.scene.feature_stride
    w = reader.manifest.image_size[0] // cfg.scene.feature_stride
    train_ids = reader.manifest.frames("train")

    from .geometry import warp_features

    cache: dict = {}
    with torch.no_grad():
        for fid in train_ids:
            with reader.purpose("fusion_input"):
                images = _frame_images(reader, fid, v)
                distances = [
                    torch.from_numpy(reader.distance(fid, view)) for view in range(v)
                ]
            feat_c = bundle.counting.features(images)
            densities = bundle.counting.decoder(feat_c).squeeze(1)
            feat_h = bundle.homography.features(images)
            preds = {(i, j): bundle.homography(feat_h[i], feat_h[j]) for i, j in pairs}
            homs = {
                pair: homography_from_free_entries(vec.numpy()) for pair, vec in preds.items()
            }
            warped = {
                (i, j): warp_features(feat_c[j], homs[(i, j)]) for i, j in pairs
            }
            with reader.purpose("homography_gt"):
                h_targets = {
                    (i, j): reader.homography_gt(fid, i, j) for i, j in pairs
                }
            l_h = float(homography_loss(preds, h_targets))
            with reader.purpose("match_gt"):
                m_gt = {
                    (i, j): torch.from_numpy(
                        reader.match_gt(fid, i, j, cfg.scene.match_radius_cells, (h, w))
                    )
                    for i, j in pairs
                }
            with reader.purpose("scene_loss"):
                scene_gt = float(reader.scene_count(fid))
            with reader.purpose("svcc_loss"):
                if tc.supervision == "full":
                    gt = torch.stack(
                        [
                            torch.from_numpy(
                                reader.density_gt(
                                    fid, view, cfg.scene.density_sigma_cells, (h, w)
                                )
                            )
                            for view in range(v)
                        ]
                    )
                    l_di = float(density_map_loss(densities, gt))
                else:
                    counts = [densities[view].sum() for view in range(v)]
                    gt_counts = [reader.view_count(fid, view) for view in range(v)]
                    crops = [sample_nested_crops(h, w, tc.nested_crops, rng) for _ in range(v)]
                    nested = [
                        [count_region(densities[view], crop) for crop in crops[view]]
                        for view in range(v)
                    ]
                    l_di = float(count_ranking_loss(counts, gt_counts, nested, crops))
            cache[fid] = _FrozenFrame(
                feat_c=feat_c,
                densities=densities,
                feat_h=feat_h,
                homs=homs,
                warped_fc=warped,
                match_gt=m_gt,
                distances=distances,
                scene_gt=scene_gt,
                l_h=l_h,
                l_di=l_di,
            )

    rows = []
    final = float("nan")
    for epoch in range(tc.epochs_fusion):
        order = rng.permutation(train_ids)
        sums = {"total": 0.0, "l_s": 0.0, "l_d": 0.0, "l_di": 0.0, "l_h": 0.0}
        for fid in order:
            fr = cache[fid]
            matches = {
                pair: bundle.match(fr.feat_c[pair[0]], fr.warped_fc[pair])
                for pair in pairs
            }
            confs = []
            for view in range(v):
                if tc.use_distance:
                    dfeat = bundle.distance_encoder(fr.distances[view], (h, w))
                else:
                    dfeat = torch.zeros(tc.distance_channels, h, w)
                confs.append(bundle.confidence(fr.feat_h[view], dfeat))
            weights = view_weight_maps(confs, matches, fr.homs)
            l_s = scene_count_loss(scene_count(weights, list(fr.densities)), fr.scene_gt)
            if tc.use_match_supervision and tc.loss_weights.beta > 0:
                l_d = match_supervision_loss(matches, fr.match_gt)
            else:
                l_d = torch.zeros(())
            loss = l_s + tc.loss_weights.beta * l_d
            opt.zero_grad()
            forward_backward(loss)
            opt.step()
            sums["l_s"] += float(l_s)
            sums["l_d"] += float(l_d)
            sums["l_di"] += fr.l_di
            sums["l_h"] += fr.l_h
            sums["total"] += float(
                total_loss(float(l_s), fr.l_di, float(l_d), fr.l_h, tc.loss_weights)
            )
        n = len(order)
        rows.append(
            [epoch] + [f"{sums[k] / n:.6f}" for k in ("total", "l_s", "l_d", "l_di", "l_h")]
        )
        final = sums["l_s"] / n
    curve = _write_curve(run_dir, "fusion", rows, ["epoch", "total", "l_s", "l_d", "l_di", "l_h"])
    ckpt = save_checkpoint(
        stage_checkpoint_path(run_dir, "fusion"),
        "fusion",
        bundle.state_arrays(),
        config_to_dict(cfg),
        {"step_count": opt.state.step_count},
    )
    return StageResult("fusion", ckpt, curve, final)


_STAGE_FUNCS = {
    "svcc": train_stage_svcc,
    "homography": train_stage_homography,
    "fusion": train_stage_fusion,
}


def train_staged(cfg: RunConfig, reader: FrameReader, run_dir, stage: str = "all") -> list:
    """Run one named stage or all three in order; returns the StageResults."""
    cfg.validate()
    if stage == "all":
        todo = list(STAGES)
    elif stage in STAGES:
        todo = [stage]
    else:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES + ('all',)}")
    if not reader.manifest.frames("train"):
        raise ValueError("training split is empty")
    results = []
    for name in todo:
        results.append(_STAGE_FUNCS[name](cfg, reader, run_dir))
    return results


def load_model(checkpoint_path) -> tuple[ModelBundle, dict]:
    """Rebuild a ModelBundle from any stage checkpoint; returns (bundle, config)."""
    ck = load_checkpoint(checkpoint_path)
    tc = ck.config["train"]
    bundle = ModelBundle.build(tc["channels"], tc["distance_channels"], tc["seed"])
    have = set(ck.tensors)
    names = [
        n for n in ("counting", "homography", "match", "confidence", "distance_encoder")
        if any(k.startswith(n + ".") for k in have)
    ]
    bundle.load_state_arrays(ck.tensors, names)
    for net in bundle.nets().values():
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
    return bundle, ck.config
