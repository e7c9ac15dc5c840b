"""Scene-level count fusion, the combined objective, and MAE/NAE evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import LossWeights, SceneConfig
from .dataio import FrameReader
from .matching import view_weight_maps
from .model import ModelBundle, run_frame


def scene_count(weights: list, densities: list) -> torch.Tensor:
    """S = sum_i sum(W_i * D_i); differentiable in both inputs."""
    if len(weights) != len(densities):
        raise ValueError("one weight map per density map required")
    total = None
    for w, d in zip(weights, densities):
        if w.shape != d.shape:
            raise ValueError(f"shape mismatch {tuple(w.shape)} vs {tuple(d.shape)}")
        term = (w * d).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no views to fuse")
    return total


def scene_count_loss(pred, gt) -> torch.Tensor:
    """Squared error of the scene count."""
    if not torch.is_tensor(pred):
        pred = torch.as_tensor(float(pred))
    return (pred - float(gt)) ** 2


def total_loss(l_s, l_di, l_d, l_h, weights: LossWeights):
    """Combined objective: l_s + lam * l_di + beta * l_d + gamma * l_h."""
    return l_s + weights.lam * l_di + weights.beta * l_d + weights.gamma * l_h


@dataclass
class EvalReport:
    """Per-frame scene counts plus aggregate MAE and NAE.

    NAE skips frames with zero ground truth (the ratio is undefined there);
    how many were skipped is reported separately.
    """

    views_label: str
    rows: list  # (frame_id, s_pred, s_gt, abs_err, rel_err or None)
    mae: float
    nae: float
    excluded_zero_gt: int

    @classmethod
    def from_rows(cls, views_label: str, rows: list) -> "EvalReport":
        abs_errs = [r[3] for r in rows]
        rel_errs = [r[4] for r in rows if r[4] is not None]
        return cls(
            views_label=views_label,
            rows=rows,
            mae=float(np.mean(abs_errs)) if abs_errs else float("nan"),
            nae=float(np.mean(rel_errs)) if rel_errs else float("nan"),
            excluded_zero_gt=sum(1 for r in rows if r[4] is None),
        )

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame_id", "views", "S_pred", "S_gt", "abs_err", "rel_err"])
            for fid, s_pred, s_gt, abs_err, rel_err in self.rows:
                writer.writerow(
                    [
                        fid,
                        self.views_label,
                        f"{s_pred:.6f}",
                        f"{s_gt:.6f}",
                        f"{abs_err:.6f}",
                        "" if rel_err is None else f"{rel_err:.6f}",
                    ]
                )
            writer.writerow(
                ["aggregate", self.views_label, "", "", f"{self.mae:.6f}", f"{self.nae:.6f}"]
            )
        return path


def _frame_tensors(reader: FrameReader, fid: int, views: list) -> tuple:
    imgs = torch.stack(
        [torch.from_numpy(reader.image(fid, v))[None] for v in views]
    )
    dists = [torch.from_numpy(reader.distance(fid, v)) for v in views]
    return imgs, dists


def evaluate(
    bundle: ModelBundle,
    reader: FrameReader,
    split: str = "test",
    views: list | None = None,
    *,
    use_distance: bool = True,
    unit_weights: bool = False,
) -> EvalReport:
    """Run the pipeline over a split, restricted to `views` (0-based, default all)."""
    if views is None:
        views = list(range(reader.manifest.views))
    if not views:
        raise ValueError("views subset must be non-empty")
    bad = [v for v in views if not 0 <= v < reader.manifest.views]
    if bad:
        raise ValueError(f"views {bad} not in dataset (0..{reader.manifest.views - 1})")
    rows = []
    label = "+".join(str(v + 1) for v in views)
    with torch.no_grad():
        for fid in reader.manifest.frames(split):
            with reader.purpose("eval"):
                imgs, dists = _frame_tensors(reader, fid, views)
                s_gt = reader.scene_count(fid)
            out = run_frame(
                bundle, imgs, dists, use_distance=use_distance, unit_weights=unit_weights
            )
            s_pred = float(out.scene)
            abs_err = abs(s_pred - s_gt)
            rel_err = abs_err / s_gt if s_gt > 0 else None
            rows.append((fid, s_pred, float(s_gt), abs_err, rel_err))
    return EvalReport.from_rows(label, rows)


def evaluate_oracle(
    reader: FrameReader, cfg: SceneConfig, split: str = "test", views: list | None = None
) -> EvalReport:
    """Upper-bound run of the fusion arithmetic on perfect inputs.

    Uses ground-truth density maps, ground-truth homographies, ground-truth
    match maps, and constant confidence — no learned component anywhere.
    """
    if views is None:
        views = list(range(reader.manifest.views))
    h = cfg.image_h // cfg.feature_stride
    w = cfg.image_w // cfg.feature_stride
    rows = []
    label = "+".join(str(v + 1) for v in views)
    for fid in reader.manifest.frames(split):
        densities = []
        with reader.purpose("eval"):
            s_gt = reader.scene_count(fid)
        for v in views:
            with reader.purpose("svcc_loss"):
                densities.append(
                    torch.from_numpy(
                        reader.density_gt(fid, v, cfg.density_sigma_cells, (h, w))
                    ).double()
                )
        homs, matches = {}, {}
        for a, i in enumerate(views):
            for b, j in enumerate(views):
                if i == j:
                    continue
                with reader.purpose("homography_gt"):
                    homs[(a, b)] = reader.homography_gt(fid, i, j)
                with reader.purpose("match_gt"):
                    matches[(a, b)] = torch.from_numpy(
                        reader.match_gt(fid, i, j, cfg.match_radius_cells, (h, w))
                    ).double()
        confs = [torch.ones(h, w, dtype=torch.float64) for _ in views]
        weights = view_weight_maps(confs, matches, homs)
        s_pred = float(scene_count(weights, densities))
        abs_err = abs(s_pred - s_gt)
        rows.append((fid, s_pred, float(s_gt), abs_err, abs_err / s_gt if s_gt > 0 else None))
    return EvalReport.from_rows(label, rows)


def view_count_mae(bundle: ModelBundle, reader: FrameReader, split: str = "test") -> float:
    """Mean absolute per-view count error of the counting net alone."""
    errs = []
    with torch.no_grad():
        for fid in reader.manifest.frames(split):
            for v in range(reader.manifest.views):
                with reader.purpose("eval"):
                    img = torch.from_numpy(reader.image(fid, v))[None, None]
                    c_gt = reader.view_count(fid, v)
                c_pred = float(bundle.counting(img).sum())
                errs.append(abs(c_pred - c_gt))
    return float(np.mean(errs))
