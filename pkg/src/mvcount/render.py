"""Map rendering and report figures.

Raw maps are written as 8-bit grayscale PNGs, each normalized independently
with the normalization constant embedded in the filename (so renders stay
quantitative); an all-zero map gets the marker constant 0. Matplotlib figures
accompany the delimited reports: a per-frame map overview for renders, a
predicted-vs-true scatter for evaluations, and loss curves for training runs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image

from .dataio import FrameReader
from .fusion import EvalReport, _frame_tensors
from .model import ModelBundle, run_frame


def save_map_png(out_dir, stem: str, arr) -> Path:
    """Write one map as `<stem>_scale<max>.png`, normalized to [0, 255]."""
    arr = np.asarray(arr, dtype=np.float64)
    scale = float(arr.max()) if arr.size else 0.0
    if scale > 0:
        u8 = np.round(arr / scale * 255.0).astype(np.uint8)
    else:
        scale = 0.0
        u8 = np.zeros(arr.shape, dtype=np.uint8)
    path = Path(out_dir) / f"{stem}_scale{scale:.6g}.png"
    Image.fromarray(u8, mode="L").save(path, format="PNG")
    return path


def render_frame(
    bundle: ModelBundle,
    reader: FrameReader,
    fid: int,
    out_dir,
    *,
    use_distance: bool = True,
) -> list:
    """Render one frame's inputs, densities, confidences, weights and matches.

    Writes 4V + V(V-1) grayscale map PNGs plus one overview figure; returns
    the map paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    v = reader.manifest.views
    with torch.no_grad():
        with reader.purpose("render"):
            images, dists = _frame_tensors(reader, fid, list(range(v)))
        out = run_frame(bundle, images, dists, use_distance=use_distance)
    paths = []
    prefix = f"frame{fid:04d}"
    for view in range(v):
        paths.append(save_map_png(out_dir, f"{prefix}_view{view + 1}_input", images[view, 0]))
        paths.append(save_map_png(out_dir, f"{prefix}_view{view + 1}_density", out.densities[view]))
        paths.append(save_map_png(out_dir, f"{prefix}_view{view + 1}_confidence", out.confidences[view]))
        paths.append(save_map_png(out_dir, f"{prefix}_view{view + 1}_weight", out.weights[view]))
    for (i, j), m in sorted(out.matches.items()):
        paths.append(save_map_png(out_dir, f"{prefix}_match_{i + 1}to{j + 1}", m))

    fig, axes = plt.subplots(v, 4, figsize=(11, 2.6 * v), squeeze=False)
    col_titles = ["input", "density", "confidence", "weight"]
    for view in range(v):
        maps = [images[view, 0], out.densities[view], out.confidences[view], out.weights[view]]
        for col, (title, m) in enumerate(zip(col_titles, maps)):
            ax = axes[view][col]
            ax.imshow(np.asarray(m), cmap="magma")
            ax.set_xticks([])
            ax.set_yticks([])
            if view == 0:
                ax.set_title(title)
            if col == 0:
                ax.set_ylabel(f"view {view + 1}")
    fig.suptitle(f"frame {fid}: predicted scene count {float(out.scene):.2f}")
    fig.tight_layout()
    fig.savefig(out_dir / f"{prefix}_overview.png", dpi=110)
    plt.close(fig)
    return paths


def save_eval_figure(report: EvalReport, path) -> Path:
    path = Path(path)
    gt = [r[2] for r in report.rows]
    pred = [r[1] for r in report.rows]
    fig, ax = plt.subplots(figsize=(5.5, 5))
    lim = max(gt + pred + [1.0]) * 1.05
    ax.plot([0, lim], [0, lim], "k--", lw=0.8, label="perfect")
    ax.scatter(gt, pred, s=18, alpha=0.75)
    ax.set_xlabel("true scene count")
    ax.set_ylabel("predicted scene count")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_title(
        f"views {report.views_label}: MAE {report.mae:.2f}, NAE {report.nae:.3f}"
    )
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_curve_figure(rows: list, fieldnames: list, path, title: str = "") -> Path:
    path = Path(path)
    epochs = [int(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in range(1, len(fieldnames)):
        ax.plot(epochs, [float(r[col]) for r in rows], label=fieldnames[col])
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per frame")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
