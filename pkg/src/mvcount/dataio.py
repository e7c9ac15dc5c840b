"""On-disk dataset format and the access-tracked frame reader.

Layout under a dataset root:

    manifest.json
    frame_0000/
        view_0.png                  8-bit grayscale render
        view_0_distance.bin         b"WSCF" + u16 h + u16 w + float32 row-major
        ...
        annotations.json            {"scene_count": int, "views": [{"count", "heads"}]}

All integers little-endian in the binary. The reader logs every ground-truth
access as (purpose, field) so a training run can prove which supervision it
touched — in particular that weak supervision never reads head locations or
density ground truth on its counting-loss path.
"""

from __future__ import annotations

import contextlib
import json
import struct
from collections import Counter
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SceneConfig
from .geometry import Homography
from .scenesim import (
    DatasetManifest,
    MultiViewFrame,
    gt_density_map,
    gt_homography,
    gt_match_map,
    quantize_image,
)

DISTANCE_MAGIC = b"WSCF"


class DatasetError(RuntimeError):
    """A dataset file is missing or corrupt; the message names the file."""


def write_distance(path: Path, arr: np.ndarray) -> None:
    h, w = arr.shape
    payload = struct.pack("<4sHH", DISTANCE_MAGIC, h, w)
    payload += arr.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(payload)


def read_distance(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing distance file {path}")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != DISTANCE_MAGIC:
        raise DatasetError(f"corrupt distance file {path}: bad header")
    h, w = struct.unpack("<HH", raw[4:8])
    expect = 8 + 4 * h * w
    if len(raw) != expect:
        raise DatasetError(f"corrupt distance file {path}: {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w).copy()


def _json_dump(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1))


def write_dataset(frames: list[MultiViewFrame], cfg: SceneConfig, out_dir, warnings=None) -> DatasetManifest:
    """Persist generated frames; train split is frame ids [0, train_frames)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    frame_dirs = {}
    for f in frames:
        rel = f"frame_{f.frame_id:04d}"
        fdir = root / rel
        fdir.mkdir(exist_ok=True)
        views_meta = []
        for v in range(cfg.views):
            Image.fromarray(quantize_image(f.images[v], cfg), mode="L").save(
                fdir / f"view_{v}.png", format="PNG"
            )
            write_distance(fdir / f"view_{v}_distance.bin", f.distance_maps[v])
            heads = [
                [int(r[0]), float(r[1]), float(r[2])] for r in f.head_points[v]
            ]
            views_meta.append({"count": int(f.view_counts[v]), "heads": heads})
        _json_dump({"scene_count": int(f.scene_count), "views": views_meta}, fdir / "annotations.json")
        frame_dirs[f.frame_id] = rel
    splits = {
        "train": [f.frame_id for f in frames[: cfg.train_frames]],
        "test": [f.frame_id for f in frames[cfg.train_frames :]],
    }
    manifest = DatasetManifest(
        root=str(root),
        views=cfg.views,
        image_size=(cfg.image_w, cfg.image_h),
        seed=cfg.seed,
        splits=splits,
        frame_dirs=frame_dirs,
        warnings=list(warnings or []),
    )
    _json_dump(
        {
            "views": manifest.views,
            "image_size": list(manifest.image_size),
            "seed": manifest.seed,
            "splits": manifest.splits,
            "frame_dirs": {str(k): v for k, v in manifest.frame_dirs.items()},
            "warnings": manifest.warnings,
        },
        root / "manifest.json",
    )
    return manifest


def read_dataset(root) -> DatasetManifest:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"missing manifest {mpath}")
    data = json.loads(mpath.read_text())
    manifest = DatasetManifest(
        root=str(root),
        views=int(data["views"]),
        image_size=tuple(data["image_size"]),
        seed=int(data["seed"]),
        splits={k: list(v) for k, v in data["splits"].items()},
        frame_dirs={int(k): v for k, v in data["frame_dirs"].items()},
        warnings=list(data.get("warnings", [])),
    )
    for fid, rel in manifest.frame_dirs.items():
        fdir = root / rel
        for name in ["annotations.json"] + [
            part
            for v in range(manifest.views)
            for part in (f"view_{v}.png", f"view_{v}_distance.bin")
        ]:
            if not (fdir / name).exists():
                raise DatasetError(f"missing dataset file {fdir / name}")
    return manifest


class AccessLog:
    """Counts ground-truth reads as (purpose, field) pairs."""

    def __init__(self):
        self.counts: Counter = Counter()

    def record(self, purpose: str, fieldname: str) -> None:
        self.counts[(purpose, fieldname)] += 1

    def purposes_reading(self, fieldname: str) -> set:
        return {p for (p, f) in self.counts if f == fieldname and self.counts[(p, f)] > 0}

    def reads(self, purpose: str, fieldname: str) -> int:
        return self.counts[(purpose, fieldname)]


# Purposes under which head locations may legitimately be read: they build
# cross-view supervision, not single-view counting supervision.
GT_CONSTRUCTION_PURPOSES = {"homography_gt", "match_gt"}


def audit_weak_supervision(log: AccessLog) -> list[str]:
    """Violations of the weak-supervision contract (empty list means clean)."""
    problems = []
    for fieldname in ("heads", "density_gt"):
        bad = log.purposes_reading(fieldname) - GT_CONSTRUCTION_PURPOSES
        for purpose in sorted(bad):
            problems.append(
                f"{fieldname} read under purpose {purpose!r} "
                f"({log.reads(purpose, fieldname)} times)"
            )
    return problems


class FrameReader:
    """Cached, access-logged view of one dataset.

    Callers wrap each supervision path in `with reader.purpose(name):` so the
    log attributes every ground-truth read. Derived ground truth (density,
    homography, match maps) additionally logs a "heads" read, since it is
    constructed from head locations.
    """

    def __init__(self, manifest: DatasetManifest, log: AccessLog | None = None):
        self.manifest = manifest
        self.log = log or AccessLog()
        self._purpose = "unspecified"
        self._ann: dict = {}
        self._img: dict = {}
        self._dist: dict = {}
        self._derived: dict = {}

    @contextlib.contextmanager
    def purpose(self, name: str):
        prev, self._purpose = self._purpose, name
        try:
            yield self
        finally:
            self._purpose = prev

    # -- raw fields ------------------------------------------------------
    def _frame_dir(self, fid: int) -> Path:
        return Path(self.manifest.root) / self.manifest.frame_dirs[fid]

    def _annotations(self, fid: int) -> dict:
        if fid not in self._ann:
            path = self._frame_dir(fid) / "annotations.json"
            if not path.exists():
                raise DatasetError(f"missing annotations {path}")
            self._ann[fid] = json.loads(path.read_text())
        return self._ann[fid]

    def image(self, fid: int, view: int) -> np.ndarray:
        """(H, W) float32 in [0, 1]."""
        self.log.record(self._purpose, "image")
        key = (fid, view)
        if key not in self._img:
            path = self._frame_dir(fid) / f"view_{view}.png"
            if not path.exists():
                raise DatasetError(f"missing image {path}")
            self._img[key] = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        return self._img[key]

    def distance(self, fid: int, view: int) -> np.ndarray:
        self.log.record(self._purpose, "distance")
        key = (fid, view)
        if key not in self._dist:
            self._dist[key] = read_distance(self._frame_dir(fid) / f"view_{view}_distance.bin")
        return self._dist[key]

    def heads(self, fid: int, view: int) -> np.ndarray:
        """(n, 3) rows of (person_id, x, y) pixels."""
        self.log.record(self._purpose, "heads")
        rows = self._annotations(fid)["views"][view]["heads"]
        return np.array(rows, dtype=np.float64).reshape(-1, 3)

    def view_count(self, fid: int, view: int) -> int:
        self.log.record(self._purpose, "view_count")
        return int(self._annotations(fid)["views"][view]["count"])

    def scene_count(self, fid: int) -> int:
        self.log.record(self._purpose, "scene_count")
        return int(self._annotations(fid)["scene_count"])

    # -- derived ground truth ---------------------------------------------
    def _frame_stub(self, fid: int) -> MultiViewFrame:
        ann = self._annotations(fid)
        heads = [
            np.array(vmeta["heads"], dtype=np.float64).reshape(-1, 3)
            for vmeta in ann["views"]
        ]
        return MultiViewFrame(
            frame_id=fid,
            images=[],
            head_points=heads,
            distance_maps=[],
            view_counts=[v["count"] for v in ann["views"]],
            scene_count=ann["scene_count"],
        )

    def density_gt(self, fid: int, view: int, sigma: float, map_hw: tuple) -> np.ndarray:
        self.log.record(self._purpose, "density_gt")
        self.log.record(self._purpose, "heads")
        key = ("density", fid, view, sigma, map_hw)
        if key not in self._derived:
            w, h = self.manifest.image_size
            rows = self._annotations(fid)["views"][view]["heads"]
            self._derived[key] = gt_density_map(
                np.array(rows, dtype=np.float64).reshape(-1, 3), sigma, map_hw, w, h
            )
        return self._derived[key]

    def homography_gt(self, fid: int, i: int, j: int) -> Homography:
        self.log.record(self._purpose, "homography_gt")
        self.log.record(self._purpose, "heads")
        key = ("homography", fid, i, j)
        if key not in self._derived:
            w, h = self.manifest.image_size
            self._derived[key] = gt_homography(self._frame_stub(fid), i, j, w, h)
        return self._derived[key]

    def match_gt(self, fid: int, i: int, j: int, radius: float, map_hw: tuple) -> np.ndarray:
        self.log.record(self._purpose, "match_gt")
        self.log.record(self._purpose, "heads")
        key = ("match", fid, i, j, radius, map_hw)
        if key not in self._derived:
            w, h = self.manifest.image_size
            self._derived[key] = gt_match_map(
                self._frame_stub(fid), i, j, radius, map_hw, w, h
            )
        return self._derived[key]
