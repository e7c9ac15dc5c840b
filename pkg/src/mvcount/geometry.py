"""Planar projective geometry in normalized [-1, 1] coordinates.

All cross-view alignment in the pipeline runs through a single coordinate
convention: pixel (x, y) in a W x H image maps to (2x/(W-1) - 1, 2y/(H-1) - 1),
so (0, 0) is the top-left pixel center at (-1, -1) and (W-1, H-1) is (+1, +1).
Every h x w map (density, match, confidence, weight) is read as an
align-corners sampling of that same [-1, 1]^2 canvas: cell (r, c) sits at
(2c/(w-1) - 1, 2r/(h-1) - 1). A homography for a view pair therefore applies
unchanged at image and feature resolution.

A view-pair homography H maps source-view coordinates to target-view
coordinates; warping target-view features into the source frame samples them
at H applied to each source cell center (inverse warping).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

DUMMY_MATRIX = np.array(
    [[0.0, 0.0, -10.0], [0.0, 0.0, -10.0], [0.0, 0.0, 1.0]], dtype=np.float64
)
# A predicted matrix this close (max-norm) to the sentinel is treated as "no
# overlap". The sentinel is far from any plausible real homography, so the
# threshold is uncritical; 0.5 leaves generous slack for regression noise.
DUMMY_TOLERANCE = 0.5


class InsufficientCorrespondences(ValueError):
    """Fewer than 4 point pairs were supplied to the homography fit."""


class DegenerateConfiguration(ValueError):
    """The correspondence geometry does not determine a unique homography."""


@dataclass(frozen=True)
class Homography:
    """A 3x3 projective map over normalized coordinates with matrix[2,2] == 1."""

    matrix: np.ndarray

    @classmethod
    def from_matrix(cls, m) -> "Homography":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < 1e-12:
            raise DegenerateConfiguration("matrix[2,2] is ~0; cannot normalize")
        return cls(matrix=m / m[2, 2])

    def inverse(self) -> "Homography":
        det = np.linalg.det(self.matrix)
        if abs(det) < 1e-9:
            raise DegenerateConfiguration(f"homography is singular (|det|={abs(det):.2e})")
        return Homography.from_matrix(np.linalg.inv(self.matrix))

    def free_entries(self) -> np.ndarray:
        """The 8 entries other than the fixed bottom-right 1, row-major."""
        return self.matrix.reshape(-1)[:8].copy()


def identity() -> Homography:
    return Homography(matrix=np.eye(3))


def make_dummy() -> Homography:
    """The sentinel announcing a non-overlapping view pair."""
    return Homography(matrix=DUMMY_MATRIX.copy())


def is_dummy(hom: Homography) -> bool:
    return bool(np.abs(hom.matrix - DUMMY_MATRIX).max() < DUMMY_TOLERANCE)


def homography_from_free_entries(entries) -> Homography:
    entries = np.asarray(entries, dtype=np.float64).reshape(8)
    m = np.append(entries, 1.0).reshape(3, 3)
    return Homography(matrix=m)


def normalize_coords(points, width: int, height: int) -> np.ndarray:
    """Pixel coordinates (x, y) -> normalized [-1, 1] coordinates."""
    if width < 2 or height < 2:
        raise ValueError("width and height must be >= 2")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(pts)
    out[:, 0] = 2.0 * pts[:, 0] / (width - 1) - 1.0
    out[:, 1] = 2.0 * pts[:, 1] / (height - 1) - 1.0
    return out


def denormalize_coords(points, width: int, height: int) -> np.ndarray:
    """Inverse of normalize_coords."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(pts)
    out[:, 0] = (pts[:, 0] + 1.0) * (width - 1) / 2.0
    out[:, 1] = (pts[:, 1] + 1.0) * (height - 1) / 2.0
    return out


def apply_homography(hom: Homography, points) -> tuple[np.ndarray, np.ndarray]:
    """Apply the projective map to (N, 2) points.

    Returns (warped_points, valid) where valid[i] is False when the third
    homogeneous coordinate of point i fell below 1e-12 in magnitude (the
    point is at the map's horizon); such rows are filled with 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    mapped = homog @ hom.matrix.T
    w = mapped[:, 2]
    valid = np.abs(w) >= 1e-12
    out = np.zeros_like(pts)
    out[valid] = mapped[valid, :2] / w[valid, None]
    return out, valid


@dataclass
class Correspondences:
    """Matched normalized points between two views, keyed by person id."""

    src: np.ndarray
    dst: np.ndarray
    person_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        if self.src.shape != self.dst.shape:
            raise ValueError("src and dst must pair up one-to-one")
        if self.person_ids is None:
            self.person_ids = np.arange(len(self.src))
        self.person_ids = np.asarray(self.person_ids).reshape(-1)
        if len(self.person_ids) != len(self.src):
            raise ValueError("one person id per pair required")
        if len(np.unique(self.person_ids)) != len(self.person_ids):
            raise ValueError("duplicate person ids in correspondences")
        coords = np.concatenate([self.src, self.dst])
        if len(coords) and np.abs(coords).max() > 1.5:
            raise ValueError("correspondence coordinates outside [-1.5, 1.5]")

    def __len__(self) -> int:
        return len(self.src)


def _hartley_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity transform taking pts to zero centroid and mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1).mean()
    scale = np.sqrt(2.0) / dist if dist > 1e-12 else 1.0
    T = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return T


def fit_homography_dlt(corr: Correspondences) -> Homography:
    """Least-squares DLT fit of dst ~ H @ src over all pairs.

    Points are Hartley-normalized before building the 2N x 9 design matrix,
    which is solved by SVD; the result is unwound through the normalizing
    transforms and scaled so matrix[2,2] == 1. Exact correspondences recover
    the planted homography to ~1e-10.
    """
    if len(corr) < 4:
        raise InsufficientCorrespondences(f"need >= 4 pairs, got {len(corr)}")
    Ts = _hartley_transform(corr.src)
    Td = _hartley_transform(corr.dst)
    src_h = np.concatenate([corr.src, np.ones((len(corr), 1))], axis=1) @ Ts.T
    dst_h = np.concatenate([corr.dst, np.ones((len(corr), 1))], axis=1) @ Td.T
    sx, sy = src_h[:, 0], src_h[:, 1]
    dx, dy = dst_h[:, 0], dst_h[:, 1]
    zero = np.zeros_like(sx)
    one = np.ones_like(sx)
    rows_x = np.stack([-sx, -sy, -one, zero, zero, zero, dx * sx, dx * sy, dx], axis=1)
    rows_y = np.stack([zero, zero, zero, -sx, -sy, -one, dy * sx, dy * sy, dy], axis=1)
    A = np.concatenate([rows_x, rows_y], axis=0)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-9 * s[0]:
        raise DegenerateConfiguration(
            "correspondences are rank-deficient (collinear or repeated points)"
        )
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(np.linalg.det(H)) < 1e-12:
        raise DegenerateConfiguration("fit produced a singular homography")
    return Homography.from_matrix(H)


def _sample_grid(hom: Homography, h: int, w: int, dtype: torch.dtype) -> torch.Tensor:
    """grid_sample grid (1, h, w, 2): H applied to each cell's canvas center."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    gx = 2.0 * xs / (w - 1) - 1.0
    gy = 2.0 * ys / (h - 1) - 1.0
    m = hom.matrix
    px = m[0, 0] * gx + m[0, 1] * gy + m[0, 2]
    py = m[1, 0] * gx + m[1, 1] * gy + m[1, 2]
    pw = m[2, 0] * gx + m[2, 1] * gy + m[2, 2]
    safe = np.abs(pw) >= 1e-12
    # horizon cells are sent far out of bounds so they sample zero
    sx = np.where(safe, px / np.where(safe, pw, 1.0), -10.0)
    sy = np.where(safe, py / np.where(safe, pw, 1.0), -10.0)
    grid = np.stack([sx, sy], axis=-1)[None]
    return torch.as_tensor(grid, dtype=dtype)


def warp_features(features: torch.Tensor, hom: Homography) -> torch.Tensor:
    """Resample a feature map through a homography (inverse warping).

    Output cell (r, c) carries the input bilinearly sampled at H applied to
    that cell's normalized center; samples outside [-1, 1]^2 contribute zero.
    Accepts (h, w), (C, h, w) or (B, C, h, w) and preserves the shape.
    Differentiable with respect to `features`; the identity homography
    reproduces the input exactly, the dummy sentinel yields all zeros.
    """
    shape = features.shape
    if features.dim() == 2:
        x = features[None, None]
    elif features.dim() == 3:
        x = features[None]
    elif features.dim() == 4:
        x = features
    else:
        raise ValueError(f"expected 2-4 dims, got shape {tuple(shape)}")
    h, w = x.shape[-2:]
    # sample in float64: float32 grid rounding would smear exact cell centers
    grid = _sample_grid(hom, h, w, torch.float64).expand(x.shape[0], -1, -1, -1)
    out = F.grid_sample(
        x.to(torch.float64), grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )
    return out.to(features.dtype).reshape(shape)
