"""Synthetic multi-camera crowd scenes.

People are sampled uniformly on the ground plane and every head sits at a
fixed height, so the map between any two views of the head plane is an exact
homography — the cross-view ground truth (homographies, match maps) is
therefore exact by construction. Cameras on an arc at differing ranges give
each view a different near/far profile; rendering makes far heads small and
intensity-clipped so per-view counting reliability genuinely varies with
distance to the camera.

Per frame the simulator emits, for each view: a grayscale image (sum of
unit-mass Gaussian blobs at visible head pixels), the visible head points
with person ids, the per-view count, and a distance map (meters from the
camera center to the ground point seen at each pixel). Scene-level ground
truth is the number of distinct people visible in at least one view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import SceneConfig
from .geometry import (
    Correspondences,
    Homography,
    fit_homography_dlt,
    identity,
    make_dummy,
    normalize_coords,
)


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera: position in meters, yaw/pitch in radians, focal in pixels.

    Camera axes: +z along the view direction, +x right, +y down in the image.
    Pitch > 0 tilts the optical axis below the horizon. Only the simulator
    ever sees these parameters; the models consume images and distance maps.
    """

    position: tuple
    yaw: float
    pitch: float
    focal_px: float
    image_w: int
    image_h: int

    def rotation(self) -> np.ndarray:
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cy * cp, sy * cp, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points (N, 3) -> pixel (N, 2), depth (N,), in-image mask."""
        rel = np.asarray(points_world, dtype=np.float64) - np.asarray(self.position)
        cam = rel @ self.rotation().T
        z = cam[:, 2]
        ok = z > 0.2
        uv = np.zeros((len(cam), 2))
        zsafe = np.where(ok, z, 1.0)
        uv[:, 0] = self.focal_px * cam[:, 0] / zsafe + (self.image_w - 1) / 2.0
        uv[:, 1] = self.focal_px * cam[:, 1] / zsafe + (self.image_h - 1) / 2.0
        inside = (
            ok
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= self.image_w - 1)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= self.image_h - 1)
        )
        return uv, z, inside


@dataclass
class MultiViewFrame:
    """One synchronized multi-camera capture with all its ground truth."""

    frame_id: int
    images: list  # per view: (H, W) float64, sum of unit-mass blobs
    head_points: list  # per view: (n, 3) float64 rows (person_id, x, y)
    distance_maps: list  # per view: (H, W) float32 meters
    view_counts: list
    scene_count: int

    def covisible_ids(self, i: int, j: int) -> np.ndarray:
        ids_i = set(self.head_points[i][:, 0].astype(int))
        ids_j = set(self.head_points[j][:, 0].astype(int))
        return np.array(sorted(ids_i & ids_j), dtype=int)


@dataclass
class DatasetManifest:
    root: str
    views: int
    image_size: tuple  # (W, H)
    seed: int
    splits: dict  # split name -> list of frame ids
    frame_dirs: dict  # frame id -> relative directory
    warnings: list = field(default_factory=list)

    def frames(self, split: str) -> list:
        return list(self.splits[split])


def camera_layout(cfg: SceneConfig) -> list[CameraSpec]:
    """Cameras on an arc facing the scene center, ranges cycling cfg.cam_radii."""
    cams = []
    v = cfg.views
    for k in range(v):
        theta = 0.0 if v == 1 else math.radians(-cfg.arc_span_deg / 2 + k * cfg.arc_span_deg / (v - 1))
        radius = float(cfg.cam_radii[k % len(cfg.cam_radii)])
        height = float(cfg.cam_heights[k % len(cfg.cam_heights)])
        pos = (radius * math.cos(theta), radius * math.sin(theta), height)
        yaw = theta + math.pi  # look back toward the origin
        pitch = math.atan2(height - cfg.head_height, radius)
        cams.append(
            CameraSpec(
                position=pos,
                yaw=yaw,
                pitch=pitch,
                focal_px=cfg.focal_px,
                image_w=cfg.image_w,
                image_h=cfg.image_h,
            )
        )
    return cams


def splat_gaussian(canvas: np.ndarray, cx: float, cy: float, sigma: float, renormalize_clipped: bool = False) -> None:
    """Add a unit-mass truncated (3 sigma) Gaussian at (cx, cy), in place.

    The discrete kernel is renormalized to exactly unit mass over its window.
    With renormalize_clipped, mass falling outside the canvas is folded back
    in (used for density ground truth so map mass equals the head count
    exactly); otherwise off-canvas mass is simply lost, as in a real image.
    """
    h, w = canvas.shape
    r = int(math.ceil(3.0 * sigma))
    x0, x1 = int(math.floor(cx)) - r, int(math.floor(cx)) + r + 1
    y0, y1 = int(math.floor(cy)) - r, int(math.floor(cy)) + r + 1
    xs = np.arange(x0, x1)
    ys = np.arange(y0, y1)
    kern = np.exp(
        -((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) / (2.0 * sigma**2)
    )
    kern /= kern.sum()
    kx0, ky0 = max(0, -x0), max(0, -y0)
    kx1 = kern.shape[1] - max(0, x1 - w)
    ky1 = kern.shape[0] - max(0, y1 - h)
    if kx0 >= kx1 or ky0 >= ky1:
        return
    patch = kern[ky0:ky1, kx0:kx1]
    if renormalize_clipped:
        patch = patch / patch.sum()
    canvas[max(0, y0) : min(h, y1), max(0, x0) : min(w, x1)] += patch


def render_view(
    camera: CameraSpec, people_xy: np.ndarray, cfg: SceneConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one camera: image, visible head rows (pid, x, y), distance map.

    Heads live at cfg.head_height above each ground point. A head is dropped
    when it projects outside the image or when a strictly nearer kept head
    projects within cfg.occlusion_radius_px of it (deterministic nearest-
    person suppression). Blob sigma shrinks with depth, so far heads are
    small; the image is the sum of unit-mass blobs for the kept heads only.
    """
    n = len(people_xy)
    heads_world = np.concatenate(
        [people_xy, np.full((n, 1), cfg.head_height)], axis=1
    ) if n else np.zeros((0, 3))
    uv, depth, inside = camera.project(heads_world)
    order = sorted(np.flatnonzero(inside), key=lambda i: (depth[i], i))
    kept: list[int] = []
    for i in order:
        occluded = any(
            (uv[i, 0] - uv[k, 0]) ** 2 + (uv[i, 1] - uv[k, 1]) ** 2
            < cfg.occlusion_radius_px**2
            for k in kept
        )
        if not occluded:
            kept.append(i)
    kept = sorted(kept)
    image = np.zeros((camera.image_h, camera.image_w), dtype=np.float64)
    rows = np.zeros((len(kept), 3))
    for out_idx, i in enumerate(kept):
        sigma = cfg.focal_px * cfg.blob_radius_m / depth[i]
        sigma = min(max(sigma, cfg.blob_sigma_min_px), cfg.blob_sigma_max_px)
        splat_gaussian(image, uv[i, 0], uv[i, 1], sigma)
        rows[out_idx] = (i, uv[i, 0], uv[i, 1])
    return image, rows, distance_map(camera, cfg.far_plane)


def distance_map(camera: CameraSpec, far_plane: float) -> np.ndarray:
    """Meters from the camera center to the ground point behind each pixel."""
    w, h = camera.image_w, camera.image_h
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [
            (us - (w - 1) / 2.0) / camera.focal_px,
            (vs - (h - 1) / 2.0) / camera.focal_px,
            np.ones_like(us),
        ],
        axis=-1,
    )
    dirs_world = dirs_cam @ camera.rotation()
    dz = dirs_world[..., 2]
    hits = dz < -1e-9
    t = np.where(hits, -camera.position[2] / np.where(hits, dz, -1.0), np.inf)
    dist = t * np.linalg.norm(dirs_world, axis=-1)
    return np.minimum(dist, far_plane).astype(np.float32)


def generate_frame(frame_id: int, cfg: SceneConfig, cameras: list[CameraSpec], rng: np.random.Generator) -> MultiViewFrame:
    n = int(rng.integers(cfg.people_min, cfg.people_max + 1))
    people = rng.uniform(-cfg.extent / 2, cfg.extent / 2, size=(n, 2))
    images, heads, dists = [], [], []
    for cam in cameras:
        img, rows, dmap = render_view(cam, people, cfg)
        images.append(img)
        heads.append(rows)
        dists.append(dmap)
    visible = set()
    for rows in heads:
        visible.update(rows[:, 0].astype(int).tolist())
    return MultiViewFrame(
        frame_id=frame_id,
        images=images,
        head_points=heads,
        distance_maps=dists,
        view_counts=[len(rows) for rows in heads],
        scene_count=len(visible),
    )


def generate_scene(cfg: SceneConfig) -> tuple[list[MultiViewFrame], list[str]]:
    """All train+test frames, deterministically derived from cfg.seed.

    Returns (frames, warnings); frames carry ids 0..n-1 with the train split
    first. A warning is recorded when more than half of the frames have no
    co-visible pair at all (the matching supervision would starve).
    """
    cfg.validate()
    cameras = camera_layout(cfg)
    total = cfg.train_frames + cfg.test_frames
    seeds = np.random.SeedSequence(cfg.seed).spawn(total)
    frames = [
        generate_frame(k, cfg, cameras, np.random.default_rng(seeds[k]))
        for k in range(total)
    ]
    warnings = []
    if cfg.views >= 2:
        starved = 0
        for f in frames:
            pairs = [
                (i, j)
                for i in range(cfg.views)
                for j in range(cfg.views)
                if i != j
            ]
            if all(len(f.covisible_ids(i, j)) == 0 for i, j in pairs):
                starved += 1
        if starved > 0.5 * total:
            warnings.append(
                f"{starved}/{total} frames have no co-visible people in any view pair; "
                "matching supervision will starve"
            )
    return frames, warnings


def overlap_factor(frames: list[MultiViewFrame]) -> float:
    """Mean over frames of (sum of per-view counts) / scene count."""
    vals = [
        sum(f.view_counts) / f.scene_count for f in frames if f.scene_count > 0
    ]
    return float(np.mean(vals)) if vals else float("nan")


def gt_homography(frame: MultiViewFrame, i: int, j: int, image_w: int, image_h: int) -> Homography:
    """Ground-truth view-i -> view-j homography from co-visible heads.

    Applies the least-squares DLT over all co-visible people's normalized
    head coordinates; with fewer than 4 co-visible people the pair counts as
    non-overlapping and the dummy sentinel is returned. i == j gives the
    identity.
    """
    if i == j:
        return identity()
    ids = frame.covisible_ids(i, j)
    if len(ids) < 4:
        return make_dummy()
    by_id_i = {int(r[0]): r[1:3] for r in frame.head_points[i]}
    by_id_j = {int(r[0]): r[1:3] for r in frame.head_points[j]}
    src = normalize_coords([by_id_i[k] for k in ids], image_w, image_h)
    dst = normalize_coords([by_id_j[k] for k in ids], image_w, image_h)
    return fit_homography_dlt(Correspondences(src=src, dst=dst, person_ids=ids))


def _to_cells(points_xy: np.ndarray, image_w: int, image_h: int, h: int, w: int) -> np.ndarray:
    """Pixel coordinates -> fractional cell coordinates on an h x w canvas map."""
    pts = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] * (w - 1) / (image_w - 1)
    out[:, 1] = pts[:, 1] * (h - 1) / (image_h - 1)
    return out


def gt_match_map(
    frame: MultiViewFrame,
    i: int,
    j: int,
    radius: float,
    map_hw: tuple,
    image_w: int,
    image_h: int,
) -> np.ndarray:
    """Binary (h, w) map: 1 within `radius` cells of a view-i head co-visible in view j."""
    if radius < 1:
        raise ValueError("match radius must be >= 1 cell")
    h, w = map_hw
    out = np.zeros((h, w), dtype=np.float32)
    ids = set(frame.covisible_ids(i, j).tolist())
    rows = frame.head_points[i]
    shared = rows[np.isin(rows[:, 0].astype(int), list(ids))] if len(rows) else rows
    if len(shared) == 0:
        return out
    cells = _to_cells(shared[:, 1:3], image_w, image_h, h, w)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for cx, cy in cells:
        out[(xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2] = 1.0
    return out


def gt_density_map(
    head_points: np.ndarray, sigma: float, map_hw: tuple, image_w: int, image_h: int
) -> np.ndarray:
    """Sum of unit-mass truncated Gaussians; map mass equals the head count."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = map_hw
    out = np.zeros((h, w), dtype=np.float64)
    rows = np.asarray(head_points, dtype=np.float64).reshape(-1, 3)
    if len(rows) == 0:
        return out.astype(np.float32)
    cells = _to_cells(rows[:, 1:3], image_w, image_h, h, w)
    for cx, cy in cells:
        splat_gaussian(out, cx, cy, sigma, renormalize_clipped=True)
    return out.astype(np.float32)


def render_intensity_scale(cfg: SceneConfig) -> float:
    """Fixed float -> [0, 1] scale for 8-bit image encoding.

    Chosen so an isolated unit-mass blob at the reference sigma peaks at
    full brightness; sharper (more distant) blobs clip, which is the
    deliberate source of distance-dependent counting difficulty.
    """
    return 2.0 * math.pi * cfg.render_ref_sigma_px**2


def quantize_image(image: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    scaled = np.clip(image * render_intensity_scale(cfg), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)
