import numpy as np
import pytest

from mvcount.config import SceneConfig
from mvcount.geometry import apply_homography, identity, is_dummy, normalize_coords
from mvcount.scenesim import (
    CameraSpec,
    camera_layout,
    generate_scene,
    gt_density_map,
    gt_homography,
    gt_match_map,
    overlap_factor,
    render_view,
    splat_gaussian,
)


def small_config(**overrides) -> SceneConfig:
    base = dict(train_frames=12, test_frames=3, seed=7)
    base.update(overrides)
    return SceneConfig(**base)


class TestCamera:
    def test_on_axis_point_projects_to_center(self):
        cam = CameraSpec(
            position=(0, 0, 5), yaw=0.0, pitch=np.pi / 2, focal_px=58, image_w=64, image_h=64
        )
        # looking straight down, a point directly below projects to the center
        uv, depth, inside = cam.project(np.array([[0.0, 0.0, 0.0]]))
        assert inside[0]
        assert np.allclose(uv[0], [31.5, 31.5])
        assert depth[0] == pytest.approx(5.0)

    def test_mirrored_cameras_give_mirrored_projections(self):
        # oracle: explicit projection arithmetic is symmetric under y -> -y
        cfg = small_config()
        cam_a = CameraSpec((8, 3, 4.5), yaw=np.arctan2(-3, -8), pitch=0.5, focal_px=58, image_w=64, image_h=64)
        cam_b = CameraSpec((8, -3, 4.5), yaw=np.arctan2(3, -8), pitch=0.5, focal_px=58, image_w=64, image_h=64)
        pts = np.array([[0.0, 0.0, cfg.head_height], [1.0, 2.0, cfg.head_height]])
        pts_m = pts * np.array([1.0, -1.0, 1.0])
        uv_a, _, _ = cam_a.project(pts)
        uv_b, _, _ = cam_b.project(pts_m)
        assert np.allclose(uv_a[:, 1], uv_b[:, 1], atol=1e-9)  # same rows
        assert np.allclose(uv_a[:, 0] - 31.5, 31.5 - uv_b[:, 0], atol=1e-9)  # mirrored cols

    def test_empty_scene_renders_nothing(self):
        cfg = small_config()
        cam = camera_layout(cfg)[0]
        image, heads, dmap = render_view(cam, np.zeros((0, 2)), cfg)
        assert image.sum() == 0.0
        assert len(heads) == 0
        assert dmap.shape == (64, 64)

    def test_occlusion_drops_the_farther_person(self):
        cfg = small_config()
        cam = camera_layout(cfg)[0]
        # two people nearly along the same ray from camera 0
        direction = -np.asarray(cam.position[:2])
        direction = direction / np.linalg.norm(direction)
        near = np.asarray(cam.position[:2]) + direction * 5.0
        far = np.asarray(cam.position[:2]) + direction * 5.3
        image, heads, _ = render_view(cam, np.stack([far, near]), cfg)
        assert len(heads) == 1
        assert int(heads[0, 0]) == 1  # the nearer person (index 1) survives


class TestGeneration:
    def test_determinism(self):
        cfg = small_config()
        frames_a, _ = generate_scene(cfg)
        frames_b, _ = generate_scene(cfg)
        for fa, fb in zip(frames_a, frames_b):
            assert np.array_equal(fa.images[0], fb.images[0])
            assert np.array_equal(fa.head_points[1], fb.head_points[1])
            assert fa.scene_count == fb.scene_count

    def test_single_view_scene_count_equals_view_count(self):
        cfg = small_config(views=1)
        frames, _ = generate_scene(cfg)
        for f in frames:
            assert f.scene_count == f.view_counts[0]

    def test_meaningful_overlap(self):
        cfg = small_config(train_frames=30)
        frames, _ = generate_scene(cfg)
        assert overlap_factor(frames) > 1.2

    def test_scene_count_is_union_of_ids(self):
        cfg = small_config()
        frames, _ = generate_scene(cfg)
        for f in frames:
            union = set()
            for rows in f.head_points:
                union |= set(rows[:, 0].astype(int).tolist())
            assert f.scene_count == len(union)
            assert f.scene_count <= sum(f.view_counts)

    def test_view_counts_match_heads(self):
        frames, _ = generate_scene(small_config())
        for f in frames:
            for v in range(3):
                assert f.view_counts[v] == len(f.head_points[v])


class TestGtHomography:
    def test_same_view_is_identity(self):
        frames, _ = generate_scene(small_config())
        H = gt_homography(frames[0], 1, 1, 64, 64)
        assert np.abs(H.matrix - np.eye(3)).max() < 1e-6

    def test_disjoint_views_give_dummy(self):
        cfg = small_config()
        frames, _ = generate_scene(cfg)
        f = frames[0]
        # force disjoint: strip view 1 of every id present in view 0
        ids0 = set(f.head_points[0][:, 0].astype(int))
        keep = ~np.isin(f.head_points[1][:, 0].astype(int), list(ids0))
        f.head_points[1] = f.head_points[1][keep]
        assert is_dummy(gt_homography(f, 0, 1, 64, 64))

    def test_reprojection_within_half_feature_cell(self):
        cfg = small_config()
        frames, _ = generate_scene(cfg)
        # half a cell on the 16-cell canvas, in normalized units
        tol = 0.5 * 2.0 / (16 - 1)
        for f in frames[:6]:
            for i in range(3):
                for j in range(3):
                    if i == j:
                        continue
                    H = gt_homography(f, i, j, 64, 64)
                    if is_dummy(H):
                        continue
                    ids = f.covisible_ids(i, j)
                    bi = {int(r[0]): r[1:3] for r in f.head_points[i]}
                    bj = {int(r[0]): r[1:3] for r in f.head_points[j]}
                    src = normalize_coords([bi[k] for k in ids], 64, 64)
                    dst = normalize_coords([bj[k] for k in ids], 64, 64)
                    out, ok = apply_homography(H, src)
                    assert ok.all()
                    assert np.abs(out - dst).max() < tol


class TestGtMaps:
    def test_match_map_zero_for_disjoint_pair(self):
        frames, _ = generate_scene(small_config())
        f = frames[0]
        ids0 = set(f.head_points[0][:, 0].astype(int))
        keep = ~np.isin(f.head_points[1][:, 0].astype(int), list(ids0))
        f.head_points[1] = f.head_points[1][keep]
        m = gt_match_map(f, 0, 1, 2.0, (16, 16), 64, 64)
        assert m.sum() == 0.0

    def test_single_shared_person_makes_one_disk(self):
        frames, _ = generate_scene(small_config())
        f = frames[0]
        shared = f.covisible_ids(0, 1)
        assert len(shared) > 0
        pid = shared[0]
        f.head_points[0] = f.head_points[0][f.head_points[0][:, 0] == pid]
        m = gt_match_map(f, 0, 1, 2.0, (16, 16), 64, 64)
        # oracle: rasterize the disk directly
        x, y = f.head_points[0][0, 1:3]
        cx, cy = x * 15 / 63, y * 15 / 63
        ys, xs = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        disk = ((xs - cx) ** 2 + (ys - cy) ** 2 <= 4.0).astype(np.float32)
        assert np.array_equal(m, disk)

    def test_interior_disk_area(self):
        f_stub = type("F", (), {})()
        rows = np.array([[0, 31.5, 31.5]])

        class Stub:
            head_points = [rows, rows]

            def covisible_ids(self, i, j):
                return np.array([0])

        m = gt_match_map(Stub(), 0, 1, 2.0, (16, 16), 64, 64)
        cx = cy = 31.5 * 15 / 63
        ys, xs = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        expect = int(((xs - cx) ** 2 + (ys - cy) ** 2 <= 4.0).sum())
        assert int(m.sum()) == expect

    def test_density_mass_equals_count(self):
        rng = np.random.default_rng(0)
        for n in (0, 1, 17):
            rows = np.concatenate(
                [np.arange(n)[:, None], rng.uniform(0, 63, (n, 2))], axis=1
            ) if n else np.zeros((0, 3))
            d = gt_density_map(rows, 0.75, (16, 16), 64, 64)
            assert d.sum() == pytest.approx(n, abs=1e-3)
            assert (d >= 0).all()

    def test_density_single_head_unit_mass(self):
        d = gt_density_map(np.array([[0, 10.0, 50.0]]), 1.5, (16, 16), 64, 64)
        assert d.sum() == pytest.approx(1.0, abs=1e-5)

    def test_splat_border_renormalization(self):
        canvas = np.zeros((8, 8))
        splat_gaussian(canvas, 0.2, 0.1, 1.0, renormalize_clipped=True)
        assert canvas.sum() == pytest.approx(1.0, abs=1e-12)


def test_warning_when_overlap_starves():
    # two cameras looking in opposite directions away from the crowd overlap nowhere
    cfg = small_config(
        views=2,
        train_frames=8,
        test_frames=2,
        cam_radii=[30.0, 30.0],
        cam_heights=[4.0, 4.0],
        arc_span_deg=180.0,
        extent=4.0,
        people_min=4,
        people_max=6,
    )
    frames, warnings = generate_scene(cfg)
    if any(len(f.covisible_ids(0, 1)) == 0 for f in frames):
        assert warnings or sum(
            1 for f in frames if len(f.covisible_ids(0, 1)) == 0
        ) <= 0.5 * len(frames)
