import numpy as np
import pytest
import torch

from mvcount.geometry import (
    Correspondences,
    DegenerateConfiguration,
    Homography,
    InsufficientCorrespondences,
    apply_homography,
    denormalize_coords,
    fit_homography_dlt,
    identity,
    is_dummy,
    make_dummy,
    normalize_coords,
    warp_features,
)
from mvcount.substrate import grad_check


def random_well_conditioned_homography(rng: np.random.Generator) -> Homography:
    """Planted invertible homography with condition number < 100."""
    while True:
        m = np.eye(3)
        m[:2, :2] += rng.uniform(-0.3, 0.3, (2, 2))
        m[:2, 2] = rng.uniform(-0.4, 0.4, 2)
        m[2, :2] = rng.uniform(-0.1, 0.1, 2)
        if np.linalg.cond(m) < 100 and abs(np.linalg.det(m)) > 1e-3:
            return Homography.from_matrix(m)


class TestNormalize:
    def test_corners_and_center(self):
        pts = normalize_coords([(0, 0), (63, 63), (31.5, 31.5)], 64, 64)
        assert np.allclose(pts, [(-1, -1), (1, 1), (0, 0)])

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 63, (20, 2))
        back = denormalize_coords(normalize_coords(pts, 64, 48), 64, 48)
        assert np.allclose(back, pts)

    def test_small_images_rejected(self):
        with pytest.raises(ValueError):
            normalize_coords([(0, 0)], 1, 64)


class TestApply:
    def test_identity(self):
        pts = np.array([[0.3, -0.7], [0.0, 0.0]])
        out, ok = apply_homography(identity(), pts)
        assert np.allclose(out, pts) and ok.all()

    def test_dummy_sends_everything_to_minus_ten(self):
        out, ok = apply_homography(make_dummy(), [(0.5, -0.5), (0, 0), (1, 1)])
        assert ok.all()
        assert np.allclose(out, -10.0)
        assert (np.abs(out) > 1).all()  # outside [-1,1]^2

    def test_translation(self):
        H = Homography.from_matrix([[1, 0, 0.5], [0, 1, 0], [0, 0, 1]])
        out, ok = apply_homography(H, [(0.0, 0.0)])
        assert np.allclose(out, [(0.5, 0.0)])

    def test_horizon_flagged(self):
        H = Homography.from_matrix([[1, 0, 0], [0, 1, 0], [1, 0, 1]])
        _, ok = apply_homography(H, [(-1.0, 0.0), (0.5, 0.5)])
        assert not ok[0] and ok[1]


class TestDummy:
    def test_make_is_exact(self):
        assert np.array_equal(
            make_dummy().matrix, [[0, 0, -10], [0, 0, -10], [0, 0, 1]]
        )

    def test_detection(self):
        assert is_dummy(make_dummy())
        assert not is_dummy(identity())
        near = make_dummy().matrix.copy()
        near[0, 2] += 0.1
        near[1, 1] -= 0.08
        assert is_dummy(Homography.from_matrix(near))


class TestDLT:
    def test_identity_from_four_points(self):
        pts = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
        H = fit_homography_dlt(Correspondences(src=pts, dst=pts))
        assert np.abs(H.matrix - np.eye(3)).max() < 1e-9

    def test_plant_and_recover(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            planted = random_well_conditioned_homography(rng)
            src = rng.uniform(-0.9, 0.9, (8, 2))
            dst, ok = apply_homography(planted, src)
            assert ok.all()
            fitted = fit_homography_dlt(Correspondences(src=src, dst=dst))
            assert np.abs(fitted.matrix - planted.matrix).max() < 1e-6

    def test_three_pairs_rejected(self):
        pts = np.array([[0, 0], [0.5, 0], [0, 0.5]])
        with pytest.raises(InsufficientCorrespondences):
            fit_homography_dlt(Correspondences(src=pts, dst=pts))

    def test_collinear_points_degenerate(self):
        src = np.array([[-0.6, 0.0], [-0.2, 0.0], [0.2, 0.0], [0.6, 0.0]])
        with pytest.raises(DegenerateConfiguration):
            fit_homography_dlt(Correspondences(src=src, dst=src))

    def test_pair_permutation_invariance(self):
        rng = np.random.default_rng(5)
        planted = random_well_conditioned_homography(rng)
        src = rng.uniform(-0.9, 0.9, (10, 2))
        dst, _ = apply_homography(planted, src)
        H1 = fit_homography_dlt(Correspondences(src=src, dst=dst))
        perm = rng.permutation(10)
        H2 = fit_homography_dlt(
            Correspondences(src=src[perm], dst=dst[perm], person_ids=perm)
        )
        assert np.abs(H1.matrix - H2.matrix).max() < 1e-9

    def test_duplicate_ids_rejected(self):
        pts = np.zeros((4, 2))
        with pytest.raises(ValueError, match="duplicate"):
            Correspondences(src=pts, dst=pts, person_ids=[0, 1, 1, 2])


class TestWarp:
    def test_identity_reproduces_input(self):
        rng = np.random.default_rng(1)
        f = torch.tensor(rng.normal(size=(3, 12, 16)), dtype=torch.float32)
        out = warp_features(f, identity())
        assert (out - f).abs().max() < 1e-6

    def test_dummy_zeroes_everything(self):
        f = torch.rand(2, 8, 8)
        assert torch.equal(warp_features(f, make_dummy()), torch.zeros_like(f))

    def test_one_cell_translation_moves_impulse(self):
        # oracle: direct sampling arithmetic. A translation of one cell in
        # normalized units is 2/(w-1); warping samples input at p + t, so the
        # impulse appears one cell to the LEFT of its original position.
        h = w = 9
        f = torch.zeros(h, w)
        f[4, 5] = 1.0
        t = 2.0 / (w - 1)
        H = Homography.from_matrix([[1, 0, t], [0, 1, 0], [0, 0, 1]])
        out = warp_features(f, H)
        assert out[4, 4].item() == pytest.approx(1.0, abs=1e-6)
        assert out.sum().item() == pytest.approx(1.0, abs=1e-5)

    def test_half_cell_translation_bilinear_weights(self):
        h = w = 9
        f = torch.zeros(h, w)
        f[4, 5] = 1.0
        t = 1.0 / (w - 1)  # half a cell
        H = Homography.from_matrix([[1, 0, t], [0, 1, 0], [0, 0, 1]])
        out = warp_features(f, H)
        assert out[4, 4].item() == pytest.approx(0.5, abs=1e-6)
        assert out[4, 5].item() == pytest.approx(0.5, abs=1e-6)

    def test_warp_then_inverse_recovers_interior(self):
        rng = np.random.default_rng(7)
        H = Homography.from_matrix(
            [[1.02, 0.03, 0.05], [-0.02, 0.98, -0.04], [0.01, -0.01, 1]]
        )
        # smooth map: heavily blurred noise
        base = rng.normal(size=(32, 32))
        k = np.exp(-0.5 * (np.linspace(-3, 3, 19) / 1.2) ** 2)
        k /= k.sum()
        smooth = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 0, base)
        smooth = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, smooth)
        f = torch.tensor(smooth, dtype=torch.float64)
        back = warp_features(warp_features(f, H), H.inverse())
        inner = (slice(2, -2), slice(2, -2))
        assert (back[inner] - f[inner]).abs().mean() < 1e-2

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        H = random_well_conditioned_homography(rng)
        probe = torch.tensor(rng.normal(size=(6, 6)))
        x0 = torch.tensor(rng.uniform(0, 1, (6, 6)))
        rep = grad_check(lambda x: (warp_features(x, H) * probe).sum(), x0)
        assert rep.max_rel_err < 1e-4

    def test_batched_shapes_preserved(self):
        for shape in [(5, 7), (3, 5, 7), (2, 3, 5, 7)]:
            f = torch.rand(*shape)
            assert warp_features(f, identity()).shape == f.shape
