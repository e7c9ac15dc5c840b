import numpy as np
import pytest
import torch

from mvcount.geometry import Homography, identity, make_dummy, warp_features
from mvcount.matching import (
    ConfidenceNet,
    DistanceEncoder,
    HomographyNet,
    MatchNet,
    correlation_volume,
    homography_from_prediction,
    homography_loss,
    match_supervision_loss,
    predict_match,
    view_weight_maps,
)
from mvcount.substrate import grad_check


class TestCorrelation:
    def test_self_similarity_maximal(self):
        torch.manual_seed(0)
        f = torch.rand(8, 8, 8) + 0.2
        vol = correlation_volume(f, f, pooled=8)
        # with pooled == spatial size, each cell's similarity with its own
        # pooled location is 1, the max possible for cosine similarity
        for r in range(8):
            for c in range(8):
                fiber = vol[:, r, c]
                assert fiber[r * 8 + c].item() == pytest.approx(fiber.max().item(), abs=1e-6)
                assert fiber.max().item() == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_fields_near_zero(self):
        a = torch.zeros(2, 4, 4)
        b = torch.zeros(2, 4, 4)
        a[0] = 1.0
        b[1] = 1.0
        vol = correlation_volume(a, b, pooled=2)
        assert vol.abs().max().item() < 1e-6

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        c, h, w, s = 3, 4, 4, 2
        fa = torch.tensor(rng.normal(size=(c, h, w)))
        fb = torch.tensor(rng.normal(size=(c, h, w)))
        vol = correlation_volume(fa, fb, pooled=s)
        # oracle: explicit pooling + nested-loop cosine similarity
        pooled = np.zeros((c, s, s))
        for ci in range(c):
            for r in range(s):
                for cc in range(s):
                    pooled[ci, r, cc] = fb[ci, r * 2 : r * 2 + 2, cc * 2 : cc * 2 + 2].mean()
        for r in range(h):
            for cc in range(w):
                va = fa[:, r, cc].numpy()
                for pr in range(s):
                    for pc in range(s):
                        vb = pooled[:, pr, pc]
                        cos = va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))
                        assert vol[pr * s + pc, r, cc].item() == pytest.approx(cos, abs=1e-5)

    def test_values_bounded(self):
        torch.manual_seed(1)
        vol = correlation_volume(torch.randn(4, 8, 8), torch.randn(4, 8, 8))
        assert vol.min() >= -1.0 - 1e-6 and vol.max() <= 1.0 + 1e-6

    def test_zero_norm_cell_gives_zero(self):
        a = torch.zeros(2, 4, 4)
        b = torch.rand(2, 4, 4)
        vol = correlation_volume(a, b, pooled=2)
        assert torch.equal(vol, torch.zeros_like(vol))


class TestHomographyNet:
    def test_prediction_assembles_to_unit_corner(self):
        torch.manual_seed(0)
        net = HomographyNet(channels=16)
        f = net.features(torch.rand(2, 1, 64, 64))
        vec = net(f[0], f[1])
        assert vec.shape == (8,)
        hom = homography_from_prediction(vec)
        assert hom.matrix[2, 2] == 1.0
        assert hom.matrix.shape == (3, 3)

    def test_loss_zero_on_exact(self):
        pairs = {(0, 1): identity(), (1, 0): identity()}
        preds = {p: torch.tensor(h.free_entries()) for p, h in pairs.items()}
        assert homography_loss(preds, pairs).item() == 0.0

    def test_loss_single_entry_offset(self):
        target = identity()
        pred = torch.tensor(target.free_entries())
        pred[3] += 1.0
        assert homography_loss({(0, 1): pred}, {(0, 1): target}).item() == pytest.approx(1.0)

    def test_loss_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
        targets = {p: rng.uniform(-1, 1, 8) for p in pairs}
        preds = {p: torch.tensor(targets[p] + rng.normal(size=8) * 0.1) for p in pairs}
        want = sum(
            float((preds[p][k] - targets[p][k]) ** 2) for p in pairs for k in range(8)
        )
        assert homography_loss(preds, targets).item() == pytest.approx(want, abs=1e-6)

    def test_pair_set_mismatch(self):
        with pytest.raises(ValueError, match="pair"):
            homography_loss({(0, 1): torch.zeros(8)}, {(1, 0): identity()})


class TestMatchNet:
    def test_output_bounded_and_deterministic(self):
        torch.manual_seed(0)
        net = MatchNet(channels=16)
        fi, fj = torch.randn(16, 8, 8), torch.randn(16, 8, 8)
        m1 = predict_match(net, fi, fj, identity())
        m2 = predict_match(net, fi, fj, identity())
        assert m1.shape == (8, 8)
        assert (0 <= m1).all() and (m1 <= 1).all()
        assert torch.equal(m1, m2)

    def test_dummy_homography_zeroes_second_half(self):
        torch.manual_seed(0)
        fj = torch.rand(4, 8, 8)
        warped = warp_features(fj, make_dummy())
        assert torch.equal(warped, torch.zeros_like(warped))


class TestMatchLoss:
    def test_zero_when_positives_hit(self):
        gt = torch.zeros(6, 6)
        gt[1:3, 1:3] = 1.0
        m = torch.rand(6, 6) * 0.3
        m[1:3, 1:3] = 1.0
        loss = match_supervision_loss({(0, 1): m}, {(0, 1): gt})
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_all_zero_prediction_counts_positives(self):
        gt = (torch.rand(8, 8) > 0.5).double()
        loss = match_supervision_loss({(0, 1): torch.zeros(8, 8).double()}, {(0, 1): gt})
        assert loss.item() == pytest.approx(gt.sum().item())

    def test_gradient_exactly_zero_at_gt_zero_cells(self):
        gt = torch.zeros(5, 5)
        gt[2, 2] = 1.0
        m = torch.rand(5, 5, requires_grad=True)
        match_supervision_loss({(0, 1): m}, {(0, 1): gt}).backward()
        grad = m.grad.clone()
        grad[2, 2] = 0.0
        assert torch.equal(grad, torch.zeros_like(grad))

    def test_nonbinary_gt_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            match_supervision_loss(
                {(0, 1): torch.zeros(3, 3)}, {(0, 1): torch.full((3, 3), 0.5)}
            )


class TestConfidence:
    def test_range_contract(self):
        torch.manual_seed(0)
        net = ConfidenceNet(channels=16, distance_channels=4)
        c = net(torch.randn(16, 8, 8) * 5, torch.randn(4, 8, 8) * 5)
        assert (c > 1e-6).all() and (c <= 1.0).all()

    def test_distance_encoder_shape(self):
        enc = DistanceEncoder(channels=4)
        t = enc(torch.rand(64, 64) * 40, (16, 16))
        assert t.shape == (4, 16, 16)


class TestWeightMaps:
    def test_single_view_is_exactly_one(self):
        c = [torch.rand(8, 8) * 0.5 + 0.1]
        w = view_weight_maps(c, {}, {})
        assert torch.equal(w[0], torch.ones(8, 8))

    def test_symmetric_two_view_full_match(self):
        c = [torch.full((8, 8), 0.7), torch.full((8, 8), 0.7)]
        m = {(0, 1): torch.ones(8, 8), (1, 0): torch.ones(8, 8)}
        h = {(0, 1): identity(), (1, 0): identity()}
        w = view_weight_maps(c, m, h)
        assert (w[0] - 0.5).abs().max() < 1e-6
        assert (w[1] - 0.5).abs().max() < 1e-6

    def test_no_match_keeps_full_weight(self):
        c = [torch.rand(8, 8) + 0.1, torch.rand(8, 8) + 0.1]
        m = {(0, 1): torch.zeros(8, 8), (1, 0): torch.zeros(8, 8)}
        h = {(0, 1): identity(), (1, 0): identity()}
        w = view_weight_maps(c, m, h)
        assert torch.equal(w[0], torch.ones(8, 8))

    def test_matches_loop_oracle_three_views(self):
        rng = np.random.default_rng(0)
        v, hw = 3, 4
        for _ in range(10):
            confs = [torch.tensor(rng.uniform(0.2, 1.0, (hw, hw))) for _ in range(v)]
            pairs = [(i, j) for i in range(v) for j in range(v) if i != j]
            matches = {p: torch.tensor(rng.uniform(0, 1, (hw, hw))) for p in pairs}
            homs = {p: identity() for p in pairs}
            weights = view_weight_maps(confs, matches, homs)
            for i in range(v):
                for r in range(hw):
                    for cc in range(hw):
                        denom = confs[i][r, cc].item()
                        for j in range(v):
                            if j == i:
                                continue
                            denom += confs[j][r, cc].item() * matches[(i, j)][r, cc].item()
                        want = confs[i][r, cc].item() / denom
                        assert weights[i][r, cc].item() == pytest.approx(want, abs=1e-6)

    def test_weights_in_unit_interval(self):
        rng = np.random.default_rng(4)
        confs = [torch.tensor(rng.uniform(0.01, 1.0, (6, 6))) for _ in range(3)]
        pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
        matches = {p: torch.tensor(rng.uniform(0, 1, (6, 6))) for p in pairs}
        homs = {p: identity() for p in pairs}
        for w in view_weight_maps(confs, matches, homs):
            assert (w > 0).all() and (w <= 1).all()

    def test_scale_invariance_in_confidence(self):
        rng = np.random.default_rng(5)
        confs = [torch.tensor(rng.uniform(0.2, 1.0, (5, 5))) for _ in range(2)]
        pairs = [(0, 1), (1, 0)]
        matches = {p: torch.tensor(rng.uniform(0, 1, (5, 5))) for p in pairs}
        homs = {
            (0, 1): Homography.from_matrix([[1, 0, 0.1], [0, 1, -0.05], [0, 0, 1]]),
            (1, 0): Homography.from_matrix([[1, 0, -0.1], [0, 1, 0.05], [0, 0, 1]]),
        }
        w_base = view_weight_maps(confs, matches, homs)
        w_scaled = view_weight_maps([c * 37.5 for c in confs], matches, homs)
        for a, b in zip(w_base, w_scaled):
            assert (a - b).abs().max() < 1e-6

    def test_two_view_matched_cell_weights_sum_to_one(self):
        # constant confidence, exact homographies: W_1(p) + W_2(H p) == 1
        hom = Homography.from_matrix([[1, 0, 0.25], [0, 1, 0], [0, 0, 1]])
        confs = [torch.full((9, 9), 0.6), torch.full((9, 9), 0.6)]
        matches = {(0, 1): torch.ones(9, 9), (1, 0): torch.ones(9, 9)}
        homs = {(0, 1): hom, (1, 0): hom.inverse()}
        w = view_weight_maps(confs, matches, homs)
        # pick a cell whose image under hom stays well inside the map
        p = (4, 3)  # row, col; hom shifts x by +0.25 normalized = 1 cell
        q = (4, 4)
        assert w[0][p].item() + w[1][q].item() == pytest.approx(1.0, abs=1e-5)

    def test_nonpositive_confidence_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            view_weight_maps([torch.zeros(4, 4)], {}, {})

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        h = {
            (0, 1): Homography.from_matrix([[1, 0.02, 0.05], [0, 1.01, 0], [0, 0, 1]]),
            (1, 0): Homography.from_matrix([[0.99, 0, -0.05], [0.01, 1, 0], [0, 0, 1]]),
        }
        probe = [torch.tensor(rng.normal(size=(4, 4))) for _ in range(2)]
        m_fixed = {p: torch.tensor(rng.uniform(0.2, 0.8, (4, 4))) for p in h}

        def f(x):
            confs = [x[0], x[1]]
            weights = view_weight_maps(confs, m_fixed, h)
            return sum((w * r).sum() for w, r in zip(weights, probe))

        x0 = torch.tensor(rng.uniform(0.3, 1.0, (2, 4, 4)))
        assert grad_check(f, x0).max_rel_err < 1e-4
