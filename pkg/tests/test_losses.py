import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harmonet.autodiff import Tensor
from harmonet.losses import (LossWeights, dice_ce_loss, ged_loss, iou_distance, pairwise_iou_distance,
                             phase2_loss, total_loss_phase1)
from harmonet.model import HarmonizerNet, ModelConfig


def naive_ged(preds, annots):
    K, N = len(preds), len(annots)
    d = lambda a, b: iou_distance(a, b).item()  # noqa: E731
    fid = sum(d(p, a) for p in preds for a in annots) * 2 / (K * N)
    div = sum(d(preds[i], preds[j]) for i in range(K) for j in range(i + 1, K)) * 2 / (K * (K - 1))
    return fid - div


class TestIoU:
    def test_identical_binary(self):
        a = np.zeros((4, 4))
        a[1:3, 1:3] = 1
        assert iou_distance(a, a).item() < 1e-6

    def test_disjoint(self):
        a, b = np.zeros((4, 4)), np.zeros((4, 4))
        a[0, 0], b[3, 3] = 1, 1
        assert iou_distance(a, b).item() == pytest.approx(1 - 1e-6 / (2 + 1e-6), abs=1e-12)

    def test_half_overlap(self):
        a, b = np.zeros((1, 2)), np.zeros((1, 2))
        a[0, 0] = 1
        b[0, :] = 1
        assert iou_distance(a, b).item() == pytest.approx(0.5, abs=1e-6)

    def test_pairwise_matches_single(self, rng):
        p, q = rng.uniform(size=(3, 5, 5)), rng.uniform(size=(2, 5, 5))
        mat = pairwise_iou_distance(Tensor(p), Tensor(q)).data
        for i in range(3):
            for j in range(2):
                assert mat[i, j] == pytest.approx(iou_distance(p[i], q[j]).item(), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou_distance(np.zeros((2, 2)), np.zeros((3, 3)))


class TestGEDLoss:
    def test_all_identical_is_zero(self):
        m = np.zeros((6, 6))
        m[2:4, 1:5] = 1
        assert abs(ged_loss(np.stack([m] * 3), np.stack([m] * 2)).item()) < 1e-6

    def test_matches_scalar_loop(self, rng):
        preds, annots = rng.uniform(size=(4, 6, 6)), (rng.uniform(size=(3, 6, 6)) > 0.5).astype(float)
        assert ged_loss(preds, annots).item() == pytest.approx(naive_ged(preds, annots), abs=1e-12)

    def test_hand_configuration(self):
        # P1 = {0,1}, P2 = {1,2}, A = {1}: d(P,A) = 1/2 each, d(P1,P2) = 2/3
        p1, p2, a = np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3))
        p1[0, :2], p2[0, 1:], a[0, 1] = 1, 1, 1
        val = ged_loss(np.stack([p1, p2]), a[None]).item()
        assert val == pytest.approx((2 / 2) * (0.5 + 0.5) - (2 / 2) * (2 / 3), abs=1e-5)

    def test_batched(self, rng):
        preds, annots = rng.uniform(size=(2, 3, 4, 4)), rng.uniform(size=(2, 2, 4, 4))
        out = ged_loss(preds, annots).data
        assert out.shape == (2,)
        for b in range(2):
            assert out[b] == pytest.approx(naive_ged(preds[b], annots[b]), abs=1e-12)

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError, match="K >= 2"):
            ged_loss(np.zeros((1, 4, 4)), np.zeros((2, 4, 4)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), K=st.integers(2, 5), N=st.integers(1, 4))
    def test_permutation_invariant(self, seed, K, N):
        rng = np.random.default_rng(seed)
        preds, annots = rng.uniform(size=(K, 4, 4)), rng.uniform(size=(N, 4, 4))
        a = ged_loss(preds, annots).item()
        b = ged_loss(preds[rng.permutation(K)], annots[rng.permutation(N)]).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestDiceCE:
    def test_saturated_correct_logits(self):
        t = np.zeros((6, 6))
        t[1:4, 2:5] = 1
        assert dice_ce_loss(np.where(t > 0, 20.0, -20.0), t).item() < 1e-6

    def test_ce_ln2(self):
        assert dice_ce_loss(np.zeros((4, 4)), np.full((4, 4), 0.5), mix=0.0).item() == pytest.approx(np.log(2))

    def test_dice_term_perfect_soft_match(self):
        t = np.ones((4, 4))
        assert dice_ce_loss(np.full((4, 4), 40.0), t, mix=1.0).item() < 1e-6

    def test_mix_is_convex_combination(self, rng):
        logits, t = rng.normal(size=(5, 5)), (rng.uniform(size=(5, 5)) > 0.5).astype(float)
        d = dice_ce_loss(logits, t, 1.0).item()
        c = dice_ce_loss(logits, t, 0.0).item()
        assert dice_ce_loss(logits, t, 0.3).item() == pytest.approx(0.3 * d + 0.7 * c, abs=1e-12)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_kl=-1)
        with pytest.raises(ValueError):
            LossWeights(dice_ce_mix=1.5)


@pytest.fixture(scope="module")
def tiny():
    cfg = ModelConfig(image_size=16, base_width=8, depth=2, bank_size=4)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(2, 1, 16, 16))
    annots = np.zeros((2, 4, 16, 16))
    annots[:, :, 5:11, 4:12] = 1
    annots[:, 1, 5, :] = 0
    return cfg, x, annots


class TestPhase1:
    def test_zero_lambdas_total_equals_seg(self, tiny):
        cfg, x, annots = tiny
        model = HarmonizerNet(cfg, seed=0)
        w = LossWeights(0.0, 0.0, 0.0)
        _, rep = total_loss_phase1(model, x, annots, np.random.default_rng(0), w, K=3)
        assert rep.total == rep.seg

    def test_decomposition(self, tiny):
        cfg, x, annots = tiny
        model = HarmonizerNet(cfg, seed=0)
        w = LossWeights(0.1, 0.2, 0.7)
        _, rep = total_loss_phase1(model, x, annots, np.random.default_rng(0), w, K=3)
        assert rep.total == pytest.approx(rep.seg + 0.1 * rep.kl + 0.2 * rep.harm + 0.7 * rep.ged, abs=1e-12)

    def test_identity_harmonizer_has_zero_penalty(self, tiny):
        cfg, x, annots = tiny
        _, rep = total_loss_phase1(HarmonizerNet(cfg, seed=0), x, annots, np.random.default_rng(0), K=2)
        assert rep.harm == 0.0

    def test_kl_zero_when_prior_equals_posterior(self, tiny):
        cfg, x, annots = tiny
        model = HarmonizerNet(cfg, seed=0)
        for net in (model.backbone.prior, model.backbone.posterior):
            net.head.weight.data[:] = 0.0
            net.head.bias.data[:] = 0.25
        _, rep = total_loss_phase1(model, x, annots, np.random.default_rng(0), K=2)
        assert abs(rep.kl) < 1e-12

    def test_no_ged(self, tiny):
        cfg, x, annots = tiny
        _, rep = total_loss_phase1(HarmonizerNet(cfg, seed=0), x, annots, np.random.default_rng(0),
                                   use_ged=False)
        assert rep.ged == 0.0

    def test_memory_receives_prior_draws(self, tiny):
        cfg, x, annots = tiny
        mem = []
        total_loss_phase1(HarmonizerNet(cfg, seed=0), x, annots, np.random.default_rng(0), K=3, memory=mem)
        assert len(mem) == 2 * 3 and len(mem[0]) == cfg.latent_dim

    def test_seeded(self, tiny):
        cfg, x, annots = tiny
        model = HarmonizerNet(cfg, seed=0)
        a = total_loss_phase1(model, x, annots, np.random.default_rng(9), K=3)[1]
        b = total_loss_phase1(model, x, annots, np.random.default_rng(9), K=3)[1]
        assert a == b


class TestPhase2:
    def test_additive_over_raters(self, tiny):
        cfg, x, annots = tiny
        model = HarmonizerNet(cfg, seed=0)
        # a collapsed prior makes every draw the mean, so rater terms do not share randomness
        model.backbone.prior.head.weight.data[:, cfg.latent_dim:] = 0.0
        model.backbone.prior.head.bias.data[cfg.latent_dim:] = -10.0
        full = phase2_loss(model, x, annots, np.random.default_rng(1)).item()
        parts = sum(phase2_loss(model, x, annots, np.random.default_rng(7 + r), raters=[r]).item()
                    for r in range(4))
        assert full == pytest.approx(parts, rel=1e-6)

    def test_single_rater_near_perfect(self, tiny):
        cfg, x, annots = tiny
        model = HarmonizerNet(cfg, seed=0)
        head = model.backbone.head_out
        head.weight.data[:] = 0.0
        head.bias.data[:] = 30.0
        ones = np.ones((2, 1, 16, 16))
        assert phase2_loss(model, x, ones, np.random.default_rng(0), mix=1.0).item() < 1e-6
