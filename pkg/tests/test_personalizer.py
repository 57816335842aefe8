import numpy as np
import pytest

from harmonet.autodiff import ShapeError, Tape, Tensor, ops
from harmonet.autodiff.gradcheck import check_gradients
from harmonet.personalizer import Personalizer, PriorBank
from harmonet.wavelet import dwt_haar2d


def make(channels=8, latent=6, raters=4, spatial=8, seed=0):
    return Personalizer(np.random.default_rng(seed), channels, latent, raters, spatial)


def bank_from(rng, B=2, M=5, D=6, stats=True):
    samples = Tensor(rng.normal(size=(B, M, D)))
    if not stats:
        return PriorBank(samples)
    return PriorBank(samples, rng.normal(size=(B, D)), np.exp(rng.normal(size=(B, D)) * 0.3))


class TestConstruction:
    def test_channels_not_divisible(self):
        with pytest.raises(ShapeError, match="divisible by 4"):
            make(channels=6)

    def test_odd_spatial(self):
        with pytest.raises(ShapeError):
            make(spatial=7)

    def test_wrong_input_channels(self, rng):
        with pytest.raises(ShapeError):
            make().project_reduce(Tensor(rng.normal(size=(1, 4, 8, 8))))


class TestStages:
    def test_reduce_and_band_shapes(self, rng):
        p = make()
        red = p.project_reduce(Tensor(rng.normal(size=(2, 8, 8, 8))))
        assert red.shape == (2, 2, 8, 8)
        bands = dwt_haar2d(red)
        assert bands.ll.shape == (2, 2, 4, 4)
        assert bands.high().shape == (2, 6, 4, 4)

    def test_uniform_weights_when_pointwise_conv_is_zero(self, rng):
        p = make()
        p.prompt_pwc.weight.data[:] = 0.0
        p.prompt_pwc.bias.data[:] = 0.0
        w = p.prompt_weights(Tensor(rng.normal(size=(3, 6, 4, 4)))).data
        np.testing.assert_allclose(w, 0.25, atol=1e-15)

    def test_weights_sum_to_one(self, rng):
        w = make().prompt_weights(Tensor(rng.normal(size=(3, 6, 4, 4)))).data
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
        assert np.all(w > 0)

    def test_zero_style_row_gives_bias_only_prompt(self):
        p = make()
        p.styles.data[1] = 0.0
        prompt = p.compose_prompt(1, Tensor(np.full((1, 4), 0.25))).data
        expected = np.broadcast_to(p.prompt_conv.bias.data[:, None, None], (6, 4, 4))
        np.testing.assert_allclose(prompt[0], expected, atol=1e-12)

    def test_compose_matches_explicit_sum(self, rng):
        p = make()
        p.prompt_conv.weight.data[:] = 0.0
        p.prompt_conv.bias.data[:] = 0.0
        for o in range(6):
            p.prompt_conv.weight.data[o, o, 1, 1] = 1.0
        w = ops.softmax(Tensor(rng.normal(size=(1, 4))), axis=-1)
        out = p.compose_prompt(2, w).data[0]
        ref = sum(w.data[0, c] * p.styles.data[2, c] * p.prompts.data[c] for c in range(4))
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_rater_out_of_range(self):
        with pytest.raises(ValueError, match="rater"):
            make().compose_prompt(4, Tensor(np.full((1, 4), 0.25)))

    def test_lka_zero_input_passes_bias(self, rng):
        p = make()
        out = p.lka_recalibrate(Tensor(np.zeros((1, 6, 4, 4))), Tensor(rng.normal(size=(1, 6, 4, 4)))).data
        np.testing.assert_allclose(out[0], np.broadcast_to(p.lka_out.bias.data[:, None, None], (6, 4, 4)))

    def test_lka_gating_oracle(self, rng):
        p = make()
        p.lka_out.weight.data[:] = np.eye(6).reshape(6, 6, 1, 1)
        p.lka_out.bias.data[:] = 0.0
        xh, prompt = Tensor(rng.normal(size=(1, 6, 4, 4))), Tensor(rng.normal(size=(1, 6, 4, 4)))
        attn = p.lka_pw(p.lka_dwd(p.lka_dw(xh + prompt))).data
        np.testing.assert_allclose(p.lka_recalibrate(xh, prompt).data, attn * xh.data, atol=1e-12)

    def test_lka_shape_mismatch(self):
        with pytest.raises(ShapeError):
            make().lka_recalibrate(Tensor(np.zeros((1, 6, 4, 4))), Tensor(np.zeros((1, 6, 2, 2))))

    def test_local_context_is_pooled_conv(self, rng):
        p = make()
        xh, ll = rng.normal(size=(2, 6, 4, 4)), rng.normal(size=(2, 2, 4, 4))
        ctx = p.local_context(Tensor(xh), Tensor(ll)).data
        ref = p.context(Tensor(np.concatenate([xh, ll], axis=1))).data.mean(axis=(2, 3))
        assert ctx.shape == (2, 6)
        np.testing.assert_allclose(ctx, ref, atol=1e-12)


class TestCrossAttention:
    def test_single_entry_bank_returns_it(self, rng):
        bank = bank_from(rng, M=1)
        out = Personalizer.prior_cross_attend(Tensor(rng.normal(size=(2, 6))), bank).data
        np.testing.assert_allclose(out, bank.samples.data[:, 0], atol=1e-12)

    def test_identical_rows_return_that_row(self, rng):
        row = rng.normal(size=(2, 1, 6))
        bank = PriorBank(Tensor(np.repeat(row, 7, axis=1)))
        out = Personalizer.prior_cross_attend(Tensor(rng.normal(size=(2, 6)) * 5), bank).data
        np.testing.assert_allclose(out, row[:, 0], atol=1e-12)

    def test_attends_in_standardized_coordinates(self, rng):
        bank = bank_from(rng)
        q = rng.normal(size=(2, 6))
        keys = (bank.samples.data - bank.mu[:, None]) / bank.sigma[:, None]
        s = np.einsum("bd,bmd->bm", q, keys) / np.sqrt(6)
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        ref = np.einsum("bm,bmd->bd", w, bank.samples.data)
        np.testing.assert_allclose(Personalizer.prior_cross_attend(Tensor(q), bank).data, ref, atol=1e-12)

    def test_standardize_without_stats_is_identity(self, rng):
        bank = bank_from(rng, stats=False)
        z = Tensor(rng.normal(size=(2, 6)))
        assert bank.standardize(z) is z

    def test_empty_bank(self, rng):
        with pytest.raises(ShapeError):
            Personalizer.prior_cross_attend(Tensor(np.zeros((1, 6))), PriorBank(Tensor(np.zeros((1, 0, 6)))))


class TestFullChain:
    @pytest.fixture
    def inputs(self, rng):
        return Tensor(rng.normal(size=(2, 8, 8, 8))), Tensor(rng.normal(size=(2, 6))), bank_from(rng)

    def test_shape_and_determinism(self, inputs):
        p = make()
        a = p.personalize_latent(*inputs[:2], 1, inputs[2]).data
        b = p.personalize_latent(*inputs[:2], 1, inputs[2]).data
        assert a.shape == (2, 6)
        assert a.tobytes() == b.tobytes()

    def test_distinct_raters_distinct_latents(self, inputs):
        p = make()
        zs = [p.personalize_latent(inputs[0], inputs[1], r, inputs[2]).data for r in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.allclose(zs[i], zs[j])

    def test_per_sample_rater_ids(self, inputs):
        p = make()
        mixed = p.personalize_latent(inputs[0], inputs[1], np.array([0, 3]), inputs[2]).data
        r0 = p.personalize_latent(inputs[0], inputs[1], 0, inputs[2]).data
        r3 = p.personalize_latent(inputs[0], inputs[1], 3, inputs[2]).data
        np.testing.assert_allclose(mixed, np.stack([r0[0], r3[1]]), atol=1e-12)

    def test_latent_dim_mismatch(self, inputs):
        with pytest.raises(ShapeError):
            make().personalize_latent(inputs[0], Tensor(np.zeros((2, 5))), 0, inputs[2])

    def test_prompts_and_styles_receive_gradient(self, inputs):
        p = make()
        with Tape() as tape:
            loss = ops.sum(p.personalize_latent(*inputs[:2], 2, inputs[2]) ** 2)
        tape.backward(loss)
        assert np.abs(p.prompts.grad).max() > 0
        assert np.abs(p.styles.grad[2]).max() > 0
        np.testing.assert_array_equal(p.styles.grad[[0, 1, 3]], 0.0)

    def test_gradcheck(self, rng):
        p = make(channels=4, latent=3, raters=2, spatial=4)
        feat = Tensor(rng.normal(size=(1, 4, 4, 4)))
        z = Tensor(rng.normal(size=(1, 3)))
        bank = bank_from(rng, B=1, M=3, D=3)
        c = rng.normal(size=3)

        def loss():
            return ops.sum(p.personalize_latent(feat, z, 1, bank) * Tensor(c))
        errs = check_gradients(loss, [p.styles, p.prompts, p.resynth.weight, p.context.weight], max_entries=12,
                               rng=np.random.default_rng(0))
        assert max(errs) < 1e-5
