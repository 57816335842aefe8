import filecmp
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import ndimage

from harmonet.metrics import dice
from harmonet.synthdata import (DEFAULT_DOMAINS, DEFAULT_RATERS, DataError, DomainConfig, PerturbationConfig,
                                RaterProfile, SceneSpec, consensus_mask, gen_base_lesion, gen_dataset,
                                generate, load_dataset, make_sample, robustness_grid, perturb, rater_annotate,
                                read_tensor_file, render_image, write_tensor_file)


def square(size=9, r0=3, r1=6):
    m = np.zeros((size, size), dtype=np.uint8)
    m[r0:r1, r0:r1] = 1
    return m


class TestLesion:
    def test_zero_radius_rejected(self):
        with pytest.raises(ValueError):
            gen_base_lesion(SceneSpec(radii=(0.0, 4.0)))

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError, match="leaves"):
            gen_base_lesion(SceneSpec(center=(3.0, 16.0), radii=(5.0, 5.0)))

    def test_circle_area(self):
        area = gen_base_lesion(SceneSpec(center=(16.0, 16.0), radii=(4.0, 4.0))).sum()
        assert abs(area - np.pi * 16) <= 4

    def test_rotation_swaps_extents(self):
        a = gen_base_lesion(SceneSpec(radii=(3.0, 7.0)))
        b = gen_base_lesion(SceneSpec(radii=(3.0, 7.0), rotation=np.pi / 2))
        rows_a, cols_a = np.nonzero(a)
        rows_b, cols_b = np.nonzero(b)
        assert np.ptp(rows_a) == np.ptp(cols_b) and np.ptp(cols_a) == np.ptp(rows_b)

    def test_second_lesion_mirrored(self):
        m = gen_base_lesion(SceneSpec(center=(16.0, 8.0), radii=(3.0, 3.0), second_lesion=True))
        np.testing.assert_array_equal(m, m[:, ::-1])
        single = gen_base_lesion(SceneSpec(center=(16.0, 8.0), radii=(3.0, 3.0)))
        assert m.sum() == 2 * single.sum()


class TestRaters:
    def test_zero_profile_identity(self):
        m = square()
        np.testing.assert_array_equal(rater_annotate(m, RaterProfile()), m)

    def test_dilation_of_square(self):
        np.testing.assert_array_equal(rater_annotate(square(), RaterProfile(dilation_radius=1)), square(r0=2, r1=7))

    def test_erosion_floors_at_core(self):
        out = rater_annotate(square(), RaterProfile(dilation_radius=-3))
        assert out.sum() == 1 and out[4, 4] == 1

    def test_shift(self):
        out = rater_annotate(square(), RaterProfile(shift=(1, -1)))
        np.testing.assert_array_equal(out, np.roll(np.roll(square(), 1, axis=1), -1, axis=0))

    def test_jitter_seeded_and_removes_only_boundary(self):
        m = gen_base_lesion(SceneSpec(radii=(6.0, 6.0)))
        p = RaterProfile(boundary_jitter=0.5)
        a, b = rater_annotate(m, p, 3), rater_annotate(m, p, 3)
        np.testing.assert_array_equal(a, b)
        assert np.all(a <= m)
        interior = ndimage.binary_erosion(m, np.ones((3, 3)))
        assert np.all(a[interior] == 1)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            rater_annotate(np.zeros((5, 5)), RaterProfile())

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), r=st.integers(1, 2))
    def test_opening_inside_closing(self, seed, r):
        rng = np.random.default_rng(seed)
        m = np.zeros((20, 20), dtype=np.uint8)
        m[6:14, 6:14] = rng.uniform(size=(8, 8)) > 0.3
        m[10, 10] = 1
        # the non-empty floor is a deliberate exception to the set law
        assume(ndimage.binary_erosion(m, np.ones((3, 3)), iterations=r).any())
        opened = rater_annotate(rater_annotate(m, RaterProfile(dilation_radius=-r)), RaterProfile(dilation_radius=r))
        closed = rater_annotate(rater_annotate(m, RaterProfile(dilation_radius=r)), RaterProfile(dilation_radius=-r))
        assert np.all(opened <= closed)

    def test_default_profiles_distinct(self):
        assert len({repr(p) for p in DEFAULT_RATERS}) == len(DEFAULT_RATERS)


class TestConsensus:
    def test_identical(self):
        m = square()
        np.testing.assert_array_equal(consensus_mask(np.stack([m, m, m])), m)

    def test_tie_keeps_pixel(self):
        a, b = square(r0=0, r1=2), square(r0=6, r1=8)
        np.testing.assert_array_equal(consensus_mask(np.stack([a, b])), a | b)

    def test_three_of_four(self):
        m = square()
        out = consensus_mask(np.stack([m, m, m, np.zeros_like(m)]))
        np.testing.assert_array_equal(out, m)

    def test_empty_set(self):
        with pytest.raises(ValueError):
            consensus_mask(np.zeros((0, 4, 4)))


class TestRender:
    def test_piecewise_constant_without_texture(self):
        scene = SceneSpec(texture=0.0)
        img = render_image(scene, 0, [DomainConfig()])[0]
        lesion = gen_base_lesion(scene)
        far = np.ones_like(lesion, dtype=bool)
        far[4:28, 4:28] = False
        np.testing.assert_allclose(img[far], 0.3, atol=1e-12)

    def test_seeded(self):
        s = SceneSpec()
        assert render_image(s, 4).tobytes() == render_image(s, 4).tobytes()

    def test_domain_mean_gap(self):
        doms = [DomainConfig(), DomainConfig(offset=0.08)]
        a = render_image(SceneSpec(texture=0.0, domain=0), 0, doms)
        b = render_image(SceneSpec(texture=0.0, domain=1), 0, doms)
        assert (b - a).mean() == pytest.approx(0.08, abs=1e-3)

    def test_range(self):
        img = make_sample(0, 0, domain=2).image
        assert img.shape == (1, 32, 32) and img.min() >= 0 and img.max() <= 1


class TestPerturb:
    @pytest.fixture
    def image(self):
        return make_sample(1, 0).image

    def test_robustness_grid(self):
        grid = robustness_grid()
        assert len(grid) == 9
        assert {c.kind for c in grid} == {"gaussian_noise", "gaussian_blur", "gamma"}

    def test_zero_noise_identity(self, image):
        np.testing.assert_array_equal(perturb(image, PerturbationConfig("gaussian_noise", 0.0)), image)

    def test_unit_gamma_identity(self, image):
        np.testing.assert_array_equal(perturb(image, PerturbationConfig("gamma", 1.0)), image)

    def test_blur_of_constant(self):
        img = np.full((1, 16, 16), 0.4)
        np.testing.assert_allclose(perturb(img, PerturbationConfig("gaussian_blur", 1.5)), 0.4, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            PerturbationConfig("gaussian_blur", 1.0, kernel_size=6)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PerturbationConfig("jpeg", 1.0)

    @pytest.mark.parametrize("cfg", robustness_grid(), ids=lambda c: c.label)
    def test_shape_and_range(self, image, cfg):
        out = perturb(image, cfg, seed=2)
        assert out.shape == image.shape and out.min() >= 0 and out.max() <= 1


class TestDataset:
    def test_counts_and_domains(self):
        manifest, samples = generate(6, 3, 3, seed=0)
        assert manifest["counts"] == {"train": 6, "val": 3, "test": 3}
        assert [s.split for s in samples].count("train") == 6
        train_domains = [s.scene.domain for s in samples if s.split == "train"]
        assert sorted(np.bincount(train_domains).tolist()) == [2, 2, 2]

    def test_held_out_domain(self):
        _, samples = generate(6, 3, 4, seed=0, held_out_domain=2)
        assert all(s.scene.domain == 2 for s in samples if s.split == "test")
        assert all(s.scene.domain != 2 for s in samples if s.split != "test")

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            generate(0, 1, 1)

    def test_byte_identical(self, tmp_path):
        a = gen_dataset(tmp_path / "a", 3, 2, 2, seed=7)
        b = gen_dataset(tmp_path / "b", 3, 2, 2, seed=7)
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
        assert mismatch == [] and errors == []

    def test_round_trip(self, tmp_path):
        root = gen_dataset(tmp_path / "d", 3, 2, 2, num_raters=2, seed=1)
        ds = load_dataset(root)
        manifest, samples = generate(3, 2, 2, num_raters=2, seed=1)
        assert ds.num_raters == 2 and len(ds["train"]) == 3
        np.testing.assert_allclose(ds["val"].images[0], samples[3].image, atol=1e-7)
        np.testing.assert_array_equal(ds["test"].masks[1], samples[6].masks)
        assert json.loads((root / "manifest.json").read_text())["samples"][0]["split"] == "train"

    def test_tensor_file_layout(self, tmp_path):
        a = np.arange(24, dtype=float).reshape(2, 3, 4)
        write_tensor_file(tmp_path / "t.bin", a)
        raw = (tmp_path / "t.bin").read_bytes()
        assert raw[:4] == b"HZT1" and len(raw) == 16 + 24 * 4
        # channel varies fastest: H, W, C order
        assert np.frombuffer(raw, "<f4", offset=16)[:2].tolist() == [0.0, 12.0]
        np.testing.assert_array_equal(read_tensor_file(tmp_path / "t.bin"), a)

    def test_corrupt_tensor_file(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(DataError, match="magic"):
            read_tensor_file(tmp_path / "bad.bin")
        (tmp_path / "short.bin").write_bytes(b"HZT1" + np.array([2, 2, 1], "<u4").tobytes())
        with pytest.raises(DataError):
            read_tensor_file(tmp_path / "short.bin")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_dataset(tmp_path)


class TestStyleSignal:
    @pytest.fixture(scope="class")
    @staticmethod
    def samples():
        return generate(100, 1, 1, seed=0)[1][:100]

    def test_style_separation(self, samples):
        R = len(DEFAULT_RATERS)
        mat = np.zeros((R, R))
        for s in samples:
            for i in range(R):
                for j in range(R):
                    mat[i, j] += dice(s.masks[i], s.masks[j]) / len(samples)
        np.testing.assert_allclose(np.diag(mat), 1.0)
        assert mat[~np.eye(R, dtype=bool)].mean() <= 0.92

    def test_rater_recoverability(self, samples):
        same, cross = [], []
        for n, s in enumerate(samples):
            base = gen_base_lesion(s.scene)
            for i, p in enumerate(DEFAULT_RATERS):
                again = rater_annotate(base, p, seed=10_000 + n)
                same.append(dice(s.masks[i], again))
                cross.extend(dice(s.masks[i], s.masks[j]) for j in range(len(DEFAULT_RATERS)) if j != i)
        assert np.mean(cross) < np.mean(same)

    def test_domains_differ(self):
        assert len({(d.offset, d.noise) for d in DEFAULT_DOMAINS}) == 3
