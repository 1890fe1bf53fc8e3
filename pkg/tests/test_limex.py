import math

import numpy as np
import pytest
from _support import LinearStub, all_masks, strip
from hypothesis import given, settings
from hypothesis import strategies as st

from gradlime import limex
from gradlime.segmentation import SegmentMap
from gradlime.tensor import Prng


UNIFORM = limex.LimeConfig(kernel_width=math.inf, ridge_lambda=0.0)


class TestSampling:
    def test_single_mask_is_all_ones(self):
        assert limex.sample_masks(1, 5, Prng(0)).tolist() == [[1] * 5]

    def test_first_row_all_ones(self):
        m = limex.sample_masks(50, 7, Prng(3))
        assert m[0].all() and m.shape == (50, 7)

    def test_seeded(self):
        assert np.array_equal(limex.sample_masks(30, 9, Prng(4)), limex.sample_masks(30, 9, Prng(4)))

    def test_bits_are_fair(self):
        m = limex.sample_masks(10_001, 10, Prng(11))[1:]
        assert np.all(np.abs(m.mean(axis=0) - 0.5) <= 0.05)

    def test_zero_segments_rejected(self):
        with pytest.raises(ValueError):
            limex.sample_masks(3, 0, Prng(0))


class TestPerturb:
    @pytest.fixture
    def case(self):
        rng = np.random.default_rng(0)
        image = rng.random((3, 8, 8)).astype(np.float32)
        seg = SegmentMap(np.repeat(np.arange(4), 16).reshape(8, 8), 4)
        return image, seg

    def test_all_on_is_bitwise_copy(self, case):
        image, seg = case
        assert np.array_equal(limex.perturb(image, seg, np.ones(4)), image)

    def test_all_off_is_channel_median(self, case):
        image, seg = case
        out = limex.perturb(image, seg, np.zeros(4))
        med = np.median(image.reshape(3, -1), axis=1)
        assert np.allclose(out, med[:, None, None].astype(np.float32))

    def test_one_segment_off_changes_exactly_its_pixels(self, case):
        image, seg = case
        out = limex.perturb(image, seg, [1, 0, 1, 1])
        changed = np.any(out != image, axis=0)
        assert changed.sum() == 16 and np.all(seg.labels[changed] == 1)

    def test_zero_fill(self, case):
        image, seg = case
        out = limex.perturb(image, seg, [0, 1, 1, 1], fill=limex.ZERO)
        assert np.all(out[:, seg.labels == 0] == 0)

    def test_size_mismatch(self, case):
        image, seg = case
        with pytest.raises(ValueError):
            limex.perturb(image, seg, np.ones(5))


class TestKernel:
    def test_all_ones_weight_one(self):
        assert limex.kernel_weight(np.ones(6), 0.25) == 1.0

    def test_all_zero_weight(self):
        assert limex.kernel_weight(np.zeros(6), 0.25) == pytest.approx(math.exp(-16))

    @pytest.mark.parametrize("d", [2, 8, 20])
    def test_half_mask(self, d):
        mask = np.r_[np.ones(d // 2), np.zeros(d // 2)]
        dist = 1 - math.sqrt(0.5)
        assert limex.kernel_weight(mask, 0.25) == pytest.approx(math.exp(-dist**2 / 0.0625))

    def test_infinite_width_is_uniform(self):
        w = limex.kernel_weights(all_masks(4), math.inf)
        assert np.all(w == 1.0)


class TestRidge:
    def test_two_point_line(self):
        beta, b0 = limex.fit_weighted_ridge([[0], [1]], [0, 2], [1, 1], 0.0)
        assert beta[0] == pytest.approx(2.0) and b0 == pytest.approx(0.0, abs=1e-12)

    def test_heavy_penalty_shrinks_to_intercept(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 2, (50, 6))
        y = rng.random(50)
        beta, b0 = limex.fit_weighted_ridge(x, y, np.ones(50), 1e9)
        assert np.linalg.norm(beta) < 1e-6 and b0 == pytest.approx(y.mean(), abs=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 10.0))
    def test_stationary_point(self, seed, lam):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 2, (200, 8)).astype(np.float64)
        y = rng.random(200)
        w = rng.random(200) + 0.1
        beta, b0 = limex.fit_weighted_ridge(x, y, w, lam)
        r = w * (y - b0 - x @ beta)
        grad = np.r_[-2 * r.sum(), -2 * x.T @ r + 2 * lam * beta]
        assert np.linalg.norm(grad) < 1e-6

    def test_singular_without_penalty(self):
        with pytest.raises(limex.SingularSystemError, match="ridge_lambda > 0"):
            limex.fit_weighted_ridge([[1, 1], [1, 1]], [0, 1], [1, 1], 0.0)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            limex.fit_weighted_ridge(np.zeros((0, 2)), [], [], 1.0)
        with pytest.raises(ValueError):
            limex.fit_weighted_ridge([[1]], [1], [1], -1.0)


class TestExplain:
    def test_exhaustive_recovers_linear_stub(self):
        image, seg = strip(8)
        beta = np.random.default_rng(5).normal(0, 0.05, 8)
        res = limex.lime_explain(LinearStub(image, beta), image, seg, 0, UNIFORM, masks=all_masks(8))
        np.testing.assert_allclose(res.coefficients, beta, atol=1e-6)
        assert res.intercept == pytest.approx(0.1, abs=1e-6)
        assert res.ranking.ids[0] == np.argmax(beta)

    def test_ranking_is_signed_by_default(self):
        image, seg = strip(4)
        beta = [0.1, -0.3, 0.05, 0.0]
        res = limex.lime_explain(LinearStub(image, beta), image, seg, 0, UNIFORM, masks=all_masks(4))
        assert res.ranking.ids.tolist() == [0, 2, 3, 1]
        cfg = limex.LimeConfig(kernel_width=math.inf, ridge_lambda=0.0, rank_by="absolute")
        res = limex.lime_explain(LinearStub(image, beta), image, seg, 0, cfg, masks=all_masks(4))
        assert res.ranking.ids.tolist() == [1, 0, 2, 3]

    def test_single_sample(self):
        image, seg = strip(4)
        stub = LinearStub(image, np.full(4, 0.1))
        with pytest.raises(limex.SingularSystemError):
            limex.lime_explain(stub, image, seg, 0, limex.LimeConfig(n_samples=1, ridge_lambda=0.0))
        res = limex.lime_explain(stub, image, seg, 0, limex.LimeConfig(n_samples=1, ridge_lambda=1.0))
        assert np.all(res.coefficients == 0.0)

    def test_batches_cover_samples_in_order(self):
        image, seg = strip(6)
        stub = LinearStub(image, np.linspace(0, 0.1, 6))
        res = limex.lime_explain(stub, image, seg, 0, limex.LimeConfig(n_samples=37, batch_size=10))
        assert stub.calls == 4 and len(res.targets) == 37
        np.testing.assert_allclose(res.targets, 0.1 + res.masks @ np.linspace(0, 0.1, 6))

    @pytest.mark.parametrize("batch_size,threads", [(1, 1), (7, 1), (16, 3), (100, 2)])
    def test_deterministic_across_batching_and_threads(self, batch_size, threads):
        rng = np.random.default_rng(2)
        image = rng.random((3, 8, 8)).astype(np.float32)
        seg = SegmentMap(np.repeat(np.arange(8), 8).reshape(8, 8), 8)
        w = rng.normal(size=(8, 3))

        def model(batch):  # row by row, so the batch shape cannot change the arithmetic
            z = np.stack([row.mean(axis=(0, 1)) @ w for row in batch])
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        ref = limex.lime_explain(model, image, seg, 1, limex.LimeConfig(n_samples=60, seed=9))
        cfg = limex.LimeConfig(n_samples=60, seed=9, batch_size=batch_size, threads=threads)
        res = limex.lime_explain(model, image, seg, 1, cfg)
        assert np.array_equal(res.coefficients, ref.coefficients)
        assert np.array_equal(res.ranking.ids, ref.ranking.ids)
