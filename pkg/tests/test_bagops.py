"""Bag aggregation: degenerate cases, invariance, hull, gradients."""

import numpy as np
import pytest

from llpkit import autodiff as ad
from llpkit import bagops
from llpkit.autodiff import Tensor


def _params(variant, use_projection=False, d_rep=6, d_proj=4, seed=0):
    cfg = bagops.AggregatorConfig(variant=variant, use_projection=use_projection)
    return bagops.AggregatorParams(cfg, d_rep, d_proj, np.random.default_rng(seed))


ALL_VARIANTS = list(bagops.VARIANTS)


class TestAggregate:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_identical_rows_return_the_row(self, variant):
        row = np.array([1.0, -2.0, 0.5, 3.0, 0.0, 1.0])
        z = Tensor(np.tile(row, (5, 1)))
        bag = bagops.aggregate(z, _params(variant))
        np.testing.assert_allclose(bag.values, row, atol=1e-12)

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_single_row_bag(self, variant):
        row = np.random.default_rng(1).normal(size=6)
        bag = bagops.aggregate(Tensor(row[None, :]), _params(variant))
        np.testing.assert_allclose(bag.values, row, atol=1e-12)

    def test_zero_query_matrix_gives_mean(self):
        params = _params("query-softmax")
        params.query.values[:] = 0.0
        z = np.random.default_rng(2).normal(size=(4, 6))
        bag = bagops.aggregate(Tensor(z), params)
        np.testing.assert_allclose(bag.values, z.mean(axis=0), atol=1e-12)

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_permutation_invariance(self, variant):
        rng = np.random.default_rng(3)
        params = _params(variant)
        z = rng.normal(size=(7, 6))
        base = bagops.aggregate(Tensor(z), params).values
        for _ in range(5):
            perm = rng.permutation(7)
            permuted = bagops.aggregate(Tensor(z[perm]), params).values
            np.testing.assert_allclose(permuted, base, atol=1e-10)

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_convex_hull_without_projection(self, variant):
        # m < d and full-rank rows: the coefficients expressing the bag in
        # the row basis must be nonnegative and sum to 1
        rng = np.random.default_rng(4)
        for trial in range(10):
            z = rng.normal(size=(4, 6))
            params = _params(variant, seed=trial)
            bag = bagops.aggregate(Tensor(z), params).values
            coeffs, *_ = np.linalg.lstsq(z.T, bag, rcond=None)
            np.testing.assert_allclose(z.T @ coeffs, bag, atol=1e-9)
            assert coeffs.min() >= -1e-10
            assert coeffs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_empty_bag_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            bagops.aggregate(Tensor(np.zeros((0, 6))), _params("weighted-sum-cosine"))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            bagops.AggregatorConfig(variant="max-pool")

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    @pytest.mark.parametrize("use_projection", [False, True])
    def test_gradient_check(self, variant, use_projection):
        rng = np.random.default_rng(5)
        params = _params(variant, use_projection=use_projection)
        z = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        probe = rng.normal(size=4 if use_projection else 6)

        def build():
            bag = bagops.aggregate(z, params)
            return ad.tsum(ad.mul(bag, Tensor(probe)))

        named = {"z": z, **params.named_params()}
        report = ad.check_gradients(build, named, step=1e-5, tol=1e-4)
        assert report.passed, str(report)

    def test_projection_changes_width(self):
        params = _params("weighted-sum-cosine", use_projection=True)
        z = Tensor(np.random.default_rng(6).normal(size=(3, 6)))
        bag = bagops.aggregate(z, params)
        assert bag.values.shape == (4,)
