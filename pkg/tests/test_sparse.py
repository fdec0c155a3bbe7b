import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gigaslide.autograd import WIDE, BatchNorm2d, Tensor, grad_check
from gigaslide.autograd import functional as F
from gigaslide.sparse import (
    EmptyObservationError,
    MaskedTensor,
    mask_downsample,
    masked_add,
    sparse_avg_pool,
    sparse_batch_norm,
    sparse_conv2d,
    sparse_global_pool,
    sparse_max_pool,
    sparse_mean,
    sparse_var,
)


def random_masked(rng, shape, p=0.5, ensure=True):
    b, c, h, w = shape
    mask = (rng.random((b, 1, h, w)) < p).astype(WIDE)
    if ensure:
        for i in range(b):
            if mask[i].sum() == 0:
                mask[i, 0, rng.integers(h), rng.integers(w)] = 1
    feats = rng.standard_normal(shape) * mask
    return MaskedTensor(Tensor(feats, dtype=WIDE), mask)


def gathered(mt, b, c):
    return mt.features.data[b, c][mt.mask[b, 0] == 1]


masked_shapes = st.tuples(
    st.integers(1, 3), st.integers(1, 4), st.integers(1, 7), st.integers(1, 7), st.floats(0.05, 1.0),
    st.integers(0, 2**31 - 1),
)


class TestSparseMean:
    def test_hand_example(self):
        mt = MaskedTensor(Tensor(np.array([[[[2.0, 0.0], [0.0, 4.0]]]])), np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
        assert sparse_mean(mt).data.item() == pytest.approx(3.0)

    def test_full_mask_equals_dense(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        mt = MaskedTensor.from_dense(Tensor(x, dtype=WIDE))
        np.testing.assert_array_equal(sparse_mean(mt).data, x.mean(axis=(2, 3)))

    def test_empty_mask_signals(self):
        mt = MaskedTensor(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 1, 3, 3)))
        with pytest.raises(EmptyObservationError):
            sparse_mean(mt)
        np.testing.assert_array_equal(sparse_mean(mt, allow_empty=True).data, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(masked_shapes)
    def test_gather_oracle(self, spec):
        b, c, h, w, p, seed = spec
        mt = random_masked(np.random.default_rng(seed), (b, c, h, w), p)
        got = sparse_mean(mt).data
        for i in range(b):
            for j in range(c):
                assert got[i, j] == pytest.approx(gathered(mt, i, j).mean(), abs=1e-6)


class TestSparseVar:
    def test_hand_example(self):
        f = np.array([[[[2.0, 0.0], [0.0, 4.0]]]])
        o = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        # mean 3, sum (F-3)^2 = 1 + 9 + 9 + 1 = 20, beta = 2 * 9 = 18
        assert sparse_var(MaskedTensor(Tensor(f), o)).data.item() == pytest.approx(1.0)
        assert np.var([2.0, 4.0]) == 1.0

    def test_constant_observed(self, rng):
        mask = (rng.random((2, 1, 6, 6)) < 0.5).astype(float)
        mask[:, 0, 0, 0] = 1
        mt = MaskedTensor(Tensor(3.5 * np.ones((2, 3, 6, 6)) * mask), mask)
        np.testing.assert_allclose(sparse_var(mt).data, 0.0, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(masked_shapes)
    def test_population_variance_oracle(self, spec):
        b, c, h, w, p, seed = spec
        mt = random_masked(np.random.default_rng(seed), (b, c, h, w), p)
        got = sparse_var(mt).data
        for i in range(b):
            for j in range(c):
                assert got[i, j] == pytest.approx(np.var(gathered(mt, i, j)), abs=1e-6)


class TestSparseBatchNorm:
    def _params(self, c):
        bn = BatchNorm2d(c).to(WIDE)
        return bn.gamma, bn.beta, bn.running_mean, bn.running_var

    def test_full_mask_equals_dense(self, rng):
        x = rng.standard_normal((3, 4, 5, 5)) * 2 + 1
        g, b, rm, rv = self._params(4)
        dense = F.batch_norm(Tensor(x, dtype=WIDE), g, b, rm.copy(), rv.copy(), True).data
        sp = sparse_batch_norm(MaskedTensor.from_dense(Tensor(x, dtype=WIDE)), g, b, rm.copy(), rv.copy(), True)
        np.testing.assert_allclose(sp.features.data, dense, atol=1e-6)

    def test_output_moments(self, rng):
        mt = random_masked(rng, (3, 4, 6, 6), 0.4)
        mt = MaskedTensor(Tensor(mt.features.data * 3 + 2 * mt.mask, dtype=WIDE), mt.mask)
        g, b, rm, rv = self._params(4)
        out = sparse_batch_norm(mt, g, b, rm, rv, True)
        obs = out.features.data.transpose(1, 0, 2, 3)[:, out.mask[:, 0] == 1]
        np.testing.assert_allclose(obs.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(obs.var(axis=1), 1.0, atol=1e-5 * 10)

    def test_masked_entries_exact_zero(self, rng):
        mt = random_masked(rng, (2, 3, 5, 5), 0.5)
        g, b, rm, rv = self._params(3)
        b.data[:] = 0.7
        out = sparse_batch_norm(mt, g, b, rm, rv, True)
        assert np.all(out.features.data[np.broadcast_to(out.mask == 0, out.shape)] == 0)
        np.testing.assert_array_equal(out.mask, mt.mask)

    def test_empty_pass_through(self, caplog):
        mt = MaskedTensor(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 1, 3, 3)))
        g, b, rm, rv = self._params(2)
        with caplog.at_level(logging.WARNING):
            out = sparse_batch_norm(mt, g, b, rm, rv, True)
        assert out is mt and "empty" in caplog.text

    def test_matches_composed_moments(self, rng):
        # fused statistics agree with the sparse mean / variance formulas
        mt = random_masked(rng, (1, 3, 7, 7), 0.5)
        g, b, rm, rv = self._params(3)
        out = sparse_batch_norm(mt, g, b, rm, rv, True).features.data
        mean = sparse_mean(mt).data[0]
        var = sparse_var(mt).data[0]
        ref = (mt.features.data - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5) * mt.mask
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("training", [True, False])
    def test_gradcheck(self, seed, training):
        r = np.random.default_rng(seed)
        mask = (r.random((2, 1, 4, 4)) < 0.6).astype(WIDE)
        mask[:, 0, 0, 0] = 1
        x = Tensor(r.standard_normal((2, 3, 4, 4)), requires_grad=True, dtype=WIDE)
        g = Tensor(r.standard_normal(3), requires_grad=True, dtype=WIDE)
        b = Tensor(r.standard_normal(3), requires_grad=True, dtype=WIDE)
        rm, rv = r.standard_normal(3), r.random(3) + 0.5
        proj = r.standard_normal((2, 3, 4, 4))

        def fn(x, g, b):
            mt = MaskedTensor.from_dense(x, mask)
            return (sparse_batch_norm(mt, g, b, rm.copy(), rv.copy(), training).features * proj).sum()

        rep = grad_check(fn, [x, g, b])
        assert rep.passed, rep


def dense_normalized_conv(x, w, b, stride, pad):
    """Dense oracle: conv / (box count of in-bounds cells) + bias."""
    k = w.shape[-1]
    num = F.conv2d(Tensor(x), Tensor(w), None, stride, pad).data
    ones = np.ones((x.shape[0], 1) + x.shape[2:])
    den = F.conv2d(Tensor(ones), Tensor(np.ones((1, 1, k, k))), None, stride, pad).data
    return num / den + b[None, :, None, None]


class TestSparseConv:
    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (1, 0, 3), (2, 2, 5), (1, 0, 1)])
    def test_full_mask_normalized_dense(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        out = sparse_conv2d(MaskedTensor.from_dense(Tensor(x, dtype=WIDE)), Tensor(w, dtype=WIDE),
                            Tensor(b, dtype=WIDE), stride, pad)
        np.testing.assert_allclose(out.features.data, dense_normalized_conv(x, w, b, stride, pad), atol=1e-6)
        assert np.all(out.mask == 1)

    def test_interior_is_kernel_mean(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        out = sparse_conv2d(MaskedTensor.from_dense(Tensor(x, dtype=WIDE)), Tensor(w, dtype=WIDE), None, 1, 0)
        np.testing.assert_allclose(out.features.data, F.conv2d(Tensor(x), Tensor(w)).data / 9, atol=1e-6)

    def test_single_observed_pixel(self, rng):
        k, v = 3, 2.5
        feats = np.zeros((1, 2, 7, 7))
        mask = np.zeros((1, 1, 7, 7))
        feats[0, :, 3, 3] = [v, -v]
        mask[0, 0, 3, 3] = 1
        w = rng.standard_normal((1, 2, k, k))
        b = np.array([0.4])
        out = sparse_conv2d(MaskedTensor(Tensor(feats), mask), Tensor(w), Tensor(b), 1, 1)
        covered = out.mask[0, 0] == 1
        assert covered.sum() == 9
        for i, j in zip(*np.nonzero(covered)):
            di, dj = 3 - i + 1, 3 - j + 1  # kernel tap that lands on the observed pixel
            expect = (v * w[0, 0, di, dj] - v * w[0, 1, di, dj]) / 1.0 + 0.4
            assert out.features.data[0, 0, i, j] == pytest.approx(expect, rel=1e-6)
        assert np.all(out.features.data[0, 0][~covered] == 0)

    def test_empty_mask(self, rng):
        mt = MaskedTensor(Tensor(np.zeros((1, 2, 5, 5))), np.zeros((1, 1, 5, 5)))
        out = sparse_conv2d(mt, Tensor(rng.standard_normal((3, 2, 3, 3))), Tensor(np.ones(3)), 1, 1)
        assert np.all(out.features.data == 0) and np.all(out.mask == 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck(self, seed):
        r = np.random.default_rng(seed)
        mask = (r.random((2, 1, 6, 6)) < 0.5).astype(WIDE)
        x = Tensor(r.standard_normal((2, 3, 6, 6)), requires_grad=True, dtype=WIDE)
        w = Tensor(r.standard_normal((2, 3, 3, 3)), requires_grad=True, dtype=WIDE)
        b = Tensor(r.standard_normal(2), requires_grad=True, dtype=WIDE)
        proj = r.standard_normal((2, 2, 3, 3))

        def fn(x, w, b):
            return (sparse_conv2d(MaskedTensor.from_dense(x, mask), w, b, 2, 1).features * proj).sum()

        rep = grad_check(fn, [x, w, b], max_entries=40, rng=r)
        assert rep.passed, rep


class TestSparseGlobalPool:
    def test_full_mask(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_allclose(sparse_global_pool(MaskedTensor.from_dense(Tensor(x, dtype=WIDE))).data,
                                   F.global_avg_pool(Tensor(x, dtype=WIDE)).data, atol=1e-12)

    def test_half_masked_constant(self):
        c = 0.8
        mask = np.zeros((1, 1, 4, 4))
        mask[..., :2, :] = 1
        mt = MaskedTensor(Tensor(c * np.ones((1, 2, 4, 4)) * mask), mask)
        np.testing.assert_allclose(sparse_global_pool(mt).data, c)
        np.testing.assert_allclose(F.global_avg_pool(mt.features).data, c / 2)

    def test_gather_oracle(self, rng):
        for _ in range(50):
            mt = random_masked(rng, (2, 3, 5, 5), rng.random())
            got = sparse_global_pool(mt).data
            for i in range(2):
                for j in range(3):
                    assert got[i, j] == pytest.approx(gathered(mt, i, j).mean(), abs=1e-6)


class TestMaskDownsample:
    def test_all_ones(self):
        assert np.all(mask_downsample(np.ones((1, 1, 8, 8)), 2) == 1)

    def test_single_pixel(self):
        m = np.zeros((1, 1, 8, 8))
        m[0, 0, 5, 2] = 1
        d = mask_downsample(m, 2)
        assert d.sum() == 1 and d[0, 0, 2, 1] == 1

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3, 4]))
    def test_any_over_window(self, seed, k):
        r = np.random.default_rng(seed)
        m = (r.random((2, 1, 12, 12)) < 0.1).astype(float)
        d = mask_downsample(m, k)
        for b in range(2):
            for i in range(d.shape[2]):
                for j in range(d.shape[3]):
                    assert d[b, 0, i, j] == float(m[b, 0, i * k : i * k + k, j * k : j * k + k].any())


def _apply_all(mt):
    """Run every sparse operator; return their outputs as plain arrays."""
    r = np.random.default_rng(7)
    c = mt.shape[1]
    w3 = Tensor(r.standard_normal((2, c, 3, 3)), dtype=WIDE)
    bias = Tensor(r.standard_normal(2), dtype=WIDE)
    g = Tensor(r.random(c) + 0.5, dtype=WIDE)
    b = Tensor(r.standard_normal(c), dtype=WIDE)
    outs = {
        "mean": sparse_mean(mt, allow_empty=True).data,
        "var": sparse_var(mt, allow_empty=True).data,
        "pool": sparse_global_pool(mt, allow_empty=True).data,
        "conv": sparse_conv2d(mt, w3, bias, 1, 1),
        "bn": sparse_batch_norm(mt, g, b, np.zeros(c), np.ones(c), True),
    }
    if mt.shape[2] >= 2 and mt.shape[3] >= 2:
        outs["max"] = sparse_max_pool(mt, 2)
        outs["avg"] = sparse_avg_pool(mt, 2)
    return outs


class TestInvariants:
    def test_degeneracy_full_mask(self):
        # >= 500 random instances: every sparse op equals its dense counterpart
        r = np.random.default_rng(2024)
        for _ in range(500):
            b, c = r.integers(1, 3), r.integers(1, 4)
            h, w = r.integers(2, 7), r.integers(2, 7)
            x = r.standard_normal((b, c, h, w))
            xt = Tensor(x, dtype=WIDE)
            mt = MaskedTensor.from_dense(xt)
            np.testing.assert_allclose(sparse_mean(mt).data, x.mean(axis=(2, 3)), atol=1e-6)
            np.testing.assert_allclose(sparse_var(mt).data, x.var(axis=(2, 3)), atol=1e-6)
            wk = r.standard_normal((2, c, 3, 3))
            bias = r.standard_normal(2)
            np.testing.assert_allclose(sparse_conv2d(mt, Tensor(wk), Tensor(bias), 1, 1).features.data,
                                       dense_normalized_conv(x, wk, bias, 1, 1), atol=1e-6)
            gamma, beta = Tensor(np.ones(c)), Tensor(np.zeros(c))
            np.testing.assert_allclose(
                sparse_batch_norm(mt, gamma, beta, np.zeros(c), np.ones(c), True).features.data,
                F.batch_norm(xt, gamma, beta, np.zeros(c), np.ones(c), True).data, atol=1e-6)
            np.testing.assert_allclose(sparse_max_pool(mt, 2).features.data, F.max_pool2d(xt, 2).data, atol=1e-6)
            np.testing.assert_allclose(sparse_avg_pool(mt, 2).features.data, F.avg_pool2d(xt, 2).data, atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(masked_shapes)
    def test_mask_closure(self, spec):
        b, c, h, w, p, seed = spec
        mt = random_masked(np.random.default_rng(seed), (b, c, h, w), p, ensure=False)
        for name, out in _apply_all(mt).items():
            if isinstance(out, MaskedTensor):
                out.validate()

    @settings(max_examples=100, deadline=None)
    @given(masked_shapes)
    def test_invariance_to_unobserved_values(self, spec):
        b, c, h, w, p, seed = spec
        r = np.random.default_rng(seed)
        mt = random_masked(r, (b, c, h, w), p)
        noisy = mt.features.data + r.standard_normal(mt.shape) * 100 * (1 - mt.mask)
        # re-zeroing through from_dense must erase the perturbation
        mt2 = MaskedTensor.from_dense(Tensor(noisy, dtype=WIDE), mt.mask)
        a, z = _apply_all(mt), _apply_all(mt2)
        for key in a:
            va = a[key].features.data if isinstance(a[key], MaskedTensor) else a[key]
            vz = z[key].features.data if isinstance(z[key], MaskedTensor) else z[key]
            np.testing.assert_array_equal(va, vz)

    @pytest.mark.parametrize("seed", range(20))
    def test_pool_and_stats_gradcheck(self, seed):
        r = np.random.default_rng(seed)
        mask = (r.random((2, 1, 4, 4)) < 0.6).astype(WIDE)
        mask[:, 0, 1, 1] = 1
        x = Tensor(r.standard_normal((2, 3, 4, 4)), requires_grad=True, dtype=WIDE)
        p1, p2, p3, p4 = (r.standard_normal((2, 3)) for _ in range(4))
        q = r.standard_normal((2, 3, 2, 2))

        def fn(x):
            mt = MaskedTensor.from_dense(x, mask)
            return ((sparse_mean(mt) * p1).sum() + (sparse_var(mt) * p2).sum()
                    + (sparse_global_pool(mt) * p3).sum()
                    + (sparse_max_pool(mt, 2).features * q).sum()
                    + (sparse_avg_pool(mt, 2).features * q).sum())

        rep = grad_check(fn, [x])
        assert rep.passed, rep

    def test_masked_add_union(self):
        a = MaskedTensor(Tensor(np.ones((1, 1, 1, 2)) * [[1.0, 0.0]]), np.array([[[[1.0, 0.0]]]]))
        b = MaskedTensor(Tensor(np.ones((1, 1, 1, 2)) * [[2.0, 3.0]]), np.array([[[[1.0, 1.0]]]]))
        out = masked_add(a, b)
        assert out.features.data.reshape(-1).tolist() == [3.0, 3.0]
