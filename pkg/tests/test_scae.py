import logging
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gigaslide.autograd import WIDE, Tensor, ShapeError
from gigaslide.autograd import functional as F
from gigaslide.scae import (
    Decoder,
    TIE_RTOL,
    Scae,
    ScaeConfig,
    ScaeDivergedError,
    ScaeTrainConfig,
    blind_mse,
    crosswise_mask,
    encode_slide,
    mode_channels,
    nucleus_rich,
    pool_to_vector,
    prepare_patch,
    sample_training_patches,
    search_sparsity_rate,
    train_scae,
    update_sparsity_rate,
)
from gigaslide.slide import SynthConfig, crop_bounding_box, generate_synthetic_slide, sift_patches


@pytest.fixture(scope="module")
def small_slide():
    return generate_synthetic_slide(SynthConfig(extent=4096, lesion_density=0.06, seed=21))


@pytest.fixture(scope="module")
def patches(small_slide):
    grid = sift_patches(small_slide, 256)
    rng = np.random.default_rng(0)
    x = sample_training_patches([small_slide], [grid], 256, 60, rng)
    cut = int(len(x) * 0.75)
    assert len(x) - cut >= 8
    return x[:cut], x[cut:]


@pytest.fixture(scope="module")
def trained(patches):
    train, val = patches
    model, hist = train_scae(train, val, ScaeTrainConfig(epochs=6, seed=0))
    return model, hist


class TestCrosswiseMask:
    def test_all_zero_candidates(self):
        assert crosswise_mask(np.zeros((2, 96, 14, 14)), 0.9).sum() == 0

    def test_twenty_of_196_sites(self, rng):
        cand = rng.standard_normal((1, 96, 14, 14))
        m = crosswise_mask(cand, 0.9)
        assert m.sum() == math.ceil(0.1 * 196) == 20
        scores = np.abs(cand).max(axis=1).ravel()
        top = np.argsort(scores)[-20:]
        np.testing.assert_array_equal(np.sort(np.flatnonzero(m.ravel())), np.sort(top))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95), st.integers(2, 9), st.integers(2, 9))
    def test_sort_oracle(self, seed, rho, h, w):
        rng = np.random.default_rng(seed)
        cand = rng.standard_normal((3, 4, h, w))
        m = crosswise_mask(cand, rho)
        n = h * w
        k = math.ceil((1 - rho) * n - 1e-9)
        for b in range(3):
            scores = np.abs(cand[b]).max(axis=0).ravel()
            ordered = np.sort(scores)
            if 0 < k < n:  # near-ties at the cut are excluded by design
                assume(ordered[n - k] - ordered[n - k - 1] > TIE_RTOL * ordered[-1])
            expect = np.zeros(n)
            if k:
                expect[np.argsort(scores)[n - k:]] = 1
            np.testing.assert_array_equal(m[b, 0].ravel(), expect)

    def test_ties_excluded(self):
        cand = np.ones((1, 2, 4, 4))
        assert crosswise_mask(cand, 0.5).sum() == 0

    @pytest.mark.parametrize("rho", [0.0, 1.0, -0.1, 1.5])
    def test_rho_outside_interval(self, rho):
        with pytest.raises(ValueError):
            crosswise_mask(np.ones((1, 1, 2, 2)), rho)

    def test_sparsity_both_directions(self, rng):
        model = Scae(ScaeConfig(seed=3))
        x = Tensor(rng.random((2, 3, 112, 112)).astype(np.float32))
        enc = model.encode(x)
        nonzero = (enc.fg.data != 0).any(axis=1, keepdims=True)
        np.testing.assert_array_equal(nonzero, enc.mask.astype(bool))


class TestSparsityRate:
    def test_arithmetic(self):
        assert update_sparsity_rate(0.9, 0.2, 0.9) == pytest.approx(0.89)

    def test_momentum_one_keeps(self):
        assert update_sparsity_rate(0.37, 0.8, 1.0) == pytest.approx(0.37)

    def test_momentum_zero_follows_batch(self):
        assert update_sparsity_rate(0.9, 0.3, 0.0) == pytest.approx(0.7)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.001, 0.999), st.floats(0, 1), st.floats(0, 1))
    def test_stays_in_open_interval(self, rho, rate, momentum):
        r = update_sparsity_rate(rho, rate, momentum)
        assert 0.0 < r < 1.0 and 0.01 <= r <= 0.99


class TestEncoder:
    def test_gate_open_interval_and_shapes(self, rng):
        model = Scae()
        x = Tensor((rng.random((2, 3, 112, 112)) * 4 - 2).astype(np.float32))
        enc = model.encode(x)
        assert enc.fg.shape == (2, 96, 14, 14) and enc.bg.shape == (2, 32, 14, 14)
        assert np.all(enc.bg.data > 0) and np.all(enc.bg.data < 1)
        on = enc.fg.data[np.broadcast_to(enc.mask, enc.fg.shape) == 1]
        assert np.all(on > 0) and np.all(on < 1)

    def test_identical_patches_identical_outputs(self, rng):
        model = Scae()
        model.eval()
        p = rng.random((1, 3, 112, 112)).astype(np.float32)
        enc = model.encode(Tensor(np.concatenate([p, p])))
        np.testing.assert_array_equal(enc.fg.data[0], enc.fg.data[1])
        np.testing.assert_array_equal(enc.bg.data[0], enc.bg.data[1])

    def test_wrong_extent_rejected(self):
        with pytest.raises(ShapeError):
            Scae().encode(Tensor(np.zeros((1, 3, 96, 96), np.float32)))

    def test_channel_split(self):
        cfg = ScaeConfig()
        assert (cfg.fg_channels, cfg.bg_channels, cfg.embed_channels) == (96, 32, 128)

    def test_blank_patch_untrained_mask_empty(self):
        model = Scae()
        model.eval()
        enc = model.encode(Tensor(np.full((1, 3, 112, 112), 0.05, np.float32)))
        assert enc.mask.mean() < 0.05

    def test_blank_patch_trained_mask_nearly_empty(self, trained):
        model, _ = trained
        blank = prepare_patch(np.full((256, 256, 3), 242, np.uint8))
        enc = model.encode(Tensor(blank[None]))
        assert enc.mask.mean() < 0.05

    def test_prepare_patch(self):
        x = prepare_patch(np.zeros((256, 256, 3), np.uint8))
        assert x.shape == (3, 112, 112) and x.dtype == np.float32 and np.all(x == 1)
        with pytest.raises(ShapeError):
            prepare_patch(np.zeros((256, 256), np.uint8))

    def test_nucleus_rich_rule(self):
        rgb = np.full((100, 100, 3), 230, np.uint8)
        assert not nucleus_rich(rgb)
        rgb[:10, :60] = (90, 60, 130)
        assert nucleus_rich(rgb)
        rgb[:10, :60] = (90, 200, 130)  # one channel above 70%
        assert not nucleus_rich(rgb)


class TestGradientIsolation:
    def test_masked_out_candidates_get_zero_grad(self, rng):
        model = Scae(ScaeConfig(seed=1))
        for dec in (model.fg_decoder, model.bg_decoder):  # move off the zero init so gradients reach the encoder
            dec.out.weight.data[:] = rng.standard_normal(dec.out.weight.shape) * 0.1
        x = Tensor(rng.random((2, 3, 112, 112)).astype(np.float32))
        recon, enc = model(x)
        F.mse(recon, x).backward()
        g = enc.candidates.grad
        off = np.broadcast_to(enc.mask, g.shape) == 0
        assert np.all(g[off] == 0)
        assert np.abs(g[~off]).sum() > 0

    def test_gradient_independent_of_mask_values_off_site(self, rng):
        # the same active set gives the same gradient regardless of how the
        # inactive candidates are scored
        cand_data = rng.standard_normal((1, 4, 3, 3))
        mask = crosswise_mask(cand_data, 0.7)
        from gigaslide.scae import gate

        grads = []
        for scale in (1.0, 0.1):
            c = cand_data.copy()
            c[:, :, mask[0, 0] == 0] *= scale
            t = Tensor(c, requires_grad=True, dtype=WIDE)
            (gate(t) * mask).sum().backward()
            grads.append(t.grad[:, :, mask[0, 0] == 1])
            assert np.all(t.grad[:, :, mask[0, 0] == 0] == 0)
        np.testing.assert_allclose(grads[0], grads[1])


class TestDecoder:
    def test_zero_init_gives_zero_image(self):
        model = Scae()
        out = model.decode(Tensor(np.zeros((1, 96, 14, 14), np.float32)), Tensor(np.zeros((1, 32, 14, 14), np.float32)))
        assert out.shape == (1, 3, 112, 112)
        np.testing.assert_array_equal(out.data, 0)

    def test_reconstruction_shape(self, rng):
        model = Scae()
        x = Tensor(rng.random((3, 3, 112, 112)).astype(np.float32))
        recon, _ = model(x)
        assert recon.shape == x.shape

    def test_decoder_upsamples_8x(self, rng):
        d = Decoder(8, (8, 4, 4), rng)
        assert d(Tensor(np.zeros((1, 8, 5, 5), np.float32))).shape == (1, 3, 40, 40)


class TestPoolToVector:
    def test_constant_background(self, rng):
        f = Tensor(rng.random((2, 96, 14, 14)))
        b = Tensor(np.full((2, 32, 14, 14), 0.3))
        m = (rng.random((2, 1, 14, 14)) < 0.2).astype(float)
        v = pool_to_vector(f, b, m).data
        assert v.shape == (2, 128)
        np.testing.assert_allclose(v[:, 96:], 0.3)

    def test_single_active_site(self, rng):
        f = rng.random((1, 96, 14, 14))
        m = np.zeros((1, 1, 14, 14))
        m[0, 0, 5, 9] = 1
        v = pool_to_vector(Tensor(f * m), Tensor(rng.random((1, 32, 14, 14))), m).data
        np.testing.assert_allclose(v[0, :96], f[0, :, 5, 9])

    def test_empty_mask_zero_foreground(self, rng):
        v = pool_to_vector(Tensor(np.zeros((1, 96, 4, 4))), Tensor(rng.random((1, 32, 4, 4))), np.zeros((1, 1, 4, 4))).data
        np.testing.assert_array_equal(v[0, :96], 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_gather_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = (rng.random((2, 1, 6, 6)) < 0.3).astype(float)
        m[:, 0, 0, 0] = 1
        f = rng.random((2, 5, 6, 6)) * m
        b = rng.random((2, 3, 6, 6))
        v = pool_to_vector(Tensor(f), Tensor(b), m).data
        for i in range(2):
            sel = m[i, 0] == 1
            np.testing.assert_allclose(v[i, :5], f[i][:, sel].mean(axis=1), atol=1e-6)
            np.testing.assert_allclose(v[i, 5:], b[i].mean(axis=(1, 2)), atol=1e-6)

    @pytest.mark.parametrize("mode", ["separated", "foreground", "background", "mixed"])
    def test_encoding_modes(self, mode, rng):
        model = Scae()
        v = model.embed(Tensor(rng.random((2, 3, 112, 112)).astype(np.float32)), mode)
        assert v.shape == (2, mode_channels(model.config, mode))

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            Scae().embed(Tensor(np.zeros((1, 3, 112, 112), np.float32)), "both")


class TestTraining:
    def test_loss_decreases_below_blind(self, trained, patches):
        _, hist = trained
        assert hist.val_mse[-1] < hist.initial_val_mse
        assert hist.val_mse[-1] < blind_mse(*patches)
        assert all(0 < r < 1 for r in hist.rho)

    def test_activation_rate_tracks_rho(self, trained, patches):
        model, _ = trained
        enc = model.encode(Tensor(patches[1]))
        rate = enc.mask.mean()
        target = 1 - model.rho
        assert abs(rate - target) <= 0.2 * target + 1.0 / 196

    def test_on_emit_sees_crosswise_pairs(self, patches):
        seen = []

        def check(fg, mask, rho):
            seen.append(rho)
            np.testing.assert_array_equal((fg != 0).any(axis=1, keepdims=True), mask.astype(bool))

        train, val = patches
        train_scae(train[:16], val[:8], ScaeTrainConfig(epochs=1), on_emit=check)
        assert len(seen) == 2

    def test_nan_aborts(self, patches):
        train, val = patches
        bad = train[:8].copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ScaeDivergedError, match="epoch 1"):
            train_scae(bad, val[:4], ScaeTrainConfig(epochs=1))

    def test_training_patches_nucleus_rich(self, small_slide):
        grid = sift_patches(small_slide, 256)
        x = sample_training_patches([small_slide], [grid], 256, 30, np.random.default_rng(1))
        rich = ((1 - x) * 255 < 0.7 * 255).all(axis=1).mean(axis=(1, 2)) >= 0.05
        assert len(x) > 0 and rich.mean() >= 0.9


class TestSearch:
    def test_degenerate_range(self, patches):
        train, val = patches
        rho, probes = search_sparsity_rate(train[:8], val[:4], 0.8, 0.8, probe_config=ScaeTrainConfig(epochs=1))
        assert rho == 0.8 and len(probes) == 1

    def test_bad_range(self, patches):
        with pytest.raises(ValueError):
            search_sparsity_rate(patches[0], patches[1], 0.9, 0.5)

    def test_probe_log_and_repeatability(self, patches, caplog):
        train, val = patches[0][:16], patches[1][:8]
        cfg = ScaeTrainConfig(epochs=1, seed=2)
        with caplog.at_level(logging.INFO, logger="gigaslide.scae"):
            a, probes_a = search_sparsity_rate(train, val, 0.6, 0.98, max_probes=4, probe_config=cfg)
        b, probes_b = search_sparsity_rate(train, val, 0.6, 0.98, max_probes=4, probe_config=cfg)
        assert len(probes_a) == 4
        assert [p.rho for p in probes_a[:2]] == [0.6, 0.98]
        assert a in [p.rho for p in probes_a]
        logged = [r.getMessage() for r in caplog.records if "rho probe" in r.getMessage()]
        assert len(logged) == 4
        step = (0.98 - 0.6) / 2 ** (len(probes_a) - 2)
        assert abs(a - b) <= step + 1e-12


class TestEncodeSlide:
    def test_full_grid_shape_and_zeros(self, trained):
        model, _ = trained
        slide = generate_synthetic_slide(SynthConfig(extent=4096, lesion_density=0.05, seed=5))
        grid = sift_patches(slide, 256)
        full = grid.rethreshold(-1)  # every cell kept: crop is the whole slide
        cropped, _ = crop_bounding_box(full)
        emb = encode_slide(slide, model, cropped)
        assert emb.data.shape == (128, 16, 16) and emb.mask.shape == (16, 16)

        cropped, off = crop_bounding_box(grid)
        a = encode_slide(slide, model, cropped)
        b = encode_slide(slide, model, cropped)
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data.shape[1:] == cropped.shape
        assert np.all(a.data[:, a.mask == 0] == 0)
        observed = a.data[:, a.mask == 1]
        assert np.all(observed[96:] > 0) and np.all(observed < 1)
        # kept cells are always nucleus-bearing, so the foreground part is populated
        assert np.all(observed[:96] > 0)
