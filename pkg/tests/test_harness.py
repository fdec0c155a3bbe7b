import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gigaslide.dsnet import DSNet, DsnetConfig
from gigaslide.harness import (
    AugmentSpec,
    CorpusConfig,
    DataSpec,
    SlideRecord,
    TrainingConfig,
    TrainingDivergedError,
    Variant,
    apply_augment,
    collate,
    confusion_metrics,
    evaluate,
    load_model,
    localization_scores,
    naive_baseline,
    pairwise_auc,
    pearson,
    plan_corpus,
    roc_auc,
    roc_curve,
    run_ablation_suite,
    sample_augment,
    select_variants,
    train_dsnet,
    transform_cells,
)
from gigaslide.harness.ablation import COMPONENT_VARIANTS, LEVEL_VARIANTS
from gigaslide.harness.corpus import _split_counts
from gigaslide.harness.reports import text_table, to_csv, to_json
from gigaslide.harness.train import evaluate_prediction, predict


def fake_record(rng, sid, label, h=8, w=8, split="train", c=128):
    """Record whose label is a bright block in both streams."""
    mask = (rng.random((h, w)) < 0.8).astype(np.float32)
    mask[0, 0] = 1
    thumb = (rng.random((12, 2 * h, 2 * w)) * 0.2).astype(np.float32)
    emb = (rng.random((c, h, w)) * 0.2).astype(np.float32) * mask
    lesions = []
    if label:
        r, q = rng.integers(1, h - 2), rng.integers(1, w - 2)
        thumb[:, 2 * r : 2 * r + 4, 2 * q : 2 * q + 4] += 0.8
        emb[:, r : r + 2, q : q + 2] += 0.8
        mask[r : r + 2, q : q + 2] = 1
        lesions = [((r + 1) * 256.0, (q + 1) * 256.0, 200.0)]
    embs = {"separated": emb, "mixed": emb.copy(), "foreground": emb[:96].copy(), "background": emb[96:].copy()}
    return SlideRecord(sid, split, "large" if label else "plain", label, thumb, embs, mask, (0, 0), 256, 128, lesions)


def fake_corpus(seed=0, n_train=8, n_val=6):
    rng = np.random.default_rng(seed)
    train = [fake_record(rng, f"t{i}", i % 2, split="train") for i in range(n_train)]
    val = [fake_record(rng, f"v{i}", i % 2, split="val", h=8 + 4 * (i % 2)) for i in range(n_val)]
    return train, val


FAST = dict(epochs=2, batch_size=4, warmup_epochs=1)


class TestRoc:
    def test_perfect_scores(self):
        assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_reversed_scores(self):
        assert roc_auc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]) == 0.0

    def test_all_tied_is_half(self):
        assert roc_auc([0, 1, 0, 1], [0.5] * 4) == 0.5

    def test_shuffled_labels_near_half(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, 4000)
        auc = roc_auc(labels, rng.permutation(labels).astype(float))
        assert abs(auc - 0.5) < 0.05

    def test_single_class_undefined(self):
        assert roc_auc([1, 1, 1], [0.1, 0.5, 0.9]) is None
        with pytest.raises(ValueError):
            roc_curve([0, 0], [0.1, 0.2])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 6)), min_size=2, max_size=50))
    def test_matches_pairwise_oracle(self, pairs):
        labels = [p[0] for p in pairs]
        scores = [p[1] / 6 for p in pairs]  # coarse values force ties
        oracle = pairwise_auc(labels, scores)
        auc = roc_auc(labels, scores)
        if oracle is None:
            assert auc is None
        else:
            assert abs(auc - oracle) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=4, max_size=40), st.integers(0, 2**16))
    def test_curve_is_monotone_staircase(self, scores, seed):
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        labels[:2] = [0, 1]
        pts = roc_curve(labels, scores)
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
        xs, ys = zip(*pts)
        assert all(b >= a for a, b in zip(xs, xs[1:]))
        assert all(b >= a for a, b in zip(ys, ys[1:]))
        assert 0.0 <= roc_auc(labels, scores) <= 1.0


class TestConfusion:
    def test_counts(self):
        c = confusion_metrics([1, 1, 0, 0], [0.9, 0.4, 0.6, 0.1])
        assert (c.tp, c.fn, c.fp, c.tn) == (1, 1, 1, 1)
        assert c.accuracy == 0.5 and c.precision == 0.5 and c.recall == 0.5 and c.f1 == 0.5

    def test_threshold_inclusive(self):
        assert confusion_metrics([1], [0.5]).tp == 1

    def test_no_positive_predictions(self):
        c = confusion_metrics([1, 0], [0.1, 0.2])
        assert c.precision == 0.0 and c.f1 == 0.0

    def test_pearson(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 1, 1], [1, 2, 3]) is None


class TestAugment:
    def arrays(self, rng, h=10, w=12):
        v = rng.random((4, h, w)).astype(np.float32)
        t = np.kron(v[:3], np.ones((2, 2), np.float32))  # T aligned with V
        m = np.ones((h, w), np.float32)
        return t, v, m

    def test_identity(self, rng):
        t, v, m = self.arrays(rng)
        t2, v2, m2 = apply_augment(t, v, m, AugmentSpec())
        assert np.array_equal(t, t2) and np.array_equal(v, v2) and np.array_equal(m, m2)

    def test_double_flip(self, rng):
        t, v, m = self.arrays(rng)
        spec = AugmentSpec(hflip=True)
        t2, v2, m2 = apply_augment(*apply_augment(t, v, m, spec), spec)
        assert np.array_equal(t, t2) and np.array_equal(v, v2)

    def test_ratio_two_over_many_specs(self, rng):
        t, v, m = self.arrays(rng, 13, 9)
        for _ in range(1000):
            spec = sample_augment(rng, m.shape)
            t2, v2, m2 = apply_augment(t, v, m, spec)
            assert t2.shape[1:] == (2 * v2.shape[1], 2 * v2.shape[2])
            assert m2.shape == v2.shape[1:]
            top, bottom, left, right = spec.crop
            assert top + bottom <= 7 and left + right <= 7

    def test_same_transform_on_both(self, rng):
        t, v, m = self.arrays(rng)
        for _ in range(50):
            t2, v2, _ = apply_augment(t, v, m, sample_augment(rng, m.shape))
            assert np.array_equal(t2, np.kron(v2[:3], np.ones((2, 2), np.float32)))

    def test_all_unobserved_crop_skipped(self):
        v = np.zeros((1, 8, 8), np.float32)
        m = np.zeros((8, 8), np.float32)
        m[0, 0] = 1
        t = np.zeros((3, 16, 16), np.float32)
        _, v2, m2 = apply_augment(t, v, m, AugmentSpec(crop=(2, 0, 2, 0)))
        assert m2.sum() == 1 and v2.shape == (1, 8, 8)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(17, 40), st.integers(17, 40), st.integers(0, 2**16))
    def test_interior_lesion_survives(self, h, w, seed):
        rng = np.random.default_rng(seed)
        cell = np.array([[rng.integers(8, h - 8), rng.integers(8, w - 8)]])
        spec = sample_augment(rng, (h, w))
        moved, shape = transform_cells(cell, (h, w), spec)
        assert 0 <= moved[0, 0] < shape[0] and 0 <= moved[0, 1] < shape[1]
        # the cell really lands where the array value goes
        grid = np.zeros((1, h, w), np.float32)
        grid[0, cell[0, 0], cell[0, 1]] = 1
        _, out, _ = apply_augment(np.zeros((1, 2 * h, 2 * w)), grid, np.ones((h, w)), spec)
        assert out[0, moved[0, 0], moved[0, 1]] == 1


class TestSchedule:
    def test_values(self):
        s = TrainingConfig().schedule(steps_per_epoch=25)
        assert s.lr(0, 0) == pytest.approx(1e-6)
        assert s.lr(5, 0) == pytest.approx(1e-4)
        assert s.lr(30, 0) == pytest.approx(2e-5)
        assert s.lr(60, 0) == pytest.approx(4e-6)

    def test_warmup_monotone(self):
        s = TrainingConfig().schedule(steps_per_epoch=4)
        lrs = [s.lr(e, k) for e in range(5) for k in range(4)]
        assert all(b > a for a, b in zip(lrs, lrs[1:]))

    def test_invariants(self):
        with pytest.raises(ValueError):
            TrainingConfig(floor_lr=1e-3, peak_lr=1e-4)
        with pytest.raises(ValueError):
            TrainingConfig(decay_factor=1.0)


class TestCollate:
    def test_pads_to_batch_max(self, rng):
        recs = [fake_record(rng, "a", 0, 6, 10), fake_record(rng, "b", 1, 11, 7)]
        t, v, m = collate(recs, DataSpec())
        assert v.shape == (2, 128, 12, 12) and t.shape == (2, 9, 24, 24) and m.shape == (2, 1, 12, 12)
        assert m[0, 0, 6:].sum() == 0 and m[1, 0, :, 7:].sum() == 0

    def test_levels_slice(self, rng):
        t, _, _ = collate([fake_record(rng, "a", 0)], DataSpec(levels=2))
        assert t.shape[1] == 6


class TestCorpusPlan:
    def test_counts_and_balance(self):
        plans = plan_corpus(CorpusConfig())
        train = [p for p in plans if p.split == "train"]
        val = [p for p in plans if p.split == "val"]
        assert len(train) == 200 and len(val) == 50
        assert sum(p.label for p in train) == 100 and sum(p.label for p in val) == 25

    def test_deterministic(self):
        a = [(p.slide_id, p.kind, p.synth.seed) for p in plan_corpus(CorpusConfig(seed=5))]
        b = [(p.slide_id, p.kind, p.synth.seed) for p in plan_corpus(CorpusConfig(seed=5))]
        assert a == b

    def test_split_counts_sum(self):
        assert sum(_split_counts(25, [0.3, 0.7])) == 25

    def test_record_roundtrip(self, rng, tmp_path):
        rec = fake_record(rng, "x", 1)
        rec.save(tmp_path / "x.rec")
        back = SlideRecord.load(tmp_path / "x.rec")
        assert back.slide_id == "x" and back.label == 1 and back.lesions == rec.lesions
        assert np.array_equal(back.thumbnail, rec.thumbnail)
        assert set(back.embeddings) == set(rec.embeddings)

    def test_lesion_cells_small_lesion_claims_centre(self, rng):
        rec = fake_record(rng, "x", 0)
        rec.lesions = [(300.0, 700.0, 10.0)]
        cells = rec.lesion_cells((16, 16))
        assert cells.sum() == 1 and cells[2, 5]


class TestTraining:
    def test_history_and_checkpoint(self, tmp_path):
        train, val = fake_corpus()
        res = train_dsnet(DSNet(), train, val, TrainingConfig(**FAST), checkpoint_path=tmp_path / "m.ckpt")
        assert len(res.history) == 2
        assert {"epoch", "lr", "train_loss", "val_loss", "val_auc"} <= set(res.history[0])
        model, meta = load_model(tmp_path / "m.ckpt")
        assert meta["epoch"] == res.best_epoch

    def test_best_checkpoint_has_max_auc(self, tmp_path):
        train, val = fake_corpus(1)
        res = train_dsnet(DSNet(), train, val, TrainingConfig(epochs=4, batch_size=4, warmup_epochs=1, peak_lr=1e-3),
                          checkpoint_path=tmp_path / "m.ckpt")
        aucs = [h["val_auc"] for h in res.history]
        assert res.best_auc == max(aucs)
        assert aucs.index(max(aucs)) == res.best_epoch
        model, _ = load_model(tmp_path / "m.ckpt")
        assert evaluate(model, val).metrics["auc"] == pytest.approx(max(aucs))
        assert evaluate(res.model, val).metrics["auc"] == pytest.approx(max(aucs))

    def test_deterministic(self):
        train, val = fake_corpus(2)
        a = train_dsnet(DSNet(DsnetConfig(seed=3)), train, val, TrainingConfig(seed=3, **FAST))
        b = train_dsnet(DSNet(DsnetConfig(seed=3)), train, val, TrainingConfig(seed=3, **FAST))
        assert a.history == b.history
        ra, rb = evaluate(a.model, val), evaluate(b.model, val)
        assert to_json(ra.as_dict()) == to_json(rb.as_dict())

    def test_single_sample_overfits(self):
        rng = np.random.default_rng(4)
        rec = fake_record(rng, "only", 1)
        cfg = TrainingConfig(epochs=60, batch_size=1, warmup_epochs=1, peak_lr=1e-3, augment=False, weight_decay=0.0)
        res = train_dsnet(DSNet(), [rec], [rec], cfg)
        assert res.history[-1]["train_loss"] < 0.01

    def test_nan_aborts_and_keeps_checkpoint(self, tmp_path):
        train, val = fake_corpus(3)
        model = DSNet()

        def poison(row):
            model.fc2.weight.data[...] = np.nan

        with pytest.raises(TrainingDivergedError, match="last good checkpoint"):
            train_dsnet(model, train, val, TrainingConfig(**FAST), checkpoint_path=tmp_path / "m.ckpt",
                        epoch_callback=poison)
        kept, meta = load_model(tmp_path / "m.ckpt")
        assert meta["epoch"] == 0
        assert all(np.isfinite(p.data).all() for p in kept.parameters())


class TestEvaluate:
    def test_report_fields(self):
        train, val = fake_corpus()
        report = evaluate(DSNet(), val)
        e = report.entries[0]
        assert set(e) == {"slide_id", "label", "score", "stream_score", "pixel_count"}
        assert e["pixel_count"] == 8 * 8 * 256 * 256
        assert 0 < e["stream_score"] < 1
        assert report.metrics["auc_defined"]
        assert report.roc[0] == [0.0, 0.0] or report.roc[0] == (0.0, 0.0)

    def test_single_class(self):
        rng = np.random.default_rng(0)
        recs = [fake_record(rng, f"p{i}", 1) for i in range(3)]
        report = evaluate(DSNet(), recs)
        assert report.metrics["auc"] is None and not report.metrics["auc_defined"] and report.roc == []

    def test_pearson_on_stream_scores(self):
        _, val = fake_corpus()
        pred = predict(DSNet(), val, DataSpec())
        r = evaluate_prediction(pred).metrics["pearson_s_pixels"]
        assert r is None or -1 <= r <= 1

    def test_json_bytes_stable(self):
        _, val = fake_corpus()
        m = DSNet()
        assert to_json(evaluate(m, val).as_dict()) == to_json(evaluate(m, val).as_dict())


class TestAblation:
    def test_groups(self):
        names = [v.name for v in select_variants(["headline"])]
        assert names == ["full", "w/o embedding stream", "w/o thumbnail stream", "naive"]
        assert len(select_variants(["all"])) == 9 + 4 + 4 + 1
        with pytest.raises(ValueError):
            select_variants(["nope"])

    def test_reference_rows(self):
        assert COMPONENT_VARIANTS[0].reference and COMPONENT_VARIANTS[0].name == "full"
        assert [v.reference for v in LEVEL_VARIANTS] == [False, False, True, False]

    def test_encoding_variant_width(self):
        assert Variant("encoding", "fg", mode="foreground").build().config.embed_channels == 96

    def test_suite_rows(self):
        train, val = fake_corpus()
        variants = select_variants(["headline"]) + list(LEVEL_VARIANTS[:1]) + [LEVEL_VARIANTS[2]]
        res = run_ablation_suite(train, val, variants, TrainingConfig(epochs=1, batch_size=4, warmup_epochs=1))
        rows = res.as_rows()
        assert len(rows) == 6
        full = res.row("components", "full")
        assert full.reference and full.params == DSNet().num_parameters()
        assert res.row("levels", "{0,1,2}").compression_ratio == pytest.approx(517, abs=0.5)
        assert res.row("levels", "{0,1,2}").auc == full.auc  # identical variant shares the run
        assert res.row("baseline", "naive").params < full.params
        assert "levels" in to_csv(rows)

    def test_naive_baseline(self):
        train, val = fake_corpus()
        report, params, res = naive_baseline(train, val, TrainingConfig(**FAST))
        assert params > 0 and report.metrics["n"] == len(val)
        assert [e["slide_id"] for e in report.entries] == [r.slide_id for r in val]
        assert all(e["stream_score"] is None for e in report.entries)


class TestReports:
    def test_json_canonical(self):
        a = to_json({"b": np.float32(0.1), "a": [np.int64(2), None, float("nan")]})
        assert json.loads(a) == {"a": [2, None, None], "b": float(np.float32(0.1))}
        assert a.index('"a"') < a.index('"b"')

    def test_text_table(self):
        out = text_table([{"name": "x", "auc": 0.5}, {"name": "yy", "auc": None}], title="t")
        lines = out.splitlines()
        assert lines[0] == "t" and "0.5000" in out and "n/a" in out


class TestLocalization:
    def test_entries_for_positives(self):
        _, val = fake_corpus()
        entries = localization_scores(DSNet(), val)
        assert len(entries) == sum(r.label for r in val)
        for e in entries:
            assert 0 <= e.inside <= 1 and 0 <= e.outside <= 1
