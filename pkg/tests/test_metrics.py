import csv
import json

import numpy as np
import pytest

import oracles
from hegl.data import DatasetSpec, generate_synthetic
from hegl.metrics import (
    DEFAULT_SIGMAS,
    Confusion,
    GapReport,
    MetricReport,
    UndefinedMetricError,
    attention_overlap,
    attention_similarity,
    auc,
    confusion_metrics,
    evaluate,
    noise_sweep,
    report_from_scores,
    write_sweep_csv,
)


class BrightnessModel:
    """Scores each class by mean brightness inside a fixed window (noise-sensitive)."""

    def __init__(self, num_classes=4):
        self.num_classes = num_classes
        self.calls = 0

    def predict_proba(self, images):
        self.calls += 1
        images = np.asarray(images)
        cols = [images[:, 4 * k:4 * k + 12, 8:24].mean(axis=(1, 2)) for k in range(self.num_classes)]
        return 1.0 / (1.0 + np.exp(-20 * (np.stack(cols, 1) - 0.4)))


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(DatasetSpec(n_samples=80, seed=11))


class TestAUC:
    def test_examples(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
        assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
        got = auc([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0])
        assert oracles.auc_pairs_oracle([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0]) == oracles.AUC_EXAMPLE
        assert abs(got - float(oracles.AUC_EXAMPLE)) <= 1e-12

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            # coarse scores so ties are common
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))
            ref = float(oracles.auc_pairs_oracle(scores.tolist(), labels.tolist()))
            assert abs(auc(scores, labels) - ref) <= 1e-12

    def test_rank_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            scores = rng.standard_normal(30)
            labels = rng.integers(0, 2, 30)
            labels[:2] = [0, 1]
            base = auc(scores, labels)
            assert auc(np.exp(scores), labels) == base
            assert auc(3.0 * scores + 7.0, labels) == base
            assert auc(np.argsort(np.argsort(scores)), labels) == base

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1])


class TestConfusion:
    def test_closed_form(self):
        preds = [1, 1, 1, 0, 0, 0]
        labels = [1, 1, 0, 1, 0, 0]
        f1, mcc = confusion_metrics(preds, labels)
        ref_f1, ref_mcc = oracles.confusion_oracle(preds, labels)
        assert ref_f1 == oracles.F1_EXAMPLE
        assert abs(f1 - float(oracles.F1_EXAMPLE)) <= 1e-12
        assert abs(mcc - float(oracles.MCC_EXAMPLE)) <= 1e-12
        assert abs(ref_mcc - float(oracles.MCC_EXAMPLE)) <= 1e-12

    def test_perfect(self):
        assert confusion_metrics([1, 0, 1], [1, 0, 1]) == (1.0, 1.0)

    def test_degenerate_convention(self):
        c = Confusion.from_predictions([1, 1, 1], [1, 1, 1])
        assert c.f1 == 1.0 and c.mcc == 0.0 and c.mcc_degenerate
        assert confusion_metrics([0, 0], [0, 0]) == (0.0, 0.0)

    def test_mcc_flip_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = rng.integers(0, 2, 20)
            y = rng.integers(0, 2, 20)
            assert confusion_metrics(p, y)[1] == confusion_metrics(1 - p, 1 - y)[1]

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = rng.integers(0, 2, 15)
            y = rng.integers(0, 2, 15)
            f1, mcc = confusion_metrics(p, y)
            rf1, rmcc = oracles.confusion_oracle(p.tolist(), y.tolist())
            assert abs(f1 - float(rf1)) <= 1e-12 and abs(mcc - rmcc) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_metrics([1, 0], [1])


class TestReports:
    def test_macro_is_mean(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 2, (40, 4))
        rep = report_from_scores(rng.random((40, 4)), labels)
        assert abs(rep.auc - np.mean([c.auc for c in rep.per_class])) <= 1e-12
        assert abs(rep.f1 - np.mean([c.f1 for c in rep.per_class])) <= 1e-12
        assert abs(rep.mcc - np.mean([c.mcc for c in rep.per_class])) <= 1e-12

    def test_saturated_logits(self):
        labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
        probs = 1 / (1 + np.exp(-np.where(labels == 1, 20.0, -20.0)))
        rep = report_from_scores(probs, labels)
        assert all(c.f1 == 1.0 for c in rep.per_class)

    def test_single_class_excluded_with_note(self):
        labels = np.array([[1, 0], [1, 1], [1, 0]])
        rep = report_from_scores(np.random.default_rng(0).random((3, 2)), labels, class_names=["a", "b"])
        assert rep.per_class[0].auc is None
        assert rep.auc == rep.per_class[1].auc
        assert any("a: auc undefined" in n for n in rep.notes)

    def test_serialisation(self, tmp_path):
        rng = np.random.default_rng(5)
        rep = report_from_scores(rng.random((30, 3)), rng.integers(0, 2, (30, 3)))
        assert MetricReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep
        rep.write_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0][:4] == ["class", "auc", "f1", "mcc"] and len(rows) == 5
        assert rows[-1][0] == "macro" and float(rows[-1][1]) == rep.auc
        rep.write_json(tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())["auc"] == rep.auc

    def test_gap_exact(self):
        rng = np.random.default_rng(6)
        y = rng.integers(0, 2, (30, 3))
        val = report_from_scores(rng.random((30, 3)), y)
        test = report_from_scores(rng.random((30, 3)), y)
        gap = GapReport.between(val, test)
        assert gap.auc_gap == val.auc - test.auc
        assert gap.f1_gap == val.f1 - test.f1 and gap.mcc_gap == val.mcc - test.mcc

    def test_evaluate_deterministic(self, dataset):
        model = BrightnessModel()
        assert evaluate(model, dataset) == evaluate(model, dataset)

    def test_evaluate_empty(self, dataset):
        with pytest.raises(ValueError):
            evaluate(BrightnessModel(), dataset.subset([]))


class TestAttentionOverlap:
    def test_proportional_attention_has_no_fp(self):
        m = np.zeros((1, 1, 4, 4))
        m[0, 0, 1:3, 1:3] = 1
        rep = attention_overlap(m / m.sum(), m)
        assert rep.fp_mass == 0.0

    def test_uniform_attention(self):
        m = np.zeros((1, 2, 4, 4))
        m[0, 0, :1] = 1      # p = 1/4
        m[0, 1, :2, :2] = 1  # p = 1/4
        rep = attention_overlap(np.full(m.shape, 1 / 16), m)
        assert rep.fp_mass == pytest.approx(0.75, abs=1e-15)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(7)
        a = rng.random((5, 3, 4, 4))
        a /= a.sum(axis=(-2, -1), keepdims=True)
        m = (rng.random((5, 3, 4, 4)) < 0.4).astype(float)
        valid = m.sum(axis=(-2, -1)) > 0
        dices, fps = [], []
        for i in range(5):
            for k in range(3):
                if valid[i, k]:
                    av, mv = a[i, k].ravel().tolist(), m[i, k].ravel().tolist()
                    inter = sum(x * y for x, y in zip(av, mv))
                    dices.append(2 * inter / (sum(av) + sum(mv)))
                    fps.append(sum(x * (1 - y) for x, y in zip(av, mv)))
        rep = attention_overlap(a, m)
        assert abs(rep.dice - np.mean(dices)) <= 1e-12
        assert abs(rep.fp_mass - np.mean(fps)) <= 1e-12
        assert rep.n_pairs == len(dices)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            attention_overlap(np.ones((1, 2, 4, 4)), np.ones((1, 2, 2, 2)))

    def test_similarity_matches_oracle(self):
        rng = np.random.default_rng(8)
        a = rng.random((4, 3, 2, 2))
        ref = np.mean([oracles.dal_oracle([m.ravel().tolist() for m in a[i]]) for i in range(4)])
        assert attention_similarity(a) == pytest.approx(ref, abs=1e-12)


class TestNoiseSweep:
    def test_zero_row_equals_evaluate(self, dataset):
        model = BrightnessModel()
        rows = noise_sweep(model, dataset, [0.0], seed=3)
        assert rows[0][1] == evaluate(model, dataset)

    def test_default_sigmas(self):
        assert DEFAULT_SIGMAS == (0.0, 0.03, 0.05, 0.1)

    def test_deterministic_and_csv(self, dataset, tmp_path):
        model = BrightnessModel()
        a = noise_sweep(model, dataset, seed=5)
        b = noise_sweep(model, dataset, seed=5)
        assert a == b and [s for s, _ in a] == list(DEFAULT_SIGMAS)
        write_sweep_csv(a, tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0][:4] == ["sigma", "auc", "f1", "mcc"] and len(rows) == 5

    def test_empty_sigmas(self, dataset):
        with pytest.raises(ValueError):
            noise_sweep(BrightnessModel(), dataset, [])
