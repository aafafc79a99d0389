"""Metric correctness against independent brute-force oracles."""

import json
import math

import numpy as np
import pytest
from scipy import stats

from probe import evaluation as ev
from probe.errors import DataError


# -- oracles (kept deliberately naive and separate from the implementations) --

def oracle_confusion(labels, preds):
    tp = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 1)
    fp = sum(1 for y, p in zip(labels, preds) if y == 0 and p == 1)
    tn = sum(1 for y, p in zip(labels, preds) if y == 0 and p == 0)
    fn = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 0)
    acc = (tp + tn) / len(labels)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = 0.0 if denom == 0 else (tp * tn - fp * fn) / math.sqrt(denom)
    f1 = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return acc, mcc, f1


def oracle_ece_brier(probs, labels, n_bins):
    n = len(probs)
    ece = 0.0
    for k in range(n_bins):
        members = [(p, y) for p, y in zip(probs, labels)
                   if (k / n_bins <= p < (k + 1) / n_bins)
                   or (k == n_bins - 1 and p == 1.0)]
        if not members:
            continue
        mean_p = sum(p for p, _ in members) / len(members)
        frac = sum(y for _, y in members) / len(members)
        ece += len(members) / n * abs(mean_p - frac)
    brier = sum((p - y) ** 2 for p, y in zip(probs, labels)) / n
    return ece, brier


def random_fixture(rng, n=None):
    n = n or int(rng.integers(2, 51))
    p1 = rng.random(n)
    probs = np.stack([1 - p1, p1], axis=1)
    labels = rng.integers(0, 2, size=n)
    errors = rng.random(n) * 10
    return probs, labels, errors


class TestConfusionMetrics:
    def test_perfect(self):
        m = ev.confusion_metrics([0, 1, 1, 0], [0, 1, 1, 0])
        assert (m["accuracy"], m["mcc"], m["f1"]) == (1.0, 1.0, 1.0)

    def test_hand_computed_example(self):
        # tp=2, fp=1, tn=3, fn=1
        labels = [1, 1, 1, 0, 0, 0, 0]
        preds = [1, 1, 0, 1, 0, 0, 0]
        m = ev.confusion_metrics(labels, preds)
        assert m["accuracy"] == pytest.approx(5 / 7)
        assert m["mcc"] == pytest.approx(5 / 12)
        assert m["f1"] == pytest.approx(2 / 3)
        assert (m["counts"].tp, m["counts"].fp, m["counts"].tn, m["counts"].fn) \
            == (2, 1, 3, 1)

    def test_degenerate_all_negative(self):
        m = ev.confusion_metrics([0, 1, 0, 1], [0, 0, 0, 0])
        assert m["mcc"] == 0.0
        assert m["f1"] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            ev.confusion_metrics([0, 1], [0])


class TestSelectiveCurve:
    def test_coverage_one_at_half(self, rng):
        probs, labels, errors = random_fixture(rng, 30)
        points = ev.selective_curve(probs, labels, errors, cutoffs=[0.5])
        assert points[0].coverage == 1.0

    def test_degenerate_probs(self):
        probs = np.tile([1.0, 0.0], (5, 1))
        labels = np.zeros(5, dtype=int)
        errors = np.ones(5)
        points = ev.selective_curve(probs, labels, errors, cutoffs=[0.5, 0.9])
        for p in points:
            assert p.coverage == 1.0
            assert p.accuracy == 1.0
            assert p.mean_err_unreliable is None
            assert p.note is not None

    def test_empty_coverage_flagged(self, rng):
        probs = np.tile([0.55, 0.45], (4, 1))
        points = ev.selective_curve(probs, [0, 1, 0, 1], np.ones(4), cutoffs=[0.99])
        assert points[0].coverage == 0.0
        assert points[0].accuracy is None
        assert points[0].note is not None

    def test_matches_brute_force_oracle(self, rng):
        probs, labels, errors = random_fixture(rng, 200)
        cutoffs = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]
        points = ev.selective_curve(probs, labels, errors, cutoffs)
        for point in points:
            covered = [i for i in range(200) if max(probs[i]) >= point.cutoff]
            assert point.coverage == pytest.approx(len(covered) / 200, abs=1e-12)
            if not covered:
                continue
            preds = [int(probs[i, 1] > probs[i, 0]) for i in covered]
            acc, mcc, f1 = oracle_confusion([labels[i] for i in covered], preds)
            assert point.accuracy == pytest.approx(acc, abs=1e-12)
            assert point.mcc == pytest.approx(mcc, abs=1e-12)
            assert point.f1 == pytest.approx(f1, abs=1e-12)
            rel = [abs(errors[i]) for i, p in zip(covered, preds) if p == 0]
            unrel = [abs(errors[i]) for i, p in zip(covered, preds) if p == 1]
            if rel:
                assert point.mean_err_reliable == pytest.approx(
                    sum(rel) / len(rel), abs=1e-12)
            if unrel:
                assert point.mean_err_unreliable == pytest.approx(
                    sum(unrel) / len(unrel), abs=1e-12)

    def test_half_cutoff_reproduces_confusion_metrics(self, rng):
        probs, labels, errors = random_fixture(rng, 64)
        point = ev.selective_curve(probs, labels, errors, cutoffs=[0.5])[0]
        m = ev.confusion_metrics(labels, probs.argmax(axis=1))
        assert point.accuracy == m["accuracy"]
        assert point.mcc == m["mcc"]
        assert point.f1 == m["f1"]


class TestErrorBinnedAccuracy:
    def test_bin_occupancy_differs_by_at_most_one(self, rng):
        probs, labels, errors = random_fixture(rng, 103)
        bins = ev.error_binned_accuracy(probs, labels, errors, n_bins=10)
        counts = [b.count for b in bins]
        assert max(counts) - min(counts) <= 1
        assert sum(counts) == 103

    def test_weighted_bin_accuracy_equals_overall(self, rng):
        probs, labels, errors = random_fixture(rng, 60)
        bins = ev.error_binned_accuracy(probs, labels, errors, n_bins=6)
        overall = ev.confusion_metrics(labels, probs.argmax(axis=1))["accuracy"]
        weighted = sum(b.accuracy * b.count for b in bins) / 60
        assert weighted == pytest.approx(overall, abs=1e-12)

    def test_buffer_region_flags_boundary_band(self, rng):
        # construct: accurate away from the boundary, coin-flip inside it
        n = 500
        errors = np.linspace(0, 10, n)
        boundary = 5.0
        labels = (errors >= boundary).astype(int)
        preds = labels.copy()
        band = (errors > 4.0) & (errors < 6.0)
        flips = rng.random(n) < 0.5
        preds[band & flips] = 1 - preds[band & flips]
        p1 = np.where(preds == 1, 0.9, 0.1)
        probs = np.stack([1 - p1, p1], axis=1)
        bins = ev.error_binned_accuracy(probs, labels, errors, n_bins=10)
        for b in bins:
            if b.hi < 3.5 or b.lo > 6.5:
                assert not b.buffer
        assert any(b.buffer for b in bins if b.lo < 6.0 and b.hi > 4.0)

    def test_fewer_samples_than_bins_warns(self, rng):
        probs, labels, errors = random_fixture(rng, 5)
        with pytest.warns(UserWarning):
            bins = ev.error_binned_accuracy(probs, labels, errors, n_bins=50)
        assert len(bins) == 5


class TestCalibration:
    def test_perfect_predictions(self):
        out = ev.calibration([1.0, 0.0, 1.0, 0.0], [1, 0, 1, 0])
        assert out["ece"] == 0.0 and out["brier"] == 0.0

    def test_uniform_half(self):
        out = ev.calibration([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert out["ece"] == pytest.approx(0.0, abs=1e-12)
        assert out["brier"] == pytest.approx(0.25)

    def test_matches_brute_force(self, rng):
        p = rng.random(300)
        y = rng.integers(0, 2, size=300)
        out = ev.calibration(p, y, n_bins=10)
        ece, brier = oracle_ece_brier(list(p), list(y), 10)
        assert out["ece"] == pytest.approx(ece, abs=1e-12)
        assert out["brier"] == pytest.approx(brier, abs=1e-12)

    def test_bins_partition_and_count(self, rng):
        p = rng.random(97)
        y = rng.integers(0, 2, size=97)
        out = ev.calibration(p, y, n_bins=10)
        assert sum(b.count for b in out["bins"]) == 97
        assert out["bins"][0].lo == 0.0 and out["bins"][-1].hi == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            ev.calibration([1.2], [1])


class TestSpearman:
    def test_hand_example(self):
        # ranks (1,2,3) vs (3,1,2): rho = -0.5
        assert ev.spearman_rho([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) \
            == pytest.approx(-0.5, abs=1e-12)

    def test_zero_variance_is_none(self):
        assert ev.spearman_rho([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None

    def test_matches_scipy_with_ties(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 40))
            a = rng.integers(0, 6, size=n).astype(float)  # plenty of ties
            b = rng.integers(0, 6, size=n).astype(float)
            ours = ev.spearman_rho(a, b)
            ref = stats.spearmanr(a, b).statistic
            if ours is None:
                assert np.isnan(ref)
            else:
                assert ours == pytest.approx(ref, abs=1e-12)


class TestEnsembleBaseline:
    def test_identical_members_undefined_rho(self):
        preds = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
        ens = ev.EnsembleInput(predictions=preds, n_atoms=np.array([1, 1, 1]))
        out = ev.ensemble_baseline(ens, [0.1, 0.2, 0.3], [0, 0, 1])
        assert out["spearman_rho"] is None
        assert "undefined" in out["spearman_note"]

    def test_monotone_sigma_gives_rho_one(self, rng):
        n = 50
        errors = rng.random(n) * 4
        base = rng.normal(size=n)
        k = 4
        # spread members so that the sample std equals the target exactly
        offsets = np.array([-1.5, -0.5, 0.5, 1.5])
        offsets /= np.std(offsets, ddof=1)
        preds = base[None, :] + offsets[:, None] * errors[None, :]
        n_atoms = np.ones(n, dtype=int)
        ens = ev.EnsembleInput(predictions=preds, n_atoms=n_atoms)
        labels = (errors >= np.median(errors)).astype(int)
        out = ev.ensemble_baseline(ens, errors, labels)
        np.testing.assert_allclose(out["scaled_sigma"], errors, rtol=1e-12)
        assert out["spearman_rho"] == pytest.approx(1.0, abs=1e-12)
        # the median classifier is then the median split itself
        oracle_preds = (errors >= np.median(errors)).astype(int)
        acc, _, _ = oracle_confusion(labels, oracle_preds)
        assert out["median_classifier"]["accuracy"] == pytest.approx(acc, abs=1e-12)

    def test_sample_std_uses_k_minus_one(self):
        preds = np.array([[0.0, 0.0], [2.0, 4.0]])
        ens = ev.EnsembleInput(predictions=preds, n_atoms=np.array([1, 4]))
        out = ev.ensemble_baseline(ens, [1.0, 2.0], [0, 1])
        np.testing.assert_allclose(
            out["scaled_sigma"],
            [np.std([0, 2], ddof=1), np.std([0, 4], ddof=1) / 2.0])

    def test_single_member_rejected(self):
        ens = ev.EnsembleInput(predictions=np.ones((1, 3)), n_atoms=np.ones(3))
        with pytest.raises(DataError):
            ev.ensemble_baseline(ens, [1, 2, 3], [0, 1, 0])


class TestMajorityBaseline:
    def test_sixty_forty(self):
        labels = [0] * 6 + [1] * 4
        assert ev.majority_baseline(labels) == pytest.approx(0.6)

    def test_balanced(self):
        assert ev.majority_baseline([0, 1, 0, 1]) == 0.5

    def test_single_class(self):
        assert ev.majority_baseline([1, 1, 1]) == 1.0


class TestReport:
    def test_empty_cutoffs_still_valid_json(self, rng, tmp_path):
        probs, labels, errors = random_fixture(rng, 40)
        report = ev.build_report(probs, labels, errors, cutoffs=())
        paths = ev.emit_report(report, tmp_path)
        parsed = json.loads(paths["json"].read_text())
        assert parsed["selective"] == []

    def test_json_round_trips_identically(self, rng, tmp_path):
        probs, labels, errors = random_fixture(rng, 40)
        report = ev.build_report(probs, labels, errors)
        paths = ev.emit_report(report, tmp_path)
        text = paths["json"].read_text()
        assert json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n" == text

    def test_table_column_order(self, rng, tmp_path):
        probs, labels, errors = random_fixture(rng, 40)
        report = ev.build_report(probs, labels, errors)
        table = ev.format_table(report["selective"])
        header = table.splitlines()[0]
        cols = header.split()
        assert cols == ["Cutoff", "Coverage", "Acc.", "MCC", "F1", "e_rel", "e_unrel"]

    def test_csv_outputs_exist(self, rng, tmp_path):
        probs, labels, errors = random_fixture(rng, 40)
        report = ev.build_report(probs, labels, errors)
        paths = ev.emit_report(report, tmp_path)
        for key in ("selective_csv", "error_bins_csv", "calibration_csv"):
            assert paths[key].exists()
            assert paths[key].read_text().startswith("# probe ")
