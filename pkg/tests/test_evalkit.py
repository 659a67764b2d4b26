"""Metric formulas, baselines, expert-weight classification, and t-SNE."""

import math

import numpy as np
import pytest

from pimoe.errors import (
    CalibrationAmbiguous,
    InsufficientData,
    InvalidArgument,
    ShapeError,
    Underdetermined,
)
from pimoe.evalkit import (
    MlpBaseline,
    StageMap,
    build_history_pairs,
    calibrate_from_weights,
    classify_battery,
    compute_metrics,
    conditional_probabilities,
    confidence_table,
    poly_baseline,
    poly_coefficients,
    stage_label_for_soh,
    tsne_embed,
)


def metric_oracle(pred, truth):
    """Scalar-loop reference for all four metrics."""
    n = len(truth)
    se = sum((p - t) ** 2 for p, t in zip(pred, truth))
    rmse = math.sqrt(se / n)
    mape = sum(abs(p - t) / t for p, t in zip(pred, truth)) / n * 100.0
    mae = sum(abs(p - t) for p, t in zip(pred, truth)) / n
    mean_t = sum(truth) / n
    ss_tot = sum((t - mean_t) ** 2 for t in truth)
    r2 = float("nan") if ss_tot == 0 else 1.0 - se / ss_tot
    return rmse, mape, r2, mae


class TestMetrics:
    def test_perfect_prediction(self):
        m = compute_metrics(np.array([5.0, 6.0]), np.array([5.0, 6.0]))
        assert (m.rmse, m.mape_percent, m.r2, m.mae) == (0.0, 0.0, 1.0, 0.0)

    def test_hand_case(self):
        m = compute_metrics(np.array([99.0, 91.0]), np.array([100.0, 90.0]))
        assert m.rmse == pytest.approx(1.0, abs=1e-12)
        assert m.mape_percent == pytest.approx(1.0555555555, abs=1e-4)
        assert m.r2 == pytest.approx(0.96, abs=1e-12)
        assert m.mae == pytest.approx(1.0, abs=1e-12)

    def test_constant_truth_flags_r2(self):
        m = compute_metrics(np.array([1.0, 2.0]), np.array([3.0, 3.0]))
        assert math.isnan(m.r2)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 200))
            truth = rng.uniform(1.0, 100.0, size=n)
            pred = truth + rng.normal(0, 5, size=n)
            m = compute_metrics(pred, truth)
            rmse, mape, r2, mae = metric_oracle(list(pred), list(truth))
            assert m.rmse == pytest.approx(rmse, rel=1e-12)
            assert m.mape_percent == pytest.approx(mape, rel=1e-12)
            assert m.mae == pytest.approx(mae, rel=1e-12)
            if not math.isnan(r2):
                assert m.r2 == pytest.approx(r2, rel=1e-9)

    def test_shape_and_positivity_validation(self):
        with pytest.raises(ShapeError):
            compute_metrics(np.ones(3), np.ones(4))
        with pytest.raises(InvalidArgument):
            compute_metrics(np.ones(2), np.array([1.0, 0.0]))


class TestPolyBaseline:
    def test_exact_on_cubic(self):
        x = np.arange(50, dtype=float)
        coeffs = (2.0, -0.03, 4e-4, -5e-6)
        y = coeffs[0] + coeffs[1] * x + coeffs[2] * x**2 + coeffs[3] * x**3
        forecast = poly_baseline(y, degree=3, window=50, steps=50)
        future = np.arange(50, 100, dtype=float)
        expected = coeffs[0] + coeffs[1] * future + coeffs[2] * future**2 + coeffs[3] * future**3
        np.testing.assert_allclose(forecast, expected, atol=1e-8)

    def test_constant_window(self):
        forecast = poly_baseline(np.full(50, 7.25), degree=3, window=50, steps=20)
        np.testing.assert_allclose(forecast, 7.25, atol=1e-10)

    def test_normal_equation_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            y = rng.random(50) * 3000
            beta = poly_coefficients(y, degree=3)
            # independent normal-equation solve on the same basis definition
            half = 49 / 2.0
            z = (np.arange(50) - half) / half
            v = np.vander(z, 4, increasing=True)
            oracle = np.linalg.solve(v.T @ v, v.T @ y)
            np.testing.assert_allclose(beta, oracle, atol=1e-8)

    def test_underdetermined(self):
        with pytest.raises(Underdetermined):
            poly_baseline(np.ones(3), degree=3, window=3, steps=5)

    def test_window_length_mismatch(self):
        with pytest.raises(InvalidArgument):
            poly_baseline(np.ones(10), degree=3, window=50, steps=5)


class TestMlpBaseline:
    def test_pair_count_enumeration(self):
        seq = np.arange(100, dtype=float)
        x, y = build_history_pairs(seq, window=10, steps=50, stride=1)
        assert x.shape == (41, 10) and y.shape == (41, 50)
        # enumeration oracle over start offsets
        count = sum(1 for k in range(100) if k + 10 + 50 <= 100)
        assert len(x) == count
        np.testing.assert_array_equal(x[0], seq[:10])
        np.testing.assert_array_equal(y[-1], seq[50:100])

    def test_pair_windows_align(self):
        seq = np.arange(70, dtype=float)
        x, y = build_history_pairs(seq, window=10, steps=50)
        for k in range(len(x)):
            np.testing.assert_array_equal(x[k], seq[k : k + 10])
            np.testing.assert_array_equal(y[k], seq[k + 10 : k + 60])

    def test_too_short_sequence_gives_no_pairs(self):
        x, y = build_history_pairs(np.arange(30, dtype=float), window=10, steps=50)
        assert len(x) == 0
        with pytest.raises(InsufficientData):
            MlpBaseline(window=10, steps=50).fit([np.arange(30, dtype=float)])

    def test_zeroed_output_layer_predicts_bias(self):
        mlp = MlpBaseline(window=10, steps=5, seed=0)
        mlp.params["w3"].data[:] = 0.0
        mlp.params["b3"].data[:] = np.arange(5.0)
        out = mlp.predict(np.linspace(1, 2, 10))
        np.testing.assert_array_equal(out, np.arange(5.0))

    def test_learns_linear_continuation(self):
        rng = np.random.default_rng(2)
        seqs = []
        for _ in range(6):
            start = rng.uniform(0.9, 1.0)
            slope = rng.uniform(-0.002, -0.001)
            seqs.append(start + slope * np.arange(120))
        mlp = MlpBaseline(window=10, steps=20, epochs=150, seed=1).fit(seqs)
        test_seq = 0.95 - 0.0015 * np.arange(120)
        pred = mlp.predict(test_seq[:10])
        np.testing.assert_allclose(pred, test_seq[10:30], atol=0.02)


class TestClassification:
    def test_calibration_maps_stages_to_distinct_experts(self):
        weights = np.array(
            [
                [0.9, 0.1, 0.0],
                [0.8, 0.2, 0.0],
                [0.1, 0.8, 0.1],
                [0.0, 0.9, 0.1],
                [0.0, 0.2, 0.8],
                [0.1, 0.0, 0.9],
            ]
        )
        labels = ["early", "early", "mid", "mid", "late", "late"]
        sm = calibrate_from_weights(weights, labels)
        assert sm.stage_to_expert == {"early": 0, "mid": 1, "late": 2}
        assert not sm.ambiguous

    def test_ambiguous_calibration_raises_or_flags(self):
        weights = np.array([[0.9, 0.1], [0.9, 0.1], [0.8, 0.2]])
        labels = ["early", "mid", "late"]
        with pytest.raises(CalibrationAmbiguous):
            calibrate_from_weights(weights, labels)
        sm = calibrate_from_weights(weights, labels, strict=False)
        assert sm.ambiguous

    def test_single_expert_everything_collides(self):
        weights = np.ones((6, 1))
        labels = ["early", "early", "mid", "mid", "late", "late"]
        sm = calibrate_from_weights(weights, labels, strict=False)
        assert sm.stage_to_expert == {"early": 0, "mid": 0, "late": 0}
        assert sm.ambiguous

    def test_order_invariant_calibration(self):
        rng = np.random.default_rng(3)
        weights = rng.random((30, 4))
        labels = np.array(["early", "mid", "late"] * 10)
        sm1 = calibrate_from_weights(weights, labels, strict=False)
        perm = rng.permutation(30)
        sm2 = calibrate_from_weights(weights[perm], labels[perm], strict=False)
        assert sm1.stage_to_expert == sm2.stage_to_expert

    def _stage_map(self):
        return StageMap(
            stage_to_expert={"early": 0, "mid": 2, "late": 4},
            mean_weights=np.zeros((3, 5)),
        )

    def test_argmax_rules(self):
        sm = self._stage_map()
        assert classify_battery(np.array([0.7, 0.1, 0.1, 0.05, 0.05]), sm).label == "Excellent"
        assert classify_battery(np.array([0.0, 0.1, 0.1, 0.2, 0.6]), sm).label == "Scrap"
        assert classify_battery(np.array([0.1, 0.5, 0.2, 0.1, 0.1]), sm).label == "Qualified"

    def test_uniform_weights_tie_to_lowest_index(self):
        sm = self._stage_map()
        decision = classify_battery(np.full(5, 0.2), sm)
        assert decision.dominant_expert == 0
        assert decision.label == "Excellent"

    def test_invariant_under_monotone_transform(self):
        sm = self._stage_map()
        rng = np.random.default_rng(4)
        for _ in range(50):
            w = rng.random(5)
            a = classify_battery(w, sm).label
            b = classify_battery(np.exp(3 * w) + 1.0, sm).label
            assert a == b

    def test_stage_label_thresholds(self):
        assert stage_label_for_soh(0.97) == "early"
        assert stage_label_for_soh(0.85) == "mid"
        assert stage_label_for_soh(0.75) == "late"


class TestConfidenceTable:
    def test_hand_case_96_4(self):
        labels = ["Excellent"] * 27 + ["Qualified"]
        rows = confidence_table({95: labels})
        assert rows[0].total == 28
        assert rows[0].confidence_percent == pytest.approx(96.4, abs=0.05)

    def test_all_correct(self):
        rows = confidence_table({75: ["Scrap"] * 9})
        assert rows[0].confidence_percent == 100.0

    def test_85_bucket_has_no_confidence(self):
        rows = confidence_table({85: ["Excellent", "Qualified", "Scrap"]})
        assert rows[0].confidence_percent is None
        assert rows[0].n_qualified == 1

    def test_counting_oracle(self):
        rng = np.random.default_rng(5)
        names = ["Excellent", "Qualified", "Scrap"]
        buckets = {
            95: [names[i] for i in rng.integers(0, 3, size=40)],
            85: [names[i] for i in rng.integers(0, 3, size=17)],
            75: [names[i] for i in rng.integers(0, 3, size=23)],
        }
        rows = {r.soh_percent: r for r in confidence_table(buckets)}
        for bucket, labels in buckets.items():
            r = rows[bucket]
            assert r.total == len(labels)
            assert r.n_excellent == labels.count("Excellent")
            assert r.n_qualified == labels.count("Qualified")
            assert r.n_scrap == labels.count("Scrap")
        assert rows[95].confidence_percent == pytest.approx(
            100.0 * buckets[95].count("Excellent") / 40
        )
        assert rows[75].confidence_percent == pytest.approx(
            100.0 * buckets[75].count("Scrap") / 23
        )

    def test_empty_bucket_omitted(self):
        rows = confidence_table({95: ["Excellent"], 85: [], 75: []})
        assert [r.soh_percent for r in rows] == [95]


class TestTsne:
    def test_two_point_conditional(self):
        d = np.array([[0.0, 1.0], [1.0, 0.0]])
        p = conditional_probabilities(d, perplexity=1.0)
        assert p[0, 1] == pytest.approx(1.0, abs=1e-9)
        assert p[1, 0] == pytest.approx(1.0, abs=1e-9)
        assert p[0, 0] == 0.0

    def test_conditional_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        x = rng.random((40, 5))
        sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
        p = conditional_probabilities(sq, perplexity=10.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.diag(p) == 0.0)

    def test_perplexity_matches_entropy(self):
        rng = np.random.default_rng(7)
        x = rng.random((60, 4))
        sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
        target = 12.0
        p = conditional_probabilities(sq, perplexity=target)
        for row in p:
            nz = row[row > 0]
            entropy = -np.sum(nz * np.log(nz))
            assert np.exp(entropy) == pytest.approx(target, rel=1e-3)

    def test_too_few_points(self):
        with pytest.raises(InvalidArgument):
            tsne_embed(np.ones((3, 4)))

    def test_perplexity_capped_with_warning(self):
        rng = np.random.default_rng(8)
        with pytest.warns(UserWarning):
            result = tsne_embed(rng.random((12, 3)), perplexity=30.0, iters=20, seed=0)
        assert result.perplexity_used == pytest.approx(11 / 3)

    def test_kl_descends_on_clustered_data(self):
        rng = np.random.default_rng(9)
        a = rng.normal(0.0, 0.05, size=(40, 5)) + np.array([1, 0, 0, 0, 0])
        b = rng.normal(0.0, 0.05, size=(40, 5)) + np.array([0, 0, 0, 0, 1])
        x = np.vstack([a, b])
        result = tsne_embed(x, perplexity=15.0, iters=300, seed=1)
        assert result.final_kl >= 0.0
        assert result.final_kl < result.kl_trace[0]
        assert result.embedding.shape == (80, 2)

    def test_two_clusters_separate(self):
        rng = np.random.default_rng(10)
        a = rng.normal(0.0, 0.03, size=(30, 5)) + np.array([1, 0, 0, 0, 0])
        b = rng.normal(0.0, 0.03, size=(30, 5)) + np.array([0, 0, 0, 0, 1])
        x = np.vstack([a, b])
        result = tsne_embed(x, perplexity=10.0, iters=400, seed=2)
        y = result.embedding
        labels = np.array([0] * 30 + [1] * 30)
        from sklearn.metrics import silhouette_score

        assert silhouette_score(y, labels) > 0.5
