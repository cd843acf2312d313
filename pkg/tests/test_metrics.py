import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from heartbeit.errors import MetricError
from heartbeit.evaluation import metrics as M
from heartbeit.evaluation.metrics import ScoredSet, auprc, auroc, bootstrap_ci, evaluate

from oracles import brute_auprc, brute_auroc


def random_sets(n_sets, max_n, seed):
    """Random small scored sets on a coarse score grid so ties are common."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_sets:
        n = int(rng.integers(2, max_n + 1))
        y = rng.integers(0, 2, n)
        if 0 < y.sum() < n:
            out.append((rng.integers(0, 5, n) / 4.0, y))
    return out


class TestAgainstBruteForce:
    def test_auroc(self):
        for s, y in random_sets(1000, 12, 0):
            assert auroc(ScoredSet(s, y)) == float(brute_auroc(list(s), list(y)))

    def test_auprc(self):
        for s, y in random_sets(1000, 12, 1):
            assert auprc(ScoredSet(s, y)) == float(brute_auprc(list(s), list(y)))

    def test_sklearn_agrees_without_ties(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            s = rng.random(200)
            y = rng.integers(0, 2, 200)
            assert auroc(ScoredSet(s, y)) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
            assert auprc(ScoredSet(s, y)) == pytest.approx(average_precision_score(y, s), abs=1e-12)

    def test_sklearn_agrees_on_auroc_with_ties(self):
        for s, y in random_sets(200, 30, 3):
            assert auroc(ScoredSet(s, y)) == pytest.approx(roc_auc_score(y, s), abs=1e-12)


class TestWorkedExamples:
    def test_reference_example(self):
        assert auroc(ScoredSet([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75

    def test_one_inverted_pair(self):
        # pairs: (0.8>0.6) (0.8>0.4) (0.5<0.6) (0.5>0.4) -> 3/4
        s = ScoredSet([0.8, 0.5, 0.6, 0.4], [1, 1, 0, 0])
        assert auroc(s) == 0.75
        # ranked: +, -, +, - -> precision 1 at the first hit, 2/3 at the second
        assert auprc(s) == 5 / 6

    def test_all_tied(self):
        s = ScoredSet([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0])
        assert auroc(s) == 0.5
        assert auprc(s) == 0.5

    def test_perfect_and_reversed(self):
        assert auroc(ScoredSet([0.9, 0.8, 0.1], [1, 1, 0])) == 1.0
        assert auroc(ScoredSet([0.1, 0.2, 0.9], [1, 1, 0])) == 0.0
        assert auprc(ScoredSet([0.9, 0.8, 0.1], [1, 1, 0])) == 1.0

    def test_single_class_is_an_error(self):
        with pytest.raises(MetricError):
            auroc(ScoredSet([0.1, 0.2], [1, 1]))
        with pytest.raises(MetricError):
            auprc(ScoredSet([0.1, 0.2], [0, 0]))

    def test_input_validation(self):
        with pytest.raises(MetricError):
            ScoredSet([0.1, np.nan], [0, 1])
        with pytest.raises(MetricError):
            ScoredSet([0.1, 0.2], [0, 2])
        with pytest.raises(MetricError):
            ScoredSet([0.1, 0.2, 0.3], [0, 1])


scored = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 6).map(lambda k: k / 6.0), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )
).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


class TestProperties:
    @given(scored)
    @settings(max_examples=200, deadline=None)
    def test_bounds_and_complement(self, data):
        s, y = np.array(data[0]), np.array(data[1])
        a = auroc(ScoredSet(s, y))
        assert 0.0 <= a <= 1.0
        assert auroc(ScoredSet(-s, y)) == pytest.approx(1.0 - a, abs=1e-12)
        assert auroc(ScoredSet(s, 1 - y)) == pytest.approx(1.0 - a, abs=1e-12)
        p = auprc(ScoredSet(s, y))
        assert 0.0 < p <= 1.0

    @given(scored)
    @settings(max_examples=200, deadline=None)
    def test_invariant_to_monotone_transforms(self, data):
        s, y = np.array(data[0]), np.array(data[1])
        t = np.exp(3.0 * s) - 7.0
        assert auroc(ScoredSet(t, y)) == pytest.approx(auroc(ScoredSet(s, y)), abs=1e-12)
        assert auprc(ScoredSet(t, y)) == pytest.approx(auprc(ScoredSet(s, y)), abs=1e-12)

    @given(scored, st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_invariant_to_order(self, data, rnd):
        s, y = np.array(data[0]), np.array(data[1])
        perm = list(range(len(s)))
        rnd.shuffle(perm)
        assert auroc(ScoredSet(s[perm], y[perm])) == pytest.approx(auroc(ScoredSet(s, y)), abs=1e-12)
        assert auprc(ScoredSet(s[perm], y[perm])) == pytest.approx(auprc(ScoredSet(s, y)), abs=1e-12)


class TestBootstrap:
    def test_all_tied_scores_give_degenerate_interval(self):
        s = ScoredSet(np.full(40, 0.5), np.r_[np.ones(20), np.zeros(20)])
        assert bootstrap_ci(s, "auroc", 200, seed=0) == (0.5, 0.5)

    def test_seeded(self):
        rng = np.random.default_rng(4)
        s = ScoredSet(rng.random(100), rng.integers(0, 2, 100))
        assert bootstrap_ci(s, "auroc", 100, seed=7) == bootstrap_ci(s, "auroc", 100, seed=7)
        assert bootstrap_ci(s, "auroc", 100, seed=7) != bootstrap_ci(s, "auroc", 100, seed=8)

    def test_interval_covers_estimate_and_narrows(self):
        rng = np.random.default_rng(5)
        y = rng.integers(0, 2, 2000)
        s = ScoredSet(y + rng.normal(0, 1.0, 2000), y)
        lo, hi = bootstrap_ci(s, "auroc", 500, seed=0)
        assert lo <= auroc(s) <= hi
        assert hi - lo < 0.05

    def test_single_class_resamples_are_redrawn(self):
        # one positive in 30: many resamples miss it and must be redrawn
        s = ScoredSet(np.linspace(0, 1, 30), np.r_[np.zeros(29), 1])
        lo, hi = bootstrap_ci(s, "auroc", 100, seed=0)
        assert lo == hi == 1.0

    def test_redraw_cap(self):
        # a single record never yields both classes
        s = ScoredSet([0.5], [1])
        with pytest.raises(MetricError, match="redraw"):
            bootstrap_ci(s, "auroc", 10, seed=0)


class TestReportIO:
    def test_evaluate_and_json_round_trip(self):
        rng = np.random.default_rng(6)
        y = rng.integers(0, 2, 300)
        s = ScoredSet(y * 0.5 + rng.random(300), y)
        r = evaluate(s, n_bootstrap=50, seed=1, fraction=0.1)
        assert r.n == 300 and r.fraction == 0.1 and r.prevalence == y.mean()
        assert M.EvalReport.from_dict(r.to_dict()) == r

    def test_scored_csv_round_trip(self, tmp_path):
        s = ScoredSet([0.25, 0.1 + 0.2, 1 / 3], [1, 0, 1], ["a", "b", "c"])
        M.write_scored_csv(s, tmp_path / "s.csv")
        back = M.read_scored_csv(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.scores, s.scores)
        assert list(back.record_ids) == ["a", "b", "c"]

    def test_bad_scored_csv(self, tmp_path):
        (tmp_path / "bad.csv").write_text("record_id,score,label\na,high,1\n")
        with pytest.raises(MetricError, match="bad.csv"):
            M.read_scored_csv(tmp_path / "bad.csv")

    def test_curves(self):
        s = ScoredSet([0.8, 0.5, 0.6, 0.4], [1, 1, 0, 0])
        roc = M.roc_points(s)
        np.testing.assert_array_equal(roc[:, 1:], [[0, 0], [0, 0.5], [0.5, 0.5], [0.5, 1], [1, 1]])
        # trapezoid area under the ROC points equals AUROC
        assert np.trapezoid(roc[:, 2], roc[:, 1]) == pytest.approx(auroc(s))
