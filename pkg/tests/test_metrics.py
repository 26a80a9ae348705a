"""Q-error, rank correlation, suboptimality, quantile conventions."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planrep.metrics import (
    EvalReport,
    MetricsError,
    evaluate_estimates,
    plan_suboptimality,
    q_error,
    q_errors,
    quantile_report,
    reports_to_csv,
    spearman,
    time_inference,
)


def spearman_oracle(xs, ys):
    """Brute-force average-rank correlation, quadratic and independent."""
    def ranks(v):
        out = []
        for value in v:
            less = sum(1 for o in v if o < value)
            equal = sum(1 for o in v if o == value)
            # positions less+1 .. less+equal share the average rank
            out.append(less + (equal + 1) / 2.0)
        return out

    rx, ry = ranks(list(xs)), ranks(list(ys))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = (sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry)) ** 0.5
    return num / den


class TestQError:
    def test_worked_examples(self):
        assert q_error(50.0, 200.0) == 4.0
        assert q_error(200.0, 50.0) == 4.0
        assert q_error(7.0, 7.0) == 1.0

    def test_nonpositive_rejected(self):
        with pytest.raises(MetricsError):
            q_error(0.0, 1.0)
        with pytest.raises(MetricsError):
            q_error(1.0, -2.0)
        with pytest.raises(MetricsError):
            q_errors([1.0, -1.0], [1.0, 1.0])

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-9, 1e9), st.floats(1e-9, 1e9))
    def test_symmetric_and_at_least_one(self, a, b):
        assert q_error(a, b) == q_error(b, a) >= 1.0


class TestSpearman:
    def test_monotone_transform_gives_one(self):
        xs = [3.0, 1.0, 10.0, 7.0, 5.0]
        assert spearman(xs, [x ** 3 for x in xs]) == 1.0
        assert spearman(xs, [np.log(x) for x in xs]) == 1.0

    def test_reversed_gives_minus_one(self):
        xs = [1.0, 2.0, 3.0, 4.0]
        assert spearman(xs, [-x for x in xs]) == -1.0

    def test_tied_data_matches_brute_force(self):
        xs = [1.0, 2.0, 2.0, 4.0]
        ys = [1.0, 3.0, 2.0, 4.0]
        assert abs(spearman(xs, ys) - spearman_oracle(xs, ys)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=3, max_size=12),
           st.lists(st.integers(0, 5), min_size=3, max_size=12))
    def test_matches_brute_force_on_random_tied_data(self, xs, ys):
        n = min(len(xs), len(ys))
        xs, ys = [float(v) for v in xs[:n]], [float(v) for v in ys[:n]]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            return
        assert abs(spearman(xs, ys) - spearman_oracle(xs, ys)) < 1e-12

    def test_constant_vector_rejected(self):
        with pytest.raises(MetricsError, match="constant"):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        with pytest.raises(MetricsError, match="constant"):
            spearman([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])

    def test_invariant_under_monotone_transform_of_either_side(self):
        rng = np.random.default_rng(0)
        xs = rng.uniform(1.0, 100.0, size=20)
        ys = rng.uniform(1.0, 100.0, size=20)
        base = spearman(xs, ys)
        assert abs(spearman(np.exp(xs / 50.0), ys) - base) < 1e-12
        assert abs(spearman(xs, ys ** 3) - base) < 1e-12


class TestPlanSuboptimality:
    def test_worked_example(self):
        pairs = list(zip([90.0, 95.0, 200.0], [100.0, 80.0, 120.0]))
        assert plan_suboptimality(pairs) == 1.25

    def test_perfect_ranking_gives_one(self):
        actual = [40.0, 20.0, 60.0]
        assert plan_suboptimality(list(zip(actual, actual))) == 1.0

    def test_single_candidate_is_forced_optimal(self):
        assert plan_suboptimality([(123.0, 55.0)]) == 1.0

    def test_tie_breaks_to_lowest_index(self):
        pairs = [(10.0, 100.0), (10.0, 50.0)]
        assert plan_suboptimality(pairs) == 2.0  # index 0 wins the tie

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            plan_suboptimality([])

    def test_invariant_under_monotone_transform_of_predictions(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = rng.uniform(1.0, 100.0, size=13)
            act = rng.uniform(1.0, 100.0, size=13)
            base = plan_suboptimality(list(zip(pred, act)))
            for f in (np.log, np.sqrt, lambda v: v * 3.0 + 1.0):
                assert plan_suboptimality(list(zip(f(pred), act))) == base


class TestQuantileReport:
    def test_one_to_hundred(self):
        rep = quantile_report(np.arange(1.0, 101.0))
        assert rep.median == 50.0
        assert rep.p90 == 90.0
        assert rep.p99 == 99.0

    def test_top50_mean_of_four(self):
        rep = quantile_report([4.0, 3.0, 2.0, 1.0])
        assert rep.top50_mean == 1.5

    def test_constant_vector(self):
        rep = quantile_report([7.0] * 9)
        assert (rep.median, rep.p90, rep.p99) == (7.0, 7.0, 7.0)
        assert (rep.top50_mean, rep.top90_mean, rep.top99_mean) == (7.0, 7.0, 7.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(1.0, 1e6), min_size=1, max_size=50))
    def test_monotone_fields(self, values):
        rep = quantile_report(values)
        # means are subject to last-ulp rounding on constant runs
        slack = 1e-12
        assert rep.top50_mean <= rep.top90_mean * (1 + slack)
        assert rep.top90_mean <= rep.top99_mean * (1 + slack)
        assert rep.median <= rep.p90 <= rep.p99

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            quantile_report([])


class TestReports:
    def test_csv_column_order(self):
        report = evaluate_estimates("bigg", "weighted_directed",
                                    [1.0, 2.0, 3.0], [1.5, 2.0, 2.0])
        text = reports_to_csv([report])
        header = text.splitlines()[0]
        # the leading columns follow the published accuracy-table order
        assert header.startswith(
            "model,edge_direction,median_qerror,p90_qerror,p99_qerror,"
            "spearman,top50_mean_qerror,top99_mean_qerror")

    def test_identity_predictions(self):
        actual = [3.0, 1.0, 4.0, 1.5]
        report = evaluate_estimates("oracle", "-", actual, actual)
        assert report.q_error_summary.median == 1.0
        assert report.spearman == 1.0


class TestTimeInference:
    def test_zero_reps_rejected(self):
        with pytest.raises(MetricsError):
            time_inference(lambda x: x, [1], repetitions=0)

    def test_empty_items_rejected(self):
        with pytest.raises(MetricsError):
            time_inference(lambda x: x, [], repetitions=1)

    def test_mean_is_finite_nonnegative(self):
        mean_ms, std_ms = time_inference(lambda x: x * 2, list(range(50)), repetitions=3)
        assert np.isfinite(mean_ms) and mean_ms >= 0.0
        assert np.isfinite(std_ms) and std_ms >= 0.0
