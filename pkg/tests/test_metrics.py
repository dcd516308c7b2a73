import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timearrow.metrics import (
    ComparisonRow,
    RunRow,
    ScoredSet,
    auc,
    auc_bruteforce_oracle,
    compare_arms,
    read_runs_csv,
    roc_auc_trapezoid,
    roc_curve,
    summarize,
    write_runs_csv,
)


def scored(scores, labels):
    return ScoredSet(scores=np.asarray(scores, dtype=float), labels=np.asarray(labels))


# ---------------------------------------------------------------------------
# auc


def test_auc_perfect_ranking():
    assert auc(scored([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0])) == 1.0


def test_auc_pairwise_hand_case():
    # one of four positive-negative pairs correctly ordered
    assert auc(scored([0.2, 0.9, 0.4, 0.6], [1, 0, 0, 1])) == 0.25


def test_auc_all_ties_is_half():
    assert auc(scored([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])) == 0.5


def test_auc_single_class_raises():
    with pytest.raises(ValueError, match="both classes"):
        auc(scored([0.1, 0.2], [1, 1]))
    with pytest.raises(ValueError, match="both classes"):
        auc_bruteforce_oracle(scored([0.1, 0.2], [0, 0]))


def test_bruteforce_trivial_pairs():
    assert auc_bruteforce_oracle(scored([0.8, 0.2], [1, 0])) == 1.0
    assert auc_bruteforce_oracle(scored([0.5, 0.5], [1, 0])) == 0.5


@st.composite
def scored_sets(draw):
    n = draw(st.integers(4, 50))
    # coarse grid of score values injects plenty of ties
    scores = draw(st.lists(st.integers(0, 9), min_size=n, max_size=n))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    if sum(labels) in (0, n):
        labels[0] = 1 - labels[0]
    return scored([s / 9.0 for s in scores], labels)


@settings(deadline=None, max_examples=300)
@given(scored_sets())
def test_auc_matches_bruteforce_oracle(s):
    assert abs(auc(s) - auc_bruteforce_oracle(s)) <= 1e-12


@settings(deadline=None, max_examples=200)
@given(scored_sets())
def test_auc_complement_identity(s):
    flipped = ScoredSet(scores=s.scores, labels=1 - s.labels)
    assert abs(auc(s) + auc(flipped) - 1.0) <= 1e-12


@settings(deadline=None, max_examples=200)
@given(scored_sets())
def test_auc_invariant_under_monotone_transforms(s):
    base = auc(s)
    assert auc(ScoredSet(scores=np.exp(s.scores), labels=s.labels)) == base
    assert auc(ScoredSet(scores=3.0 * s.scores + 11.0, labels=s.labels)) == base


@settings(deadline=None, max_examples=200)
@given(scored_sets())
def test_trapezoid_area_equals_rank_auc(s):
    assert abs(roc_auc_trapezoid(s) - auc(s)) <= 1e-9


def test_auc_equivalence_on_1000_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 8, size=n) / 7.0  # heavy ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        s = ScoredSet(scores=scores, labels=labels)
        assert abs(auc(s) - auc_bruteforce_oracle(s)) <= 1e-12


# ---------------------------------------------------------------------------
# roc curve


def test_roc_curve_perfect_separation_passes_through_corner():
    points = roc_curve(scored([0.9, 0.1], [1, 0]))
    assert any(p.fpr == 0.0 and p.tpr == 1.0 for p in points)


def test_roc_curve_all_ties_degenerate():
    points = roc_curve(scored([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0]))
    assert len(points) == 3
    assert (points[0].fpr, points[0].tpr) == (0.0, 0.0)
    assert (points[-1].fpr, points[-1].tpr) == (1.0, 1.0)
    interior = points[1]
    assert interior.tpr == interior.fpr  # on the diagonal


def test_roc_curve_monotone_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        points = roc_curve(ScoredSet(scores=rng.integers(0, 6, size=n) / 5.0, labels=labels))
        tprs = [p.tpr for p in points]
        fprs = [p.fpr for p in points]
        assert all(a <= b + 1e-15 for a, b in zip(tprs, tprs[1:]))
        assert all(a <= b + 1e-15 for a, b in zip(fprs, fprs[1:]))


# ---------------------------------------------------------------------------
# aggregation


def test_summarize_mean_and_median():
    report = summarize([0.7, 0.8, 0.9], dataset="d", arm="PTR", subjects_per_class=15)
    assert report.mean_auc == pytest.approx(0.8)
    assert report.median_auc == pytest.approx(0.8)


def test_summarize_even_count_median_is_midpoint():
    report = summarize([0.6, 0.8], dataset="d", arm="NPT", subjects_per_class=15)
    assert report.median_auc == pytest.approx(0.7)


def test_summarize_values_recomputable():
    values = [0.71, 0.64, 0.93, 0.55]
    report = summarize(values, dataset="d", arm="PTR", subjects_per_class=25)
    assert report.aucs == values
    assert report.mean_auc == float(np.mean(values))
    assert report.median_auc == float(np.median(values))


def test_summarize_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        summarize([], dataset="d", arm="PTR", subjects_per_class=15)


def test_compare_arms_identical_reports_zero_delta():
    a = summarize([0.7, 0.8], dataset="d", arm="PTR", subjects_per_class=15)
    b = summarize([0.7, 0.8], dataset="d", arm="NPT", subjects_per_class=15)
    row = compare_arms(a, b)
    assert row.median_delta == 0.0
    assert row.paired_deltas == [0.0, 0.0]


def test_compare_arms_abide_style_delta():
    ptr = summarize([0.67, 0.67, 0.67], dataset="abide", arm="PTR", subjects_per_class=237)
    npt = summarize([0.61, 0.61, 0.61], dataset="abide", arm="NPT", subjects_per_class=237)
    assert compare_arms(ptr, npt).median_delta == pytest.approx(0.06)


def test_compare_arms_pairs_by_repeat_index():
    ptr = summarize([0.7, 0.8, 0.9], dataset="d", arm="PTR", subjects_per_class=15)
    npt = summarize([0.6, 0.7], dataset="d", arm="NPT", subjects_per_class=15)
    row = compare_arms(ptr, npt)
    assert len(row.paired_deltas) == 2
    assert row.paired_deltas[0] == pytest.approx(0.1)


def test_compare_arms_rejects_mismatched_cells():
    a = summarize([0.7], dataset="d", arm="PTR", subjects_per_class=15)
    b = summarize([0.7], dataset="other", arm="NPT", subjects_per_class=15)
    with pytest.raises(ValueError, match="mismatched"):
        compare_arms(a, b)


# ---------------------------------------------------------------------------
# CSV persistence


def test_runs_csv_round_trip(tmp_path):
    rows = [RunRow("synthetic", "PTR", 15, 0, 0.8125),
            RunRow("synthetic", "NPT", 15, 0, 0.64)]
    path = tmp_path / "runs.csv"
    write_runs_csv(rows, path)
    header = path.read_text().splitlines()[0]
    assert header == "dataset,arm,subjects_per_class,repeat,test_auc"
    assert read_runs_csv(path) == rows


def test_runs_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "runs.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        read_runs_csv(path)
