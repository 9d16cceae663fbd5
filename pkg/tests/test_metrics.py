"""Metrics battery: hand values, brute-force and Monte-Carlo oracles, and
the rank/curve cross-checks."""

import numpy as np
import pytest

from dklshift.errors import ConfigError, UndefinedMetricError
from dklshift.metrics import (
    CoxFit,
    PredictionSet,
    auc_pr,
    auc_roc,
    brier,
    compute_report,
    cox_recalibration,
    logit,
    pr_curve_points,
    reliability_bins,
    roc_curve_points,
    unsharpness,
)


def pset(p, y) -> PredictionSet:
    return PredictionSet(np.asarray(p, dtype=np.float64), np.asarray(y))


def pair_count_auc(p, y):
    """Brute-force Mann-Whitney: concordant pairs plus half the ties."""
    pos, neg = p[y == 1], p[y == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (pos.size * neg.size)


def random_set_with_ties(rng, n):
    # grid-valued scores inject plenty of exact ties
    p = rng.integers(1, 20, size=n) / 20.0
    y = (rng.random(n) < 0.4).astype(int)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return p, y


# ---------------------------------------------------------------------------
# AUC-ROC


def test_auc_roc_perfect_separation():
    assert auc_roc(pset([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0


def test_auc_roc_all_ties():
    assert auc_roc(pset([0.3] * 6, [0, 1, 0, 1, 0, 1])) == 0.5


def test_auc_roc_hand_example():
    assert auc_roc(pset([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75


def test_auc_roc_matches_pair_counting(rng):
    for _ in range(40):
        p, y = random_set_with_ties(rng, int(rng.integers(5, 60)))
        got = auc_roc(pset(p, y))
        assert got == pytest.approx(pair_count_auc(p, y), abs=1e-12)


def test_auc_roc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auc_roc(pset([0.2, 0.4], [1, 1]))


def test_auc_roc_monotone_invariance(rng):
    p = rng.uniform(0.05, 0.95, size=30)
    y = (rng.random(30) < 0.5).astype(int)
    y[:2] = [0, 1]
    base = auc_roc(pset(p, y))
    assert auc_roc(pset(p**3, y)) == pytest.approx(base, abs=1e-12)
    assert auc_roc(pset(0.1 + 0.8 * p, y)) == pytest.approx(base, abs=1e-12)


def test_auc_roc_complement_identity(rng):
    p = rng.uniform(0.05, 0.95, size=25)  # continuous, no ties a.s.
    y = (rng.random(25) < 0.5).astype(int)
    y[:2] = [0, 1]
    assert auc_roc(pset(p, y)) + auc_roc(pset(1.0 - p, y)) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# AUC-PR


def test_auc_pr_perfect_ranking():
    assert auc_pr(pset([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0


def test_auc_pr_single_positive_ranked_last():
    assert auc_pr(pset([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1])) == 0.25


def test_auc_pr_constant_scores_give_prevalence():
    y = np.array([1, 0, 0, 0, 1, 0, 0, 0, 0, 0])
    assert auc_pr(pset(np.full(10, 0.3), y)) == pytest.approx(0.2, abs=1e-12)


def test_auc_pr_tie_group_hand_value():
    # groups: (0.5: tp=1, fp=1) then (0.2: tp=2, fp=1)
    got = auc_pr(pset([0.5, 0.5, 0.2], [1, 0, 1]))
    assert got == pytest.approx(0.5 * 0.5 + 0.5 * (2.0 / 3.0), abs=1e-12)


def test_auc_pr_classic_formula_no_ties(rng):
    for _ in range(25):
        n = int(rng.integers(5, 50))
        p = rng.uniform(0.05, 0.95, size=n)
        y = (rng.random(n) < 0.4).astype(int)
        y[0] = 1
        order = np.argsort(-p)
        ys = y[order]
        hits = np.cumsum(ys)
        precision_at_pos = hits[ys == 1] / (np.nonzero(ys)[0] + 1)
        expected = precision_at_pos.sum() / ys.sum()
        assert auc_pr(pset(p, y)) == pytest.approx(expected, abs=1e-12)


def test_auc_pr_no_positives_undefined():
    with pytest.raises(UndefinedMetricError):
        auc_pr(pset([0.2, 0.4], [0, 0]))


# ---------------------------------------------------------------------------
# Brier and unsharpness


def test_brier_perfect_and_constant():
    assert brier(pset([1.0, 0.0, 1.0], [1, 0, 1])) == pytest.approx(0.0, abs=1e-12)
    assert brier(pset([0.5] * 4, [0, 1, 0, 1])) == pytest.approx(0.25, abs=1e-12)


def test_brier_hand_example():
    assert brier(pset([0.2, 0.9], [0, 1])) == pytest.approx(0.025, rel=1e-12)


def test_unsharpness_extremes_and_hand_value():
    assert unsharpness(pset([0.0, 1.0, 1.0], [0, 1, 1])) < 1e-6  # clamp keeps it off exact 0
    assert unsharpness(pset([0.5, 0.5], [0, 1])) == pytest.approx(0.25, abs=1e-12)
    assert unsharpness(pset([0.2, 0.6], [0, 1])) == pytest.approx(0.20, rel=1e-12)


def test_brier_equals_unsharpness_at_constant_prevalence():
    y = np.zeros(100, dtype=int)
    y[:13] = 1
    preds = pset(np.full(100, 0.13), y)
    assert brier(preds) == pytest.approx(unsharpness(preds), rel=1e-12)
    assert brier(preds) == pytest.approx(0.13 * 0.87, rel=1e-12)


# ---------------------------------------------------------------------------
# reliability bins


def test_reliability_counts_partition(rng):
    p = rng.uniform(0.01, 0.99, size=200)
    y = (rng.random(200) < p).astype(int)
    bins = reliability_bins(pset(p, y))
    assert sum(b.count for b in bins) == 200
    assert bins[0].lo == 0.0 and bins[-1].hi == 1.0
    for a, b in zip(bins, bins[1:]):
        assert a.hi == b.lo


def test_reliability_single_populated_bin():
    bins = reliability_bins(pset([0.41, 0.44, 0.47], [0, 1, 0]))
    assert [b.count for b in bins] == [0, 0, 0, 0, 3, 0, 0, 0, 0, 0]
    empty = bins[0]
    assert empty.empty and np.isnan(empty.mean_predicted)
    assert empty.to_dict()["mean_predicted"] is None
    assert bins[4].mean_predicted == pytest.approx(0.44)
    assert bins[4].observed_frequency == pytest.approx(1.0 / 3.0)


def test_reliability_calibrated_monte_carlo():
    rng = np.random.default_rng(99)
    p = rng.uniform(0.02, 0.98, size=60_000)
    y = (rng.random(p.size) < p).astype(int)
    for b in reliability_bins(pset(p, y)):
        if b.count < 50:
            continue
        se = np.sqrt(b.mean_predicted * (1.0 - b.mean_predicted) / b.count)
        assert abs(b.observed_frequency - b.mean_predicted) < 3.0 * se


def test_reliability_quantile_strategy(rng):
    p = np.concatenate([rng.uniform(0.01, 0.1, 180), rng.uniform(0.3, 0.9, 20)])
    y = (rng.random(200) < p).astype(int)
    bins = reliability_bins(pset(p, y), n_bins=4, strategy="quantile")
    counts = [b.count for b in bins]
    assert sum(counts) == 200
    assert max(counts) - min(counts) <= 110  # far more even than width bins would be
    assert bins[0].lo == 0.0 and bins[-1].hi == 1.0


def test_reliability_bad_args(rng):
    preds = pset([0.1, 0.9], [0, 1])
    with pytest.raises(ConfigError):
        reliability_bins(preds, n_bins=1)
    with pytest.raises(ConfigError):
        reliability_bins(preds, strategy="depth")


# ---------------------------------------------------------------------------
# Cox recalibration


def test_cox_recovers_ideal_on_calibrated_data():
    rng = np.random.default_rng(5)
    p = rng.uniform(0.05, 0.95, size=20_000)
    y = (rng.random(p.size) < p).astype(int)
    fit = cox_recalibration(pset(p, y))
    assert fit.converged and not fit.degenerate
    assert fit.intercept_ci[0] <= 0.0 <= fit.intercept_ci[1]
    assert fit.slope_ci[0] <= 1.0 <= fit.slope_ci[1]


def test_cox_recovers_known_transform():
    rng = np.random.default_rng(11)
    p = rng.uniform(0.05, 0.95, size=50_000)
    y = (rng.random(p.size) < p).astype(int)
    a, b = 1.0, 0.5
    p_mis = 1.0 / (1.0 + np.exp(-(a + b * logit(p))))
    fit = cox_recalibration(pset(p_mis, y))
    se_a = (fit.intercept_ci[1] - fit.intercept) / 1.96
    se_b = (fit.slope_ci[1] - fit.slope) / 1.96
    assert fit.intercept == pytest.approx(-a / b, abs=3 * se_a)  # -2
    assert fit.slope == pytest.approx(1.0 / b, abs=3 * se_b)  # 2
    assert fit.converged


def test_cox_constant_predictions_degenerate():
    y = np.array([0, 1, 0, 0, 1, 0, 0, 0])
    fit = cox_recalibration(pset(np.full(8, 0.25), y))
    assert fit.degenerate and fit.slope == 0.0
    assert fit.intercept == pytest.approx(logit(np.array([0.25]))[0], rel=1e-12)


def test_cox_separation_flagged():
    fit = cox_recalibration(pset([0.1, 0.15, 0.85, 0.9], [0, 0, 1, 1]))
    assert not fit.converged


def test_cox_slope_equivariance():
    rng = np.random.default_rng(7)
    p = rng.uniform(0.2, 0.8, size=5_000)
    y = (rng.random(p.size) < p).astype(int)
    base = cox_recalibration(pset(p, y))
    c = 2.0
    scaled = 1.0 / (1.0 + np.exp(-c * logit(p)))
    refit = cox_recalibration(pset(scaled, y))
    assert refit.slope == pytest.approx(base.slope / c, rel=1e-6)
    assert refit.intercept == pytest.approx(base.intercept, abs=1e-6)


def test_cox_ci_brackets_estimate(rng):
    p = rng.uniform(0.1, 0.9, size=500)
    y = (rng.random(500) < p).astype(int)
    fit = cox_recalibration(pset(p, y))
    assert fit.intercept_ci[0] <= fit.intercept <= fit.intercept_ci[1]
    assert fit.slope_ci[0] <= fit.slope <= fit.slope_ci[1]


# ---------------------------------------------------------------------------
# curves


def test_roc_curve_perfect_passes_corner():
    pts = roc_curve_points(pset([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]))
    assert (0.0, 1.0) in pts
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)


def test_roc_curve_all_ties_diagonal():
    assert roc_curve_points(pset([0.4] * 4, [0, 1, 0, 1])) == [(0.0, 0.0), (1.0, 1.0)]


def test_roc_trapezoid_equals_rank_auc(rng):
    for _ in range(20):
        p, y = random_set_with_ties(rng, 100)
        pts = np.array(roc_curve_points(pset(p, y)))
        area = float(np.trapezoid(pts[:, 1], pts[:, 0]))
        assert area == pytest.approx(auc_roc(pset(p, y)), abs=1e-12)
        assert np.all(np.diff(pts[:, 0]) >= 0)


def test_pr_curve_starts_at_full_precision():
    pts = pr_curve_points(pset([0.9, 0.1], [1, 0]))
    assert pts[0] == (0.0, 1.0) and pts[-1][0] == 1.0


# ---------------------------------------------------------------------------
# report and prediction-set contracts


def test_report_ranges_and_purity(rng):
    p = rng.uniform(0.05, 0.95, size=120)
    y = (rng.random(120) < p).astype(int)
    a = compute_report(pset(p, y))
    b = compute_report(pset(p, y))
    assert 0.0 <= a.auc_roc <= 1.0 and 0.0 <= a.auc_pr <= 1.0
    assert 0.0 <= a.brier <= 1.0 and 0.0 <= a.unsharpness <= 0.25
    assert a.to_dict() == b.to_dict()
    assert len(a.reliability) == 10 and a.cox is not None


def test_prediction_set_contracts():
    with pytest.raises(ConfigError):
        PredictionSet(np.array([]), np.array([]))
    with pytest.raises(ConfigError):
        PredictionSet(np.array([0.5]), np.array([1, 0]))
    with pytest.raises(ConfigError):
        PredictionSet(np.array([1.5]), np.array([1]))
    with pytest.raises(ConfigError):
        PredictionSet(np.array([0.5]), np.array([2]))
    clamped = pset([0.0, 1.0], [0, 1])
    assert clamped.probabilities[0] == 1e-7 and clamped.probabilities[1] == 1.0 - 1e-7
    assert pset([0.5], [1]).label == ""
