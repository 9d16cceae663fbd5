"""Evaluation battery: discrimination, accuracy, calibration, sharpness.

Covers AUC-ROC (rank form), AUC-PR (average precision), Brier score,
reliability bins, Cox recalibration (logistic fit on the logit of the
predictions), unsharpness, and the curve point lists behind the plots.
All functions are pure; a PredictionSet is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError

PROB_CLAMP = 1e-7
# IRLS stopping rule: max parameter change below this, or the iteration cap.
COX_TOL = 1e-8
COX_MAX_ITER = 100
# |slope| beyond this during IRLS is treated as separation.
COX_DIVERGENCE = 50.0
Z_95 = 1.96


@dataclass(frozen=True)
class PredictionSet:
    """Predicted probabilities with binary outcomes for one cohort."""

    probabilities: np.ndarray
    outcomes: np.ndarray
    label: str = ""

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64).reshape(-1)
        y = np.asarray(self.outcomes).reshape(-1)
        if p.size < 1:
            raise ConfigError("PredictionSet needs at least one prediction")
        if p.size != y.size:
            raise ConfigError(f"length mismatch: {p.size} probabilities, {y.size} outcomes")
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if not np.isin(y, (0, 1)).all():
            raise ConfigError("outcomes must be binary")
        object.__setattr__(self, "probabilities", np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
        object.__setattr__(self, "outcomes", y.astype(np.int64))

    @property
    def n(self) -> int:
        return self.probabilities.size

    def require_both_classes(self, metric: str) -> None:
        pos = int(self.outcomes.sum())
        if pos == 0 or pos == self.n:
            raise UndefinedMetricError(f"{metric} undefined: only one outcome class present")


@dataclass(frozen=True)
class ReliabilityBin:
    """One calibration-curve bin over predicted probability."""

    lo: float
    hi: float
    count: int
    mean_predicted: float
    observed_frequency: float

    @property
    def empty(self) -> bool:
        return self.count == 0

    def to_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "count": self.count,
            "mean_predicted": None if self.empty else self.mean_predicted,
            "observed_frequency": None if self.empty else self.observed_frequency,
        }


@dataclass(frozen=True)
class CoxFit:
    """Logistic recalibration fit: y ~ Bernoulli(sigmoid(a + b logit(p)))."""

    intercept: float
    slope: float
    intercept_ci: tuple[float, float]
    slope_ci: tuple[float, float]
    converged: bool
    iterations: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "slope": self.slope,
            "intercept_ci": list(self.intercept_ci),
            "slope_ci": list(self.slope_ci),
            "converged": self.converged,
            "iterations": self.iterations,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class MetricsReport:
    """Full battery for one prediction set."""

    auc_roc: float
    auc_pr: float
    brier: float
    unsharpness: float
    reliability: list[ReliabilityBin] = field(default_factory=list)
    cox: CoxFit | None = None

    def to_dict(self) -> dict:
        return {
            "auc_roc": self.auc_roc,
            "auc_pr": self.auc_pr,
            "brier": self.brier,
            "unsharpness": self.unsharpness,
            "reliability": [b.to_dict() for b in self.reliability],
            "cox": None if self.cox is None else self.cox.to_dict(),
        }


def logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.log(p) - np.log1p(-p)


def auc_roc(preds: PredictionSet) -> float:
    """Mann-Whitney rank statistic: (concordant + half ties) / (n+ * n-)."""
    preds.require_both_classes("auc_roc")
    p, y = preds.probabilities, preds.outcomes
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    # average ranks give tied pairs exactly half credit
    ranks = rankdata(p, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_groups(preds: PredictionSet) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) after each distinct score, descending."""
    p, y = preds.probabilities, preds.outcomes
    order = np.argsort(-p, kind="mergesort")
    p_sorted, y_sorted = p[order], y[order]
    # last index of each tie group
    boundaries = np.nonzero(np.diff(p_sorted))[0]
    ends = np.concatenate([boundaries, [p.size - 1]])
    tp = np.cumsum(y_sorted)[ends].astype(np.float64)
    fp = np.cumsum(1 - y_sorted)[ends].astype(np.float64)
    return tp, fp


def auc_pr(preds: PredictionSet) -> float:
    """Average precision with tie groups collapsed to single recall steps."""
    n_pos = int(preds.outcomes.sum())
    if n_pos == 0:
        raise UndefinedMetricError("auc_pr undefined: no positive outcomes")
    tp, fp = _threshold_groups(preds)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    recall_steps = np.diff(recall, prepend=0.0)
    return float(np.sum(recall_steps * precision))


def brier(preds: PredictionSet) -> float:
    """Mean squared difference between prediction and outcome."""
    return float(np.mean((preds.probabilities - preds.outcomes) ** 2))


def unsharpness(preds: PredictionSet) -> float:
    """Mean of p(1-p); 0 at hard 0/1 forecasts, 0.25 at a constant 0.5."""
    p = preds.probabilities
    return float(np.mean(p * (1.0 - p)))


def reliability_bins(preds: PredictionSet, n_bins: int = 10, strategy: str = "width") -> list[ReliabilityBin]:
    """Calibration-curve bins; empty bins carry NaN means and count 0.

    strategy "width" uses equal-width bins on [0, 1]; "quantile" places the
    interior edges at quantiles of the predictions (edges still span [0, 1]).
    """
    if n_bins < 2:
        raise ConfigError("reliability_bins needs n_bins >= 2")
    if strategy not in ("width", "quantile"):
        raise ConfigError(f"unknown binning strategy {strategy!r}")
    p, y = preds.probabilities, preds.outcomes
    if strategy == "width":
        edges = np.linspace(0.0, 1.0, n_bins + 1)
    else:
        edges = np.quantile(p, np.linspace(0.0, 1.0, n_bins + 1))
        edges[0], edges[-1] = 0.0, 1.0
    idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        bins.append(
            ReliabilityBin(
                lo=float(edges[b]),
                hi=float(edges[b + 1]),
                count=count,
                mean_predicted=float(p[mask].mean()) if count else float("nan"),
                observed_frequency=float(y[mask].mean()) if count else float("nan"),
            )
        )
    return bins


def cox_recalibration(preds: PredictionSet) -> CoxFit:
    """Newton-Raphson logistic fit of outcomes on the logit of predictions.

    Perfect calibration corresponds to intercept 0 and slope 1; Wald 95%
    intervals come from the inverse observed information at the fit.
    """
    preds.require_both_classes("cox_recalibration")
    x = logit(preds.probabilities)
    y = preds.outcomes.astype(np.float64)
    if np.ptp(x) < 1e-12:
        return _intercept_only_fit(y)
    design = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    converged = False
    iterations = 0
    info = np.eye(2)
    for iterations in range(1, COX_MAX_ITER + 1):
        eta = design @ beta
        mu = _sigmoid(eta)
        w = mu * (1.0 - mu)
        grad = design.T @ (y - mu)
        info = (design * w[:, None]).T @ design
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if not np.isfinite(beta).all() or abs(beta[1]) > COX_DIVERGENCE:
            break
        if np.max(np.abs(step)) < COX_TOL:
            converged = True
            break
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.clip(np.diagonal(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(2, np.inf)
    return CoxFit(
        intercept=float(beta[0]),
        slope=float(beta[1]),
        intercept_ci=(float(beta[0] - Z_95 * se[0]), float(beta[0] + Z_95 * se[0])),
        slope_ci=(float(beta[1] - Z_95 * se[1]), float(beta[1] + Z_95 * se[1])),
        converged=converged,
        iterations=iterations,
    )


def _intercept_only_fit(y: np.ndarray) -> CoxFit:
    """Zero-variance regressor: slope pinned at 0 with an uninformative CI."""
    pi = float(y.mean())
    alpha = float(np.log(pi) - np.log1p(-pi))
    se = float(np.sqrt(1.0 / (y.size * pi * (1.0 - pi))))
    return CoxFit(
        intercept=alpha,
        slope=0.0,
        intercept_ci=(alpha - Z_95 * se, alpha + Z_95 * se),
        slope_ci=(float("-inf"), float("inf")),
        converged=True,
        iterations=0,
        degenerate=True,
    )


def roc_curve_points(preds: PredictionSet) -> list[tuple[float, float]]:
    """(FPR, TPR) per distinct threshold; trapezoid area equals auc_roc."""
    preds.require_both_classes("roc_curve_points")
    tp, fp = _threshold_groups(preds)
    n_pos, n_neg = tp[-1], fp[-1]
    points = [(0.0, 0.0)]
    points.extend((float(f / n_neg), float(t / n_pos)) for f, t in zip(fp, tp))
    return points


def pr_curve_points(preds: PredictionSet) -> list[tuple[float, float]]:
    """(recall, precision) per distinct threshold, high thresholds first."""
    n_pos = int(preds.outcomes.sum())
    if n_pos == 0:
        raise UndefinedMetricError("pr_curve_points undefined: no positive outcomes")
    tp, fp = _threshold_groups(preds)
    points = [(0.0, 1.0)]
    points.extend((float(t / n_pos), float(t / (t + f))) for t, f in zip(tp, fp))
    return points


def compute_report(preds: PredictionSet, n_bins: int = 10) -> MetricsReport:
    """The full battery on one prediction set."""
    return MetricsReport(
        auc_roc=auc_roc(preds),
        auc_pr=auc_pr(preds),
        brier=brier(preds),
        unsharpness=unsharpness(preds),
        reliability=reliability_bins(preds, n_bins=n_bins),
        cox=cox_recalibration(preds),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
