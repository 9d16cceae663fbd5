"""Optimization loop, model selection, and multi-run aggregation.

Training minimizes mean BCE (baseline kinds) or the negative ELBO (DKL
kinds) with Adam, shuffling each epoch from the run seed. After every
epoch the validation AUC-ROC is computed with dropout off; the best epoch
wins (ties to the earlier epoch) and its parameters are restored at the
end. Experiments repeat this per model kind over seeds seed0 + run_index
and aggregate as mean +/- sample standard deviation.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics, nn
from .data import Dataset
from .errors import ConfigError, DklShiftError, NumericError
from .metrics import MetricsReport, PredictionSet
from .model import MODEL_KINDS, check_kind, init_model
from .nn import ExtractorConfig
from .tensor import Tape, Tensor, backward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "dkl"
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 100
    dropout: float = 0.3
    seed: int = 0
    selection_metric: str = "auc_roc"
    n_inducing: int = 100
    quad_order: int = 60
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def __post_init__(self):
        check_kind(self.model_kind)
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.n_inducing < 1:
            raise ConfigError("learning_rate, epochs, batch_size, n_inducing must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.selection_metric != "auc_roc":
            raise ConfigError("only auc_roc model selection is supported")

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "dropout": self.dropout,
            "seed": self.seed,
            "selection_metric": self.selection_metric,
            "n_inducing": self.n_inducing,
            "quad_order": self.quad_order,
            "extractor": self.extractor.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "extractor" in d:
            d["extractor"] = ExtractorConfig.from_dict(d["extractor"])
        return cls(**d)


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, params, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.values) for name, t in params}
        self.v = {name: np.zeros_like(t.values) for name, t in params}


def adam_step(state: AdamState, params, grads: dict, lr: float) -> None:
    """Standard bias-corrected Adam update, applied in place."""
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, tensor in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.values)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != tensor.values.shape:
            raise ConfigError(f"gradient shape {g.shape} mismatches parameter {name!r} {tensor.values.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.values -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


@dataclass
class RunResult:
    """One trained model plus its selection trace and evaluation reports."""

    model_kind: str
    seed: int
    best_epoch: int
    best_val_auc: float
    epoch_val_aucs: list
    model: object
    val_report: MetricsReport | None = None
    test_report: MetricsReport | None = None

    def to_record(self, config: TrainConfig) -> dict:
        return {
            "model_kind": self.model_kind,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_val_auc,
            "epoch_val_aucs": self.epoch_val_aucs,
            "config": config.to_dict(),
            "val": None if self.val_report is None else self.val_report.to_dict(),
            "test": None if self.test_report is None else self.test_report.to_dict(),
        }


def _val_auc(model, val_set: Dataset) -> float:
    probs = model.predict_proba(val_set.episodes)
    return metrics.auc_roc(PredictionSet(probs, val_set.labels))


def train_model(config: TrainConfig, train_set: Dataset, val_set: Dataset) -> RunResult:
    if train_set.n < 1 or val_set.n < 1:
        raise ConfigError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    extractor_cfg = replace(config.extractor, dropout_rate=config.dropout)
    model = init_model(
        config.model_kind,
        extractor_cfg,
        config.seed,
        train_episodes=train_set.episodes,
        n_inducing=config.n_inducing,
    )
    if hasattr(model, "quad_order"):
        model.quad_order = config.quad_order
    params = model.parameters()
    adam = AdamState(params)
    n = train_set.n
    best_auc = -np.inf
    best_epoch = 0
    best_values = None
    history = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        for batch_index, lo in enumerate(range(0, n, config.batch_size)):
            idx = perm[lo : lo + config.batch_size]
            x = Tensor(nn.stack_time_major(train_set.episodes[idx]))
            y = train_set.labels[idx]
            try:
                with Tape() as tape:
                    loss = model.loss(x, y, len(idx), n, training=True, rng=rng)
                if not np.isfinite(loss.values):
                    raise NumericError("loss is non-finite")
                backward(tape, loss)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {batch_index}: {e}") from e
            grads = {name: t.grad for name, t in params}
            adam_step(adam, params, grads, config.learning_rate)
            for _, t in params:
                t.zero_grad()
        val_auc = _val_auc(model, val_set)
        history.append(val_auc)
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_values = {name: t.values.copy() for name, t in params}
    for name, t in params:
        t.values[...] = best_values[name]
    return RunResult(
        model_kind=config.model_kind,
        seed=config.seed,
        best_epoch=best_epoch,
        best_val_auc=float(best_auc),
        epoch_val_aucs=[float(a) for a in history],
        model=model,
    )


@dataclass
class ExperimentResult:
    """Completed runs per model kind plus recorded failures."""

    runs: dict
    failures: list

    def completed(self, kind: str) -> list:
        return self.runs.get(kind, [])

    def best_run(self, kind: str) -> RunResult:
        runs = self.completed(kind)
        if not runs:
            raise ConfigError(f"no completed runs for model kind {kind!r}")
        return max(runs, key=lambda r: r.best_val_auc)


# worker globals installed once per process by _pool_init
_POOL_DATA = {}


def _pool_init(train_set, val_set, test_set):
    _POOL_DATA["train"] = train_set
    _POOL_DATA["val"] = val_set
    _POOL_DATA["test"] = test_set


def _pool_run(config: TrainConfig):
    return _run_one(config, _POOL_DATA["train"], _POOL_DATA["val"], _POOL_DATA["test"])


def _run_one(config: TrainConfig, train_set: Dataset, val_set: Dataset, test_set: Dataset) -> RunResult:
    result = train_model(config, train_set, val_set)
    val_probs = result.model.predict_proba(val_set.episodes)
    result.val_report = metrics.compute_report(PredictionSet(val_probs, val_set.labels, label="validation"))
    test_probs = result.model.predict_proba(test_set.episodes)
    result.test_report = metrics.compute_report(PredictionSet(test_probs, test_set.labels, label="test"))
    return result


def run_experiment(
    template: TrainConfig,
    train_set: Dataset,
    val_set: Dataset,
    test_set: Dataset,
    model_kinds=MODEL_KINDS,
    n_runs: int = 10,
    base_seed: int = 0,
    jobs: int = 1,
) -> ExperimentResult:
    """Train every kind n_runs times; failures are recorded, not fatal."""
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    for kind in model_kinds:
        check_kind(kind)
    tasks = [
        replace(template, model_kind=kind, seed=base_seed + run_index)
        for kind in model_kinds
        for run_index in range(n_runs)
    ]
    outcomes = []
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_pool_init, initargs=(train_set, val_set, test_set)
        ) as pool:
            futures = [pool.submit(_pool_run, cfg) for cfg in tasks]
            for cfg, fut in zip(tasks, futures):
                try:
                    outcomes.append((cfg, fut.result(), None))
                except DklShiftError as e:
                    outcomes.append((cfg, None, e))
    else:
        for cfg in tasks:
            try:
                outcomes.append((cfg, _run_one(cfg, train_set, val_set, test_set), None))
            except DklShiftError as e:
                outcomes.append((cfg, None, e))
    runs = {kind: [] for kind in model_kinds}
    failures = []
    for cfg, result, error in outcomes:
        if error is None:
            runs[cfg.model_kind].append(result)
        else:
            failures.append(
                {"model_kind": cfg.model_kind, "seed": cfg.seed, "error": f"{type(error).__name__}: {error}"}
            )
    return ExperimentResult(runs=runs, failures=failures)


_AGGREGATE_METRICS = (
    ("val_auc_roc", lambda r: r.val_report.auc_roc),
    ("val_auc_pr", lambda r: r.val_report.auc_pr),
    ("test_auc_roc", lambda r: r.test_report.auc_roc),
    ("test_auc_pr", lambda r: r.test_report.auc_pr),
    ("test_brier", lambda r: r.test_report.brier),
    ("test_unsharpness", lambda r: r.test_report.unsharpness),
    ("test_cox_intercept", lambda r: r.test_report.cox.intercept),
    ("test_cox_slope", lambda r: r.test_report.cox.slope),
)


def aggregate_rows(experiment: ExperimentResult, model_kinds=MODEL_KINDS) -> list:
    """Mean +/- sample std per metric per kind; n_runs=1 stds are 0 by convention."""
    rows = []
    for kind in model_kinds:
        runs = experiment.completed(kind)
        n_failed = sum(1 for f in experiment.failures if f["model_kind"] == kind)
        row = {"model_kind": kind, "n_runs": len(runs), "n_failures": n_failed, "single_run": len(runs) == 1}
        for name, getter in _AGGREGATE_METRICS:
            values = [getter(r) for r in runs]
            if not values:
                row[f"{name}_mean"] = float("nan")
                row[f"{name}_std"] = float("nan")
            else:
                row[f"{name}_mean"] = float(np.mean(values))
                row[f"{name}_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append(row)
    return rows


def aggregate_csv(rows: list) -> str:
    """Deterministic CSV text for the aggregate table."""
    if not rows:
        return ""
    columns = list(rows[0].keys())
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            value = row[col]
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
