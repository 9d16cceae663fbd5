"""Training loop: Adam against a reference implementation, best-epoch
selection and restoration, determinism, failure recording, aggregation."""

import csv
import io

import numpy as np
import pytest

from dklshift.data import N_FEATURES, N_HOURS, Dataset
from dklshift.errors import ConfigError, NumericError
from dklshift.metrics import PredictionSet, auc_roc
from dklshift.nn import ExtractorConfig
from dklshift.tensor import Tensor
from dklshift.train import (
    ADAM_EPS,
    AdamState,
    TrainConfig,
    adam_step,
    aggregate_csv,
    aggregate_rows,
    run_experiment,
    train_model,
)

SMALL = ExtractorConfig(encoder_size=3, hidden_size=3, feature_dim=2)


def small_config(kind="lstm", **kwargs) -> TrainConfig:
    base = dict(
        model_kind=kind,
        epochs=2,
        batch_size=8,
        dropout=0.0,
        n_inducing=4,
        quad_order=20,
        extractor=SMALL,
    )
    base.update(kwargs)
    return TrainConfig(**base)


def planted_dataset(rng, n, signal=0.8) -> Dataset:
    """Noise episodes whose first channels shift with the label."""
    y = (rng.random(n) < 0.5).astype(np.int64)
    x = rng.normal(size=(n, N_HOURS, N_FEATURES)) * 0.5
    x[:, :, :4] += signal * (2.0 * y - 1.0)[:, None, None]
    return Dataset(episodes=x, labels=y, ids=[f"e{i}" for i in range(n)], eras=["A"] * n)


@pytest.fixture(scope="module")
def sets():
    rng = np.random.default_rng(42)
    return planted_dataset(rng, 32), planted_dataset(rng, 16), planted_dataset(rng, 16)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_moves_by_learning_rate():
    w = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    params = [("w", w)]
    g = np.array([0.7, -2.0, 0.01])
    adam_step(AdamState(params), params, {"w": g}, lr=1e-3)
    # bias correction makes the first update lr * g / (|g| + eps)
    expected = np.array([1.0, -1.0, 0.5]) - 1e-3 * g / (np.abs(g) + ADAM_EPS)
    assert np.allclose(w.values, expected, rtol=0, atol=1e-15)


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4,)), requires_grad=True)
    ref = w.values.copy()
    params = [("w", w)]
    state = AdamState(params)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(state, params, {"w": g}, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + ADAM_EPS)
        assert np.allclose(w.values, ref, rtol=1e-12, atol=0)


def test_adam_missing_grad_is_a_zero_grad():
    w = Tensor(np.ones(3), requires_grad=True)
    params = [("w", w)]
    adam_step(AdamState(params), params, {}, lr=0.1)
    assert np.array_equal(w.values, np.ones(3))


def test_adam_rejects_bad_grads():
    w = Tensor(np.ones(3), requires_grad=True)
    params = [("w", w)]
    with pytest.raises(NumericError):
        adam_step(AdamState(params), params, {"w": np.array([1.0, np.nan, 0.0])}, lr=0.1)
    with pytest.raises(ConfigError):
        adam_step(AdamState(params), params, {"w": np.ones(2)}, lr=0.1)


# ---------------------------------------------------------------------------
# config


def test_train_config_roundtrip():
    config = small_config("dkl", seed=5)
    assert TrainConfig.from_dict(config.to_dict()) == config


def test_train_config_rejects_bad_values():
    for kwargs in (
        {"model_kind": "gru"},
        {"learning_rate": 0.0},
        {"epochs": 0},
        {"batch_size": 0},
        {"dropout": 1.0},
        {"selection_metric": "brier"},
        {"n_inducing": 0},
    ):
        with pytest.raises(ConfigError):
            small_config(**kwargs)


# ---------------------------------------------------------------------------
# train_model


def test_single_epoch_run_shape(sets):
    train_set, val_set, _ = sets
    result = train_model(small_config(epochs=1), train_set, val_set)
    assert result.best_epoch == 1
    assert len(result.epoch_val_aucs) == 1
    assert result.epoch_val_aucs[0] == result.best_val_auc
    assert 0.0 <= result.best_val_auc <= 1.0


def test_best_epoch_is_argmax_with_earlier_ties(sets):
    train_set, val_set, _ = sets
    result = train_model(small_config(epochs=4), train_set, val_set)
    history = result.epoch_val_aucs
    assert result.best_val_auc == max(history)
    assert result.best_epoch == history.index(max(history)) + 1


def test_returned_model_reproduces_best_val_auc(sets):
    train_set, val_set, _ = sets
    result = train_model(small_config(epochs=3, dropout=0.3), train_set, val_set)
    probs = result.model.predict_proba(val_set.episodes)
    assert auc_roc(PredictionSet(probs, val_set.labels)) == result.best_val_auc


def test_training_is_bit_reproducible(sets):
    train_set, val_set, _ = sets
    config = small_config("dkl", epochs=2, dropout=0.3, seed=11)
    first = train_model(config, train_set, val_set)
    second = train_model(config, train_set, val_set)
    assert first.epoch_val_aucs == second.epoch_val_aucs
    assert first.best_epoch == second.best_epoch
    for (name_a, t_a), (_, t_b) in zip(first.model.parameters(), second.model.parameters()):
        assert np.array_equal(t_a.values, t_b.values), name_a


def test_seed_changes_the_run(sets):
    train_set, val_set, _ = sets
    first = train_model(small_config(seed=0), train_set, val_set)
    other = train_model(small_config(seed=1), train_set, val_set)
    assert first.model.head.weights.values.tolist() != other.model.head.weights.values.tolist()


def test_baseline_learns_planted_signal(sets):
    train_set, val_set, _ = sets
    result = train_model(small_config("bilstm", epochs=5), train_set, val_set)
    assert result.best_val_auc > 0.85


def test_dkl_learns_planted_signal(sets):
    train_set, val_set, _ = sets
    result = train_model(small_config("dkl", epochs=3), train_set, val_set)
    assert result.best_val_auc > 0.8
    probs = result.model.predict_proba(val_set.episodes)
    assert np.all((probs > 0.0) & (probs < 1.0))


def test_empty_sets_rejected(sets):
    train_set, val_set, _ = sets
    empty = Dataset(
        episodes=np.zeros((0, N_HOURS, N_FEATURES)), labels=np.zeros(0, dtype=np.int64), ids=[], eras=[]
    )
    with pytest.raises(ConfigError):
        train_model(small_config(), empty, val_set)
    with pytest.raises(ConfigError):
        train_model(small_config(), train_set, empty)


def test_non_finite_inputs_abort(sets):
    _, val_set, _ = sets
    rng = np.random.default_rng(0)
    poisoned = planted_dataset(rng, 16)
    poisoned.episodes[3, 10, 5] = np.nan
    with pytest.raises(NumericError):
        train_model(small_config(epochs=1, batch_size=16), poisoned, val_set)


def test_mid_training_blowup_reports_epoch_and_batch(sets, monkeypatch):
    train_set, val_set, _ = sets

    class ExplodingModel:
        def parameters(self):
            return []

        def loss(self, x, y, batch, n_total, training, rng=None):
            raise NumericError("kernel overflow")

    from dklshift import train as train_mod

    monkeypatch.setattr(train_mod, "init_model", lambda *a, **k: ExplodingModel())
    with pytest.raises(NumericError, match=r"epoch 1, batch 0: kernel overflow"):
        train_model(small_config(epochs=1), train_set, val_set)


# ---------------------------------------------------------------------------
# experiments and aggregation


def test_run_experiment_runs_every_kind_and_seed(sets):
    train_set, val_set, test_set = sets
    experiment = run_experiment(
        small_config(epochs=1),
        train_set,
        val_set,
        test_set,
        model_kinds=("lstm", "dkl"),
        n_runs=2,
        base_seed=7,
    )
    assert experiment.failures == []
    for kind in ("lstm", "dkl"):
        runs = experiment.completed(kind)
        assert [r.seed for r in runs] == [7, 8]
        for run in runs:
            assert run.model_kind == kind
            assert run.val_report is not None and run.test_report is not None
    best = experiment.best_run("lstm")
    assert best.best_val_auc == max(r.best_val_auc for r in experiment.completed("lstm"))


def test_run_experiment_records_failures_and_continues(sets):
    _, val_set, test_set = sets
    rng = np.random.default_rng(1)
    poisoned = planted_dataset(rng, 16)
    poisoned.episodes[0, 0, 0] = np.inf
    experiment = run_experiment(
        small_config(epochs=1, batch_size=16),
        poisoned,
        val_set,
        test_set,
        model_kinds=("lstm",),
        n_runs=2,
    )
    assert experiment.completed("lstm") == []
    assert len(experiment.failures) == 2
    assert all(f["model_kind"] == "lstm" and "NumericError" in f["error"] for f in experiment.failures)
    with pytest.raises(ConfigError):
        experiment.best_run("lstm")
    rows = aggregate_rows(experiment, model_kinds=("lstm",))
    assert rows[0]["n_runs"] == 0 and rows[0]["n_failures"] == 2
    assert np.isnan(rows[0]["test_auc_roc_mean"])


def test_parallel_experiment_matches_serial(sets):
    train_set, val_set, test_set = sets
    kwargs = dict(model_kinds=("lstm",), n_runs=2, base_seed=0)
    serial = run_experiment(small_config(epochs=1), train_set, val_set, test_set, jobs=1, **kwargs)
    parallel = run_experiment(small_config(epochs=1), train_set, val_set, test_set, jobs=2, **kwargs)
    serial_rows = aggregate_rows(serial, model_kinds=("lstm",))
    parallel_rows = aggregate_rows(parallel, model_kinds=("lstm",))
    assert serial_rows == parallel_rows


def test_aggregate_single_run_reports_zero_std(sets):
    train_set, val_set, test_set = sets
    experiment = run_experiment(
        small_config(epochs=1), train_set, val_set, test_set, model_kinds=("lstm",), n_runs=1
    )
    row = aggregate_rows(experiment, model_kinds=("lstm",))[0]
    assert row["single_run"] is True
    assert row["test_auc_roc_std"] == 0.0


def test_aggregate_csv_is_parsable_and_exact(sets):
    train_set, val_set, test_set = sets
    experiment = run_experiment(
        small_config(epochs=1), train_set, val_set, test_set, model_kinds=("lstm", "bilstm"), n_runs=2
    )
    rows = aggregate_rows(experiment, model_kinds=("lstm", "bilstm"))
    text = aggregate_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert [r["model_kind"] for r in parsed] == ["lstm", "bilstm"]
    for parsed_row, row in zip(parsed, rows):
        # repr round-trips every float bit-exactly
        assert float(parsed_row["test_auc_roc_mean"]) == row["test_auc_roc_mean"]
        assert float(parsed_row["test_cox_slope_std"]) == row["test_cox_slope_std"]
    assert aggregate_csv(rows) == text
    assert aggregate_csv([]) == ""
