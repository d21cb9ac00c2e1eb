import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_threshold, f_beta_at
from tarnn_hybrid.errors import ConfigError, TrainingError
from tarnn_hybrid.model import ModelConfig, weighted_bce_logits
from tarnn_hybrid.preprocess import stack_samples
from tarnn_hybrid.train import (
    EarlyStopping, TrainConfig, _val_logits, optimize_threshold, split_validation, train_model, weighted_bce,
)


def _bce(p, y):
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def test_weighted_bce_examples():
    assert abs(weighted_bce([0.5, 0.5], [1, 0], 0.7) - 0.5 * math.log(2)) < 1e-15
    assert abs(weighted_bce([0.5, 0.5], [1, 0], 0.7) - 0.3466) < 1e-4
    assert weighted_bce([1 - 1e-7], [1], 0.3) < 1e-7
    assert weighted_bce([0.3], [1], 0.9) > weighted_bce([0.3], [1], 0.5)


def test_weighted_bce_half_delta(rng):
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, 30)
        y = rng.integers(0, 2, 30)
        assert abs(weighted_bce(p, y, 0.5) - 0.5 * _bce(p, y)) < 1e-12


def test_weighted_bce_clamps_with_warning():
    with pytest.warns(RuntimeWarning, match="clamped"):
        value = weighted_bce([0.0, 1.0], [0, 1], 0.7)
    assert 0 <= value < 1e-6
    with pytest.raises(ConfigError):
        weighted_bce([0.5], [1, 0], 0.7)


def test_threshold_spec_example():
    t = optimize_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert t == 0.5
    assert f_beta_at([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], t) == 1.0


def test_threshold_degenerate_labels():
    with pytest.warns(RuntimeWarning, match="positive"):
        assert optimize_threshold([0.2, 0.7], [1, 1]) == 0.0
    with pytest.warns(RuntimeWarning, match="negative"):
        assert optimize_threshold([0.2, 0.7], [0, 0]) == 0.5


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_threshold_matches_exhaustive_oracle(data):
    n = data.draw(st.integers(2, 40))
    # coarse grid so ties occur
    scores = data.draw(st.lists(st.integers(0, 20).map(lambda k: k / 20), min_size=n, max_size=n))
    labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda ls: 0 < sum(ls) < len(ls)))
    t = optimize_threshold(scores, labels)
    best_t, best_f = exhaustive_threshold(scores, labels)
    assert t == best_t
    assert f_beta_at(scores, labels, t) == best_f
    assert f_beta_at(scores, labels, t) >= f_beta_at(scores, labels, 0.5)


def test_threshold_matches_dense_grid(rng):
    # no grid point can beat the midpoint optimum
    grid = np.linspace(0, 1, 10_000)
    for _ in range(5):
        scores = rng.random(60)
        labels = (rng.random(60) < scores).astype(int)
        t = optimize_threshold(scores, labels)
        best_grid = max(f_beta_at(scores, labels, g) for g in grid)
        assert abs(f_beta_at(scores, labels, t) - best_grid) < 1e-12


def test_early_stopping_semantics():
    stop = EarlyStopping(patience=1)
    assert not stop.step(0, 1.0)
    assert not stop.step(1, 0.5)
    assert stop.step(2, 0.6)
    assert stop.best_epoch == 1
    stop = EarlyStopping(patience=3)
    for epoch, loss in enumerate([3.0, 2.0, 2.5, 1.0, 1.5, 1.5]):
        assert not stop.step(epoch, loss)
    assert stop.step(6, 1.2) and stop.best_epoch == 3


def test_config_errors():
    for bad in ({"delta": 0.0}, {"patience": 0}, {"validation_fraction": 1.0}, {"learning_rate": 0.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_validation_split_is_patient_level(small_data):
    batch = small_data["train_batch"]
    tr, va = split_validation(batch, 0.2, 0)
    assert not {batch.patient_ids[i] for i in tr} & {batch.patient_ids[i] for i in va}
    assert len(tr) + len(va) == len(batch)


def _model_config(small_data, small_matrix):
    pc = small_data["config"]
    return ModelConfig(d=small_matrix.dim, h=4, heads=2, t_s=pc.t_s, k_max=pc.k_max,
                       demo_dim=small_data["train_batch"].demo.shape[1])


def test_training_is_deterministic_and_restores_best(small_data, small_matrix):
    cfg = TrainConfig(max_epochs=6, patience=2, seed=4)
    mc = _model_config(small_data, small_matrix)
    m1, h1 = train_model(small_data["train_batch"], cfg, mc, small_matrix)
    m2, h2 = train_model(small_data["train_batch"], cfg, mc, small_matrix)
    assert h1 == h2
    assert h1.epochs_run <= 6
    assert h1.best_epoch == int(np.argmin(h1.val_loss))
    for (n, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        assert (p == q).all(), n
    assert 0.0 <= h1.chosen_threshold <= 1.0
    tsv = h1.to_tsv().splitlines()
    assert tsv[0].split("\t") == ["epoch", "train_loss", "val_loss", "val_auc", "val_f2"]
    assert len(tsv) == h1.epochs_run + 1
    for row in tsv[1:]:
        [float(cell) for cell in row.split("\t")]


def test_early_stop_returns_best_epoch_params(small_data, small_matrix):
    # a huge learning rate makes validation loss worsen quickly
    cfg = TrainConfig(max_epochs=30, patience=1, learning_rate=0.5, seed=1)
    mc = _model_config(small_data, small_matrix)
    model, hist = train_model(small_data["train_batch"], cfg, mc, small_matrix)
    assert hist.epochs_run <= hist.best_epoch + 2
    _, va = split_validation(small_data["train_batch"], cfg.validation_fraction, cfg.seed)
    logits, targets = _val_logits(model, small_data["train_batch"].take(va))
    assert abs(float(weighted_bce_logits(logits, targets, cfg.delta)) - hist.val_loss[hist.best_epoch]) < 1e-6


def test_single_class_training_raises(small_data, small_matrix):
    samples = [s for s in small_data["train"] if s.target == 0]
    with pytest.raises(TrainingError):
        train_model(samples, TrainConfig(max_epochs=1), _model_config(small_data, small_matrix), small_matrix)
    with pytest.raises(TrainingError):
        train_model(samples[:1], TrainConfig(max_epochs=1), _model_config(small_data, small_matrix), small_matrix)


def test_training_does_not_touch_embedding(small_data, small_matrix):
    mc = _model_config(small_data, small_matrix)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, _ = train_model(stack_samples(small_data["train"]), TrainConfig(max_epochs=2), mc, small_matrix)
    assert np.array_equal(model.embedding.numpy(), small_matrix.rows)
