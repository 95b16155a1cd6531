import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transferlab.models import ArchSpec, build, freeze_all_but_last_dense, snapshot, params_equal
from transferlab.tensor import SeededRng
from transferlab.train import (
    Dataset,
    TrainConfig,
    adam_step,
    best_epoch,
    early_stop_decision,
    evaluate,
    kfold_split,
    predictions,
    stratified_split,
    train_model,
    val_count,
)

CFG = TrainConfig()


def stop_epoch(history, cfg=CFG):
    """First epoch (1-based) at which the rule says stop, or None."""
    for e in range(1, len(history) + 1):
        if early_stop_decision(history[:e], cfg) == "stop":
            return e
    return None


class TestEarlyStopping:
    def test_plateau_after_rise(self):
        h = [0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7]
        assert stop_epoch(h) == 7
        assert best_epoch(h) == 2

    def test_flat_history(self):
        assert early_stop_decision([0.5] * 5, CFG) == "continue"
        assert early_stop_decision([0.5] * 6, CFG) == "stop"
        assert stop_epoch([0.5] * 10) == 6

    def test_strictly_increasing_runs_to_cap(self):
        cfg = TrainConfig(max_epochs=30)
        h = list(np.linspace(0.1, 0.9, 40))
        assert stop_epoch(h, cfg) == 30

    def test_equal_value_does_not_move_best(self):
        h = [0.5, 0.8, 0.6, 0.8, 0.7, 0.7, 0.7]
        assert best_epoch(h) == 2
        assert stop_epoch(h) == 7

    def test_late_improvement_resets(self):
        h = [0.5, 0.5, 0.5, 0.5, 0.6, 0.5, 0.5, 0.5, 0.5, 0.5]
        assert stop_epoch(h) == 10

    def test_min_epochs_respected(self):
        cfg = TrainConfig(min_epochs=8, patience=2)
        assert stop_epoch([0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], cfg) == 8

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(1, 8), st.integers(1, 8))
    def test_rule_bounds(self, h, min_e, patience):
        cfg = TrainConfig(min_epochs=min_e, patience=patience, max_epochs=max(min_e, 25))
        e = stop_epoch(h, cfg)
        if e is not None:
            assert min_e <= e <= cfg.max_epochs
            assert e >= cfg.max_epochs or e - best_epoch(h[:e]) >= patience
        assert len(h) < cfg.max_epochs or e is not None

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(min_epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestAdam:
    def test_first_step_magnitude(self):
        g = SeededRng(0).normal(50) * 10
        g[np.abs(g) < 0.1] = 1.0
        params = {"w": np.zeros(50)}
        adam_step(params, {"w": g}, {}, CFG)
        np.testing.assert_allclose(np.abs(params["w"]), 1e-3, atol=1e-6)
        assert np.all(np.sign(params["w"]) == -np.sign(g))

    def test_zero_gradient(self):
        params = {"w": np.arange(5.0)}
        state = {}
        for _ in range(10):
            adam_step(params, {"w": np.zeros(5)}, state, CFG)
        np.testing.assert_array_equal(params["w"], np.arange(5.0))

    def test_bias_correction_second_step(self):
        # hand-computed two steps with constant gradient 2.0
        params = {"w": np.zeros(1)}
        state = {}
        for _ in range(2):
            adam_step(params, {"w": np.array([2.0])}, state, CFG)
        m = 0.9 * 0.2 + 0.1 * 2.0
        v = 0.999 * 0.004 + 0.001 * 4.0
        m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
        expected = -1e-3 * 2.0 / (2.0 + 1e-8) - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert params["w"][0] == pytest.approx(expected, rel=1e-12)


class TestSplits:
    labels = np.array([0] * 30 + [1] * 30)

    def test_counts_and_disjoint(self):
        s = stratified_split(self.labels, 10, val_fraction=0.2, test_per_class=5, seed=3)
        for part, per in ((s.train, 10), (s.val, 2), (s.test, 5)):
            assert np.sum(self.labels[part] == 0) == per
            assert np.sum(self.labels[part] == 1) == per
        assert not set(s.train) & set(s.val)
        assert not set(s.train) & set(s.test)
        assert not set(s.val) & set(s.test)

    def test_deterministic(self):
        a = stratified_split(self.labels, 7, seed=1, test_per_class=4)
        b = stratified_split(self.labels, 7, seed=1, test_per_class=4)
        for x, y in zip((a.train, a.val, a.test), (b.train, b.val, b.test)):
            np.testing.assert_array_equal(x, y)

    def test_nested_train_fixed_test(self):
        small = stratified_split(self.labels, 5, test_per_class=6, seed=2, val_fraction=0)
        big = stratified_split(self.labels, 15, test_per_class=6, seed=2, val_fraction=0)
        assert set(small.train) <= set(big.train)
        np.testing.assert_array_equal(small.test, big.test)

    def test_too_many(self):
        with pytest.raises(ValueError):
            stratified_split(self.labels, 29, val_fraction=0.2)

    def test_val_count(self):
        assert val_count(5, 0.2) == 1
        assert val_count(100, 0.2) == 20
        assert val_count(3, 0.2, min_val=2) == 2
        assert val_count(10, 0.0) == 0

    def test_kfold_stratified(self):
        labels = np.array([0] * 10 + [1] * 10)
        folds = kfold_split(labels, 5, seed=0)
        assert len(folds) == 5
        for f in folds:
            assert np.sum(labels[f] == 0) == 2 and np.sum(labels[f] == 1) == 2
        assert sorted(np.concatenate(folds).tolist()) == list(range(20))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 5), st.integers(0, 1000))
    def test_split_properties(self, n, t, seed):
        labels = np.repeat([0, 1, 2], 20)
        s = stratified_split(labels, n, 0.25, t, seed)
        parts = [set(s.train), set(s.val), set(s.test)]
        assert sum(map(len, parts)) == len(set().union(*parts))
        assert all(0 <= i < 60 for p in parts for i in p)


class LogitModel:
    """Stand-in returning fixed logits, enough for evaluate()."""

    outputs = 1

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64).reshape(-1, 1)

    def predict(self, x, batch_size=64, start=0, stop=None):
        return self.logits[np.asarray(x, dtype=np.int64)]

    def loss(self):
        from transferlab.layers import sigmoid_bce
        return sigmoid_bce


class TestEvaluate:
    def test_zero_logits_balanced(self):
        data = Dataset(np.arange(10), [0, 1] * 5)
        acc, loss = evaluate(LogitModel(np.zeros(10)), data)
        assert acc == 0.5
        assert loss == pytest.approx(math.log(2))

    def test_perfect(self):
        y = np.array([0, 1, 1, 0, 1])
        acc, _ = evaluate(LogitModel(np.where(y == 1, 3.0, -3.0)), Dataset(np.arange(5), y))
        assert acc == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(LogitModel([]), Dataset(np.zeros(0), []))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=6), st.floats(0.01, 100))
    def test_positive_scaling_invariant(self, row, c):
        z = np.array([row])
        assert predictions(z).tolist() == predictions(z * c).tolist()
        assert predictions(z[:, :1]).tolist() == predictions(z[:, :1] * c).tolist()


def tiny_data(n, seed, size=16):
    rng = SeededRng(seed)
    x = rng.uniform((n, 1, size, size)).astype(np.float32)
    y = np.arange(n) % 2
    x[y == 1, :, :, : size // 2] += 1.0
    return Dataset(x, y)


class TestTrainModel:
    def test_single_sample_overfits(self):
        model = build(ArchSpec("small-cnn", (1, 16, 16), "1/8", seed=0))
        data = tiny_data(1, 0)
        rep = train_model(model, data, None, TrainConfig(max_epochs=50, min_epochs=50, seed=0))
        assert max(h.train_acc for h in rep.history) == 1.0

    def test_deterministic(self):
        def run():
            model = build(ArchSpec("mini", (1, 16, 16), seed=2))
            rep = train_model(model, tiny_data(12, 1), tiny_data(4, 2), TrainConfig(max_epochs=6, seed=5))
            return snapshot(model), [(h.train_loss, h.val_acc) for h in rep.history]
        a, b = run(), run()
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_frozen_conv_unchanged_and_restore_best(self):
        model = build(ArchSpec("mini-frozen", (1, 16, 16), seed=3))
        freeze_all_but_last_dense(model)
        before = snapshot(model)
        val = tiny_data(8, 4)
        rep = train_model(model, tiny_data(16, 3), val, TrainConfig(max_epochs=12, batch_size=4, seed=1))
        assert params_equal(model, before, model.backbone_layers())
        assert not params_equal(model, before)
        assert rep.best_epoch <= rep.epochs_ran <= 12
        assert evaluate(model, val)[0] == max(h.val_acc for h in rep.history)

    def test_empty_train(self):
        model = build(ArchSpec("mini", (1, 16, 16)))
        with pytest.raises(ValueError):
            train_model(model, Dataset(np.zeros((0, 1, 16, 16)), []), None, CFG)
