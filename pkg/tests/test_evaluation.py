import statistics

import numpy as np
import pytest

from faithrep.evaluation import (
    accuracy,
    aggregate,
    explain,
    faithfulness,
    resolve_u_grid,
    rows_to_csv,
    sweep_u,
)
from faithrep.gates import GateParams, make_rng
from faithrep.model import FeatureNet, TrainedModel, glorot, init_feature_net, similarity


def model(rng, with_g=True, gated=False, N=10, D=3, C=3):
    net = init_feature_net(D, 6, 2, 0.0, rng)
    net.biases = [rng.normal(0, 0.2, b.shape) for b in net.biases]
    X_train = rng.normal(size=(N, D))
    W = glorot(6, C, rng) if with_g else None
    if gated:
        return TrainedModel("ours", net, W, X_train, gates=GateParams(rng.uniform(-0.5, 1.5, (N, C)), rng.normal(size=(N, C))))
    return TrainedModel("joint" if with_g else "rps", net, W, X_train, A=rng.normal(size=(N, C)))


def slow_h_label(m, x, U):
    """Top-U truncation and h logits recomputed by explicit loops."""
    coef = m.coefficients()
    rank = m.ranking()
    entries = sorted(np.ndindex(coef.shape), key=lambda nc: (-rank[nc], nc))[:U]
    logits = np.zeros(coef.shape[1])
    for n, c in entries:
        logits[c] += coef[n, c] * similarity(m.net, m.X_train[n], x)
    return int(np.argmax(logits))


class TestMetrics:
    @pytest.mark.parametrize("gated", [False, True])
    def test_faithfulness_recount(self, gated):
        rng = make_rng(1)
        m = model(rng, gated=gated)
        X = rng.normal(size=(25, 3))
        for U in (1, 4, 30):
            g = np.argmax(m.g_proba(X), axis=1)
            agree = sum(int(g[i] == slow_h_label(m, X[i], U)) for i in range(len(X)))
            assert faithfulness(m, X, U) == agree / len(X)

    def test_accuracy_recount(self):
        rng = make_rng(2)
        m = model(rng)
        X, y = rng.normal(size=(30, 3)), rng.integers(0, 3, 30)
        g = np.argmax(m.g_proba(X), axis=1)
        assert accuracy(m, X, y) == sum(int(a == b) for a, b in zip(g, y)) / 30

    def test_h_only_models_use_h_and_are_faithful(self):
        rng = make_rng(3)
        m = model(rng, with_g=False)
        X, y = rng.normal(size=(20, 3)), rng.integers(0, 3, 20)
        h = [slow_h_label(m, X[i], 5) for i in range(20)]
        assert accuracy(m, X, y, 5) == np.mean(np.array(h) == y)
        assert faithfulness(m, X, 5) == 1.0

    def test_empty_input(self):
        m = model(make_rng(0))
        with pytest.raises(ValueError):
            accuracy(m, np.zeros((0, 3)), np.zeros(0))
        with pytest.raises(ValueError):
            faithfulness(m, np.zeros((0, 3)))

    def test_u_grid_resolution(self):
        assert resolve_u_grid([1, 2, 5, 10, 20, 50, 100, None], 12) == [1, 2, 5, 10, 12]

    def test_sweep_rows(self):
        rng = make_rng(4)
        m = model(rng)
        X, y = rng.normal(size=(10, 3)), rng.integers(0, 3, 10)
        rows = sweep_u(m, X, y, [1, 30])
        assert [r.U for r in rows] == [1, 30]
        assert rows[1].faithfulness == faithfulness(m, X, None)


class TestAggregate:
    def test_matches_two_pass_statistics(self):
        rng = np.random.default_rng(0)
        runs = rng.normal(1e6, 1.0, size=(10, 4))
        agg = aggregate(list(runs))
        for j in range(4):
            col = [float(v) for v in runs[:, j]]
            assert agg.mean[j] == pytest.approx(statistics.fmean(col), rel=1e-15)
            assert agg.se[j] == pytest.approx(statistics.stdev(col) / np.sqrt(10), rel=1e-9)

    def test_needs_two_runs(self):
        with pytest.raises(ValueError):
            aggregate([np.ones(3)])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aggregate([np.ones(3), np.ones(4)])


class TestExplain:
    def single_influence(self):
        net = FeatureNet([], [], _in_dim=2)
        X_train = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        A = np.zeros((3, 2))
        A[2, 1] = 0.5
        return TrainedModel("joint", net, np.array([[0.0, 1.0], [0.0, 1.0]]), X_train, A=A)

    def test_single_record(self):
        ex = explain(self.single_influence(), np.array([2.0, 1.0]), top_m=5)
        assert ex.g_label == 1 and ex.h_label == 1 and ex.faithful
        assert len(ex.records) == 1
        r = ex.records[0]
        assert (r.n, r.c, r.coefficient, r.similarity, r.contribution) == (2, 1, 0.5, 3.0, 1.5)

    def test_top_m_zero(self):
        ex = explain(self.single_influence(), np.array([2.0, 1.0]), top_m=0)
        assert ex.records == [] and ex.faithful

    def test_sorted_by_absolute_contribution(self):
        rng = make_rng(5)
        m = model(rng)
        ex = explain(m, rng.normal(size=3), top_m=4)
        mags = [abs(r.contribution) for r in ex.records]
        assert mags == sorted(mags, reverse=True)
        assert all(r.c == ex.h_label for r in ex.records)
        assert ex.to_dict()["records"][0]["n"] == ex.records[0].n


class TestCsv:
    def test_floats_round_trip_exactly(self):
        text = rows_to_csv([{"dataset": "d", "U": 3, "accuracy": 0.1 + 0.2}], ["dataset", "U", "accuracy"])
        assert text.splitlines() == ["dataset,U,accuracy", "d,3,0.30000000000000004"]
