import numpy as np
import pytest
from _instances import tiny_instance

from hydrocrl import rcgnn
from hydrocrl.dataio import GraphSpec, SplitSpec, WatershedSeries, generate_synthetic, split
from hydrocrl.iwtrain import IWConfig
from hydrocrl.rcgnn import (Objective, TrainConfig, TrainingDiverged, backward, forward, gradient_check,
                            gru_step, init_params, load_checkpoint, loss_and_grad, save_checkpoint, train,
                            zero_params)


def _sig(x):
    return 1 / (1 + np.exp(-x))


class TestStep:
    def test_zero(self):
        p = zero_params(2, 3)
        H, (r, z, c) = gru_step(p, np.ones((4, 4)), np.ones((4, 2)), np.zeros((4, 3)), return_gates=True)
        assert np.all(H == 0) and np.all(r == 0.5) and np.all(z == 0.5) and np.all(c == 0)

    def test_single_cell_gru(self):
        p = init_params(3, 5, seed=1)
        rng = np.random.default_rng(0)
        x, h = rng.normal(size=(1, 3)), rng.normal(size=(1, 5))
        r = _sig(x @ p.W_r + h @ p.U_r + p.b_r)
        z = _sig(x @ p.W_z + h @ p.U_z + p.b_z)
        c = np.tanh(x @ p.W_h + (r * h) @ p.U_h + p.b_h)
        ref = z * h + (1 - z) * c
        np.testing.assert_allclose(gru_step(p, np.eye(1), x, h), ref, rtol=1e-13, atol=1e-15)

    def test_row_normalization(self):
        p = init_params(2, 3, seed=2)
        rng = np.random.default_rng(1)
        A = rng.uniform(0.1, 1, (3, 3))
        X, H = rng.normal(size=(3, 2)), rng.normal(size=(3, 3))
        np.testing.assert_allclose(gru_step(p, 7 * A, X, H), gru_step(p, A, X, H), rtol=1e-13)

    def test_update_gate_saturation(self):
        p = init_params(2, 4, seed=3)
        p.b_z[:] = 60.0
        rng = np.random.default_rng(2)
        H = rng.normal(size=(3, 4)) * 5
        out = gru_step(p, np.ones((3, 3)), rng.normal(size=(3, 2)), H)
        np.testing.assert_allclose(out, H, rtol=0, atol=1e-9)

    def test_gate_ranges(self):
        p = init_params(2, 6, seed=4)
        rng = np.random.default_rng(3)
        H = np.zeros((5, 6))
        for _ in range(20):
            H, (r, z, c) = gru_step(p, rng.uniform(size=(5, 5)), rng.normal(size=(5, 2)) * 3, H, return_gates=True)
            assert np.all((r > 0) & (r < 1)) and np.all((z > 0) & (z < 1)) and np.all(np.abs(c) < 1)

    def test_errors(self):
        p = zero_params(2, 3)
        with pytest.raises(ValueError):
            gru_step(p, np.ones((2, 2)), np.ones((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="X_t"):
            gru_step(p, np.ones((2, 2)), np.array([[np.nan, 1], [1, 1]]), np.zeros((2, 3)))


class TestForward:
    def test_zero_params(self):
        d = generate_synthetic(3, 3, 0)
        Z, pred = forward(zero_params(3, 4), d.graph, d.features)
        assert Z.shape == (36, 4) and np.all(pred == 0)

    def test_non_negative(self):
        d = generate_synthetic(4, 3, 1)
        p = init_params(3, 8, seed=5)
        p.c2[:] = -0.3
        assert np.all(forward(p, d.graph, d.features)[1] >= 0)

    def test_permutation_equivariance(self):
        d = generate_synthetic(6, 3, 2)
        p = rcgnn.fit_scaling(init_params(3, 8, seed=6), d)
        perm = np.random.default_rng(4).permutation(6)
        inv = np.argsort(perm)
        A = d.graph.adjacency[np.ix_(perm, perm)]
        g2 = GraphSpec(A, int(inv[d.graph.outlet]))
        _, ref = forward(p, d.graph, d.features)
        _, out = forward(p, g2, d.features[:, perm, :])
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)

    def test_length_one(self):
        p, g, X, _, _ = tiny_instance(0, T=1)
        H = gru_step(p, g.adjacency, (X[0] - p.x_mean) / p.x_std, np.zeros((g.n, p.h)))
        z = H[g.outlet]
        a1 = z @ p.V1 + p.c1
        o = np.where(a1 > 0, a1, p.alpha * a1) @ p.V2 + p.c2[0]
        Z, pred = forward(p, g, X)
        np.testing.assert_allclose(Z[0], z, rtol=1e-14)
        assert pred[0] == pytest.approx(p.y_scale * max(o, 0.0), rel=1e-13)


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("loss", ["mse", "abs"])
    def test_finite_difference(self, seed, loss):
        p, g, X, y, w = tiny_instance(seed)
        errs = gradient_check(p, g, X, y, w, Objective(loss=loss))
        assert max(errs.values()) < 1e-4, errs

    @pytest.mark.parametrize("mode", ["project", "penalty"])
    def test_constraint_objectives(self, mode):
        p, g, X, y, w = tiny_instance(11, T=24)
        budgets = np.array([0.5, 40.0]) if mode == "project" else np.array([1.0, 2.0])
        obj = Objective(project=mode == "project", budgets=budgets, pg_lambda=0.7 if mode == "penalty" else 0.0)
        errs = gradient_check(p, g, X, y, w, obj)
        assert max(errs.values()) < 1e-4, errs

    def test_with_dropout_masks(self):
        p, g, X, y, w = tiny_instance(5, h_mid=3)
        rng = np.random.default_rng(0)
        masks = (rng.binomial(1, 0.8, (6, 4)) / 0.8, rng.binomial(1, 0.8, (6, 3)) / 0.8)
        assert max(gradient_check(p, g, X, y, w, masks=masks).values()) < 1e-4

    def test_zero_weights(self):
        p, g, X, y, _ = tiny_instance(1)
        grads = backward(p, g, X, np.zeros(6), y)
        assert all(np.all(v == 0) for v in grads.values())

    def test_linear_in_weights(self):
        p, g, X, y, w = tiny_instance(2)
        g1 = backward(p, g, X, w, y)
        g2 = backward(p, g, X, 2 * w, y)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-9, atol=1e-300)

    def test_deterministic(self):
        p, g, X, y, w = tiny_instance(3)
        a, b = loss_and_grad(p, g, X, y, w), loss_and_grad(p, g, X, y, w)
        assert a[0] == b[0] and all(np.array_equal(a[1][k], b[1][k]) for k in a[1])


def _tiny_series(T=36, target=None, seed=0):
    rng = np.random.default_rng(seed)
    X = np.abs(rng.normal(size=(T, 2, 2))) + 0.1
    y = rng.uniform(1, 5, T) if target is None else np.full(T, float(target))
    return WatershedSeries(GraphSpec(np.array([[1.0, 1.0], [0.0, 1.0]]), 0), X,
                           ("precipitation", "evapotranspiration"), y)


class TestTrain:
    def test_constant_target(self):
        d = _tiny_series(target=5.0)
        cfg = TrainConfig(lr=0.05, weight_decay=0.0, epochs=600, hidden=4, dropout=0.0, seed=1)
        res = train(None, d, None, cfg)
        _, pred = forward(res.params, d.graph, d.features)
        assert np.mean((pred - 5.0) ** 2) < 1e-3

    def test_bit_identical_runs(self):
        d = _tiny_series()
        cfg = TrainConfig(lr=0.01, epochs=15, hidden=4, seed=3, mode="crl")
        a, b = train(None, d, d, cfg), train(None, d, d, cfg)
        assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
        for k, v in a.params.arrays().items():
            assert v.tobytes() == b.params.arrays()[k].tobytes()

    def test_pg_zero_lambda_matches_plain(self):
        d = _tiny_series(seed=4)
        base = dict(lr=0.01, epochs=10, hidden=4, seed=2)
        a = train(None, d, d, TrainConfig(mode="plain", **base))
        b = train(None, d, d, TrainConfig(mode="pg", pg_lambda=0.0, **base))
        assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]

    def test_iw_log(self, tmp_path):
        d = _tiny_series(seed=5)
        cfg = TrainConfig(lr=0.01, epochs=5, hidden=4, iw=IWConfig(enabled=True, K=4), iw_epochs=6)
        res = train(None, d, d, cfg)
        iw_rows = [r for r in res.log if r["stage"] == "iw_head"]
        assert len(iw_rows) == 6
        assert all(r["iw_K"] == 4 and 1 <= r["iw_nonempty"] <= 4 and r["iw_max_weight"] >= 1 for r in iw_rows)
        header = res.write_log(tmp_path / "log.csv").read_text().splitlines()[0]
        assert header == "stage,epoch,loss,val_nnse,iw_K,iw_nonempty,iw_max_weight"
        assert cfg.name == "plain-iw"

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.weight_decay, cfg.hidden, cfg.dropout) == (0.001, 0.0005, 256, 0.2)
        assert cfg.alpha == 0.01

    def test_divergence(self, monkeypatch):
        monkeypatch.setattr(rcgnn, "loss_and_grad", lambda *a, **k: (float("nan"), {}))
        with pytest.raises(TrainingDiverged, match="epoch 0"):
            train(None, _tiny_series(), None, TrainConfig(epochs=3, hidden=4))

    def test_crl_train_zero_violations(self):
        d = generate_synthetic(3, 5, 1)
        tr, va, _ = split(d, SplitSpec(3, 1, 1))
        res = train(None, tr, va, TrainConfig(mode="crl", lr=0.01, epochs=20, hidden=8))
        from hydrocrl.constraints import violation_report

        assert violation_report(rcgnn.predict(res.params, tr, project=True), tr).fraction == 0.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p, *_ = tiny_instance(7, h_mid=3)
        path = save_checkpoint(p, tmp_path / "ck.csv", {"mode": "crl"})
        q, meta = load_checkpoint(path)
        assert meta == {"mode": "crl"}
        for k, v in p.arrays().items():
            assert v.shape == getattr(q, k).shape and v.tobytes() == getattr(q, k).tobytes()
        assert (q.alpha, q.y_scale) == (p.alpha, p.y_scale)
        assert q.x_mean.tobytes() == p.x_mean.tobytes() and q.x_std.tobytes() == p.x_std.tobytes()

    def test_header(self, tmp_path):
        p = init_params(3, 4)
        lines = save_checkpoint(p, tmp_path / "ck.csv").read_text().splitlines()
        assert lines[:5] == ["format_version,1", "n,n/a", "m,3", "h,4", "h_mid,4"]

    def test_bad_version(self, tmp_path):
        path = save_checkpoint(init_params(2, 2), tmp_path / "ck.csv")
        path.write_text(path.read_text().replace("format_version,1", "format_version,9"))
        with pytest.raises(ValueError, match="unsupported"):
            load_checkpoint(path)

    def test_validation(self):
        p = init_params(2, 3)
        with pytest.raises(ValueError, match="slope"):
            rcgnn.ModelParameters(**{**p.arrays(), "alpha": 1.5})
        with pytest.raises(ValueError, match="V1 has shape"):
            p.with_arrays({"V1": np.zeros((2, 2))})
