import dataclasses

import numpy as np
import pytest

from adapformer import numkit as nk
from adapformer import training
from adapformer.model import Adapformer
from adapformer.numkit import Tensor
from adapformer.training import (NumericalError, TrainConfig, batch_loss, fit, load_checkpoint,
                                 run_seeds, save_checkpoint, total_loss)


def windows(rng, cfg, n):
    t = np.arange(n + cfg.lookback + cfg.horizon)[:, None] + np.arange(cfg.n_channels)[None] * 3
    series = np.sin(t / 4.0) + 0.1 * rng.normal(size=t.shape)
    x = np.stack([series[i:i + cfg.lookback] for i in range(n)])
    y = np.stack([series[i + cfg.lookback:i + cfg.lookback + cfg.horizon] for i in range(n)])
    return x, y


class TestModel:
    @pytest.mark.parametrize("predictor", ["acf", "ci", "cd", "mlp"])
    def test_output_shapes(self, tiny_cfg, rng, predictor):
        m = Adapformer(dataclasses.replace(tiny_cfg, predictor=predictor), seed=0)
        out = m.forward(rng.normal(size=(3, 8, 4)))
        assert out.pred.shape == (3, 4, 4) and out.w_dec.shape == (3, 4, 4)

    def test_selection_width(self, tiny_cfg, rng):
        m = Adapformer(dataclasses.replace(tiny_cfg, topk=3), seed=0)
        idx = m.forward(rng.normal(size=(2, 8, 4))).index
        assert idx.shape == (2, 4, 3) and np.array_equal(idx[..., 0], np.tile(np.arange(4), (2, 1)))

    def test_shared_predictor_has_one_set(self, tiny_cfg):
        m = Adapformer(dataclasses.replace(tiny_cfg, share_predictor=True), seed=0)
        assert m.head.Wa.shape[0] == 1
        assert Adapformer(tiny_cfg, seed=0).head.Wa.shape[0] == 4

    def test_bad_input_shape(self, tiny_cfg, rng):
        with pytest.raises(ValueError, match="windows of shape"):
            Adapformer(tiny_cfg).forward(rng.normal(size=(2, 7, 4)))

    def test_ace_toggle_leaves_other_weights(self, tiny_cfg):
        a = Adapformer(tiny_cfg, seed=5).state_dict()
        b = Adapformer(dataclasses.replace(tiny_cfg, use_ace=False), seed=5).state_dict()
        assert set(a) - set(b) == {"ace.down", "ace.up"}
        assert all(np.array_equal(a[k], b[k]) for k in b)

    def test_state_dict_round_trip(self, tiny_cfg, rng):
        x = rng.normal(size=(2, 8, 4))
        a, b = Adapformer(tiny_cfg, seed=1), Adapformer(tiny_cfg, seed=2)
        b.load_state_dict(a.state_dict())
        assert np.array_equal(a.predict(x), b.predict(x))

    def test_load_rejects_missing(self, tiny_cfg):
        state = Adapformer(tiny_cfg).state_dict()
        del state["simblock.W"]
        with pytest.raises(KeyError):
            Adapformer(tiny_cfg).load_state_dict(state)

    def test_predict_is_eval_mode(self, rng, tiny_cfg):
        m = Adapformer(dataclasses.replace(tiny_cfg, dropout=0.5), seed=0)
        x = rng.normal(size=(3, 8, 4))
        assert np.array_equal(m.predict(x), m.predict(x))
        assert nk.is_training()

    def test_scale_equivariance(self, tiny_cfg, rng):
        # RevIN makes forecasts follow affine changes of each input channel
        m = Adapformer(tiny_cfg, seed=0)
        x = rng.normal(size=(2, 8, 4))
        a, b = np.array([1.0, 3.0, 0.5, 2.0]), np.array([10.0, -4.0, 0.0, 7.0])
        np.testing.assert_allclose(m.predict(x * a + b), m.predict(x) * a + b, atol=1e-9)


class TestLoss:
    def test_perfect(self):
        y = np.ones((1, 2, 2))
        w = Tensor(np.ones((1, 2, 2)))
        loss, _, _ = total_loss(y, y, w, np.ones((1, 1, 2)))
        assert loss.data == 0.0

    def test_combination(self):
        # mse 1 and aux 4 over N=2 gives 1 + 4/2
        pred, target = np.zeros((1, 1, 2)), np.ones((1, 1, 2))
        w_dec = Tensor(np.array([[[1.0, 1.0], [1.0, 1.0]]]))
        y_norm = np.zeros((1, 1, 2))
        loss, mse, aux = total_loss(pred, target, w_dec, y_norm)
        assert (mse.data, aux.data, loss.data) == (1.0, 4.0, 3.0)

    def test_no_aux_is_mse(self, rng):
        p, y = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 2))
        loss, mse, aux = total_loss(p, y, Tensor(rng.random((2, 2, 2))), use_aux=False)
        assert loss is mse and aux is None

    def test_no_aux_zero_simblock_gradient(self, tiny_cfg, rng):
        m = Adapformer(tiny_cfg, seed=0)
        x, y = windows(rng, tiny_cfg, 4)
        loss, _, _, _ = batch_loss(m, x, y, use_aux=False)
        grads = dict(zip([n for n, _ in m.named_parameters()], nk.backward(loss, m.parameters())))
        assert not grads["simblock.W"].any() and not grads["simblock.b"].any()
        loss, _, _, _ = batch_loss(m, x, y, use_aux=True)
        grads = dict(zip([n for n, _ in m.named_parameters()], nk.backward(loss, m.parameters())))
        assert grads["simblock.W"].any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            total_loss(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))

    def test_aux_scale_modes(self, rng):
        p, y = rng.normal(size=(1, 6, 2)), rng.normal(size=(1, 6, 2))
        w = Tensor(np.full((1, 2, 2), 0.5))
        _, _, raw = total_loss(p, y, w, y, aux_scale="raw")
        _, _, scaled = total_loss(p, y, w, y)
        g = y[0].T @ y[0]
        assert np.isclose(raw.data, np.sum((0.5 - g) ** 2)) and np.isclose(scaled.data, np.sum((0.5 - g / 6) ** 2))
        with pytest.raises(ValueError):
            TrainConfig(aux_scale="other")


def small_setup(rng, tiny_cfg, n_train=24, n_val=8):
    x, y = windows(rng, tiny_cfg, n_train + n_val)
    return (x[:n_train], y[:n_train]), (x[n_train:], y[n_train:])


class TestFit:
    def test_zero_lr(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        m = Adapformer(tiny_cfg, seed=0)
        before = m.state_dict()
        res = fit(m, train, val, TrainConfig(lr=0.0, batch_size=24, max_epochs=3))
        assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())
        assert len({round(h["train_loss"], 12) for h in res.history}) == 1
        assert len({h["val_loss"] for h in res.history}) == 1

    def test_overfit_single_sample(self, tiny_cfg, rng):
        x, y = windows(rng, tiny_cfg, 1)
        m = Adapformer(tiny_cfg, seed=0)
        state = nk.AdamState.for_params(m.parameters())
        cfg = TrainConfig(lr=1e-3, batch_size=1)
        losses = [training.train_epoch(m, x, y, state, 1e-3, cfg, epoch=e) for e in range(51)]
        drops = sum(b < a for a, b in zip(losses, losses[1:]))
        assert drops >= 45

    def test_overfit_reaches_floor(self, tiny_cfg, rng):
        # forecast error on one sample falls below 1e-3 within 500 Adam steps
        x, y = windows(rng, tiny_cfg, 1)
        m = Adapformer(tiny_cfg, seed=0)
        state = nk.AdamState.for_params(m.parameters())
        best = np.inf
        for _ in range(500):
            m.zero_grad()
            loss, mse, _, _ = batch_loss(m, x, y)
            best = min(best, float(mse.data))
            nk.adam_step(m.parameters(), nk.backward(loss, m.parameters()), state, 1e-3)
        assert best < 1e-3

    def test_deterministic(self, tiny_cfg, rng):
        train, val = small_setup(rng, dataclasses.replace(tiny_cfg, dropout=0.1))
        cfg = dataclasses.replace(tiny_cfg, dropout=0.1)
        runs = [fit(Adapformer(cfg, seed=3), train, val, TrainConfig(seed=3, max_epochs=3, batch_size=8))
                for _ in range(2)]
        assert runs[0].history == runs[1].history

    def test_lr_halving(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        res = fit(Adapformer(tiny_cfg), train, val, TrainConfig(max_epochs=4, patience=10))
        assert [h["lr"] for h in res.history] == [1e-3, 5e-4, 2.5e-4, 1.25e-4]

    def test_patience_restores_first_epoch(self, tiny_cfg, rng, monkeypatch):
        train, val = small_setup(rng, tiny_cfg)
        vals = iter([1.0, 1.5, 2.0, 2.5, 3.0, 3.5])
        seen = []

        def fake_eval(model, x, y, use_aux=True, batch_size=256, aux_scale="length"):
            seen.append(model.state_dict())
            return next(vals)

        monkeypatch.setattr(training, "evaluate_loss", fake_eval)
        m = Adapformer(tiny_cfg)
        res = fit(m, train, val, TrainConfig(max_epochs=10, patience=3))
        assert len(res.history) == 4 and res.stopped_early and res.checkpoint.epoch == 1
        assert all(np.array_equal(seen[0][k], v) for k, v in m.state_dict().items())

    def test_never_past_best_plus_patience(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        res = fit(Adapformer(tiny_cfg), train, val, TrainConfig(max_epochs=20, lr=5e-3))
        assert len(res.history) <= res.checkpoint.epoch + 3

    def test_best_checkpoint(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        res = fit(Adapformer(tiny_cfg), train, val, TrainConfig(max_epochs=4))
        assert res.checkpoint.best_val <= min(h["val_loss"] for h in res.history)

    def test_nan_loss_raises(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        m = Adapformer(tiny_cfg)
        m.head.bb.data[:] = np.inf
        with pytest.raises(NumericalError):
            fit(m, train, val, TrainConfig(max_epochs=1))

    def test_empty_val(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        with pytest.raises(ValueError):
            fit(Adapformer(tiny_cfg), train, (val[0][:0], val[1][:0]), TrainConfig(max_epochs=1))


class TestCheckpoint:
    def test_round_trip(self, tiny_cfg, rng, tmp_path):
        train, val = small_setup(rng, tiny_cfg)
        m = Adapformer(tiny_cfg, seed=4)
        res = fit(m, train, val, TrainConfig(max_epochs=2, seed=4))
        res.checkpoint.extra = {"note": "x"}
        path = save_checkpoint(tmp_path / "c.npz", res.checkpoint)
        ck = load_checkpoint(path)
        assert ck.epoch == res.checkpoint.epoch and ck.extra == {"note": "x"} and ck.seed == 4
        assert np.array_equal(ck.build_model().predict(val[0]), m.predict(val[0]))
        st = ck.adam_state(m)
        assert st.t == res.checkpoint.adam_t and all(a.shape == p.shape for a, p in zip(st.m, m.parameters()))

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.npz"
        np.savez(p, meta=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
        with pytest.raises(ValueError, match="not an adapformer"):
            load_checkpoint(p)


class TestSeeds:
    def test_identical_seeds_zero_std(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        s = run_seeds(tiny_cfg, TrainConfig(max_epochs=2), train, val, val, [7, 7, 7])
        assert s.mse_std == 0.0 and s.seeds == [7, 7, 7]

    def test_dispersion(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg, n_train=48, n_val=16)
        s = run_seeds(tiny_cfg, TrainConfig(max_epochs=3), train, val, val, range(5))
        assert s.seeds == [0, 1, 2, 3, 4] and [r.seed for r in s.runs] == s.seeds
        assert s.mse_std < 0.5 * s.mse_mean

    def test_needs_two(self, tiny_cfg, rng):
        train, val = small_setup(rng, tiny_cfg)
        with pytest.raises(ValueError):
            run_seeds(tiny_cfg, TrainConfig(), train, val, val, [0])
