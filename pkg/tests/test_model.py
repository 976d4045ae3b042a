"""Surrogate forward pass: gradients, batching, constraints, checkpoints."""

import numpy as np
import pytest

import gnnode.autodiff as ad
from gnnode.checkpoint import load_checkpoint, save_checkpoint
from gnnode.config import substream
from gnnode.errors import ConfigError, ShapeError
from gnnode.model import (GROUP_ACTUATOR, GROUP_GNN, GROUP_HEAD, GraphIndex,
                          ModelHyper, ModelParams, integrate_rk4,
                          predict_step)
from gnnode.preprocessing import assemble_frame, fit_norm_stats


@pytest.fixture(scope="module")
def setup(graph, small_trajs):
    train, _ = small_trajs
    hyper = ModelHyper(hidden=8, layers=2, substeps=2)
    params = ModelParams.init(graph, hyper, substream(7, "init"))
    stats = fit_norm_stats(train, graph)
    gidx = GraphIndex(graph)
    return graph, hyper, params, stats, gidx


def _frame(graph, stats, rng, b):
    T = rng.uniform(300.0, 335.0, size=(b, graph.n_plant))
    return T, assemble_frame(
        graph, stats, T, power=rng.uniform(0, 12000, b),
        inlet=rng.uniform(286, 294, b), flows=rng.uniform(0.02, 0.14, (b, 3)))


class TestForward:
    def test_step_shapes_and_finite(self, setup, rng):
        graph, hyper, params, stats, gidx = setup
        T, feats = _frame(graph, stats, rng, b=3)
        T_next, rate = predict_step(params, gidx, stats, feats, T,
                                    dt=np.full(3, 1.0))
        assert ad.value(T_next).shape == (3, graph.n_plant)
        assert ad.value(rate).shape == (3, graph.n_plant)
        assert np.isfinite(ad.value(T_next)).all()

    def test_increment_is_rate_times_sigma_dt(self, setup, rng):
        graph, hyper, params, stats, gidx = setup
        T, feats = _frame(graph, stats, rng, b=2)
        dt = np.array([0.5, 2.0])
        T_next, rate = predict_step(params, gidx, stats, feats, T, dt=dt)
        np.testing.assert_allclose(
            ad.value(T_next) - T,
            ad.value(rate) * stats.rate_std[None, :] * dt[:, None],
            rtol=1e-10)

    def test_batched_equals_single_window(self, setup, rng):
        """Running B windows at once must equal running them one by one."""
        graph, hyper, params, stats, gidx = setup
        b = 3
        T = rng.uniform(300.0, 335.0, size=(b, graph.n_plant))
        power = rng.uniform(0, 12000, b)
        inlet = rng.uniform(286, 294, b)
        flows = rng.uniform(0.02, 0.14, (b, 3))
        dt = rng.uniform(0.5, 1.5, b)

        feats = assemble_frame(graph, stats, T, power, inlet, flows)
        batched, _ = predict_step(params, gidx, stats, feats, T, dt=dt)
        batched = ad.value(batched)
        for w in range(b):
            f1 = assemble_frame(graph, stats, T[w:w + 1], power[w:w + 1],
                                inlet[w:w + 1], flows[w:w + 1])
            single, _ = predict_step(params, gidx, stats, f1, T[w:w + 1],
                                     dt=dt[w:w + 1])
            np.testing.assert_allclose(ad.value(single)[0], batched[w],
                                       rtol=1e-10, atol=1e-10)

    def test_every_parameter_receives_gradient(self, setup, rng):
        graph, hyper, params, stats, gidx = setup
        T, feats = _frame(graph, stats, rng, b=2)
        with ad.Tape() as tape:
            params.watch(tape)
            T2, rate = predict_step(params, gidx, stats, feats, T,
                                    dt=np.full(2, 1.0))
            store = tape.backward(ad.mean_(ad.mul(rate, rate)))
            dead = [nm for nm in params.names()
                    if not np.any(store.of(params[nm]))]
        assert dead == []

    def test_gradcheck_through_full_step(self, setup, rng):
        """End-to-end: analytic dLoss/dparam vs central differences for a
        spot check of parameters from each group."""
        graph, hyper, params, stats, gidx = setup
        T, feats_args = None, None
        T = rng.uniform(300.0, 335.0, size=(1, graph.n_plant))
        power = rng.uniform(0, 12000, 1)
        inlet = rng.uniform(286, 294, 1)
        flows = rng.uniform(0.02, 0.14, (1, 3))

        def loss_value():
            feats = assemble_frame(graph, stats, T, power, inlet, flows)
            _, rate = predict_step(params, gidx, stats, feats, T,
                                   dt=np.ones(1))
            return ad.mean_(ad.mul(rate, rate))

        with ad.Tape() as tape:
            params.watch(tape)
            store = tape.backward(loss_value())

        picks = ["enc_plant_w1", "mp0_stream_w2", "mp1_alpha_hx",
                 "gate_w", "dec_w3", "alpha_scalar", "mp0_uloss"]
        h = 1e-5
        for name in picks:
            t = params[name]
            analytic = store.of(t)
            flat = t.data.ravel()
            num = np.zeros_like(flat)
            idxs = range(flat.size) if flat.size <= 8 else \
                rng.choice(flat.size, size=8, replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(ad.value(loss_value()))
                flat[i] = orig - h
                fm = float(ad.value(loss_value()))
                flat[i] = orig
                num[i] = (fp - fm) / (2 * h)
                a = analytic.ravel()[i]
                scale = max(abs(a), abs(num[i]), 1e-4)
                assert abs(a - num[i]) / scale < 1e-4, \
                    f"{name}[{i}]: {a} vs {num[i]}"

    def test_dropout_requires_rng_and_perturbs(self, setup, rng):
        graph, hyper, params, stats, gidx = setup
        hyper_d = ModelHyper(hidden=8, layers=2, substeps=2, dropout=0.5)
        params_d = ModelParams.init(graph, hyper_d, substream(7, "init"))
        T, feats = _frame(graph, stats, rng, b=1)
        with pytest.raises(ConfigError):
            predict_step(params_d, gidx, stats, feats, T, dt=np.ones(1),
                         training=True)
        out1, _ = predict_step(params_d, gidx, stats, feats, T,
                               dt=np.ones(1),
                               rng=np.random.default_rng(0), training=True)
        out2, _ = predict_step(params_d, gidx, stats, feats, T,
                               dt=np.ones(1),
                               rng=np.random.default_rng(1), training=True)
        assert not np.allclose(ad.value(out1), ad.value(out2))
        # inference path is deterministic and ignores dropout
        a, _ = predict_step(params_d, gidx, stats, feats, T, dt=np.ones(1))
        b2, _ = predict_step(params_d, gidx, stats, feats, T, dt=np.ones(1))
        np.testing.assert_array_equal(ad.value(a), ad.value(b2))


class TestParams:
    def test_group_partition_covers_everything(self, setup):
        _, _, params, _, _ = setup
        groups = params.groups()
        assert set(groups) == {GROUP_GNN, GROUP_ACTUATOR, GROUP_HEAD}
        total = sum(len(v) for v in groups.values())
        assert total == len(params.names())
        assert params.group_of("enc_act_w1") == GROUP_ACTUATOR
        assert params.group_of("enc_plant_w1") == GROUP_GNN
        assert params.group_of("dec_w1") == GROUP_HEAD
        assert params.group_of("alpha_scalar") == GROUP_HEAD

    def test_alpha_clamp_applies_bounds(self, setup):
        _, hyper, params, _, _ = setup
        p = params.copy()
        p["mp0_alpha_hx"].data = np.array(5.0)
        p["mp1_alpha_hc"].data = np.array(-1.0)
        p.apply_constraints()
        assert p["mp0_alpha_hx"].data == hyper.alpha_clip[1]
        assert p["mp1_alpha_hc"].data == hyper.alpha_clip[0]

    def test_state_round_trip_is_bitwise(self, setup):
        _, _, params, _, _ = setup
        dup = params.copy()
        arrays = {k: v * 1.0 for k, v in params.state_arrays().items()}
        dup.load_state(arrays)
        for nm in params.names():
            np.testing.assert_array_equal(dup[nm].data, params[nm].data)

    def test_copy_is_independent(self, setup):
        _, _, params, _, _ = setup
        dup = params.copy()
        dup["dec_w1"].data[0, 0] += 1.0
        assert params["dec_w1"].data[0, 0] != dup["dec_w1"].data[0, 0]

    def test_init_deterministic_under_same_stream(self, setup):
        graph, hyper, params, _, _ = setup
        again = ModelParams.init(graph, hyper, substream(7, "init"))
        for nm in params.names():
            np.testing.assert_array_equal(again[nm].data, params[nm].data)


class TestIntegrator:
    def test_exact_on_constant_field(self):
        z = np.full((4, 2), 1.5)
        out = integrate_rk4(lambda s: ad.constant(np.full((4, 2), 2.0)),
                            ad.as_tensor(z), delta=0.25, substeps=4)
        np.testing.assert_allclose(ad.value(out), z + 2.0, rtol=1e-14)

    def test_fourth_order_on_linear_decay(self):
        """Halving the step must shrink the error by about 2^4."""
        errs = []
        for substeps in (4, 8, 16):
            out = integrate_rk4(lambda s: ad.mul(s, -1.0),
                                ad.as_tensor(np.ones((1, 1))),
                                delta=1.0 / substeps, substeps=substeps)
            errs.append(abs(float(ad.value(out)[0, 0]) - np.exp(-1.0)))
        orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
        for p in orders:
            assert 3.7 <= p <= 4.3

    def test_per_row_step_sizes(self):
        # two windows advancing different dt toward e^{-dt}
        delta = np.array([[0.1], [0.2]])
        out = integrate_rk4(lambda s: ad.mul(s, -1.0),
                            ad.as_tensor(np.ones((2, 1))),
                            delta=delta, substeps=5)
        np.testing.assert_allclose(ad.value(out)[:, 0],
                                   np.exp([-0.5, -1.0]), rtol=1e-4)


class TestCheckpoint:
    def test_round_trip_preserves_everything(self, setup, tmp_path,
                                             small_trajs):
        graph, hyper, params, stats, _ = setup
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, graph, stats=stats,
                        meta={"note": "unit", "epoch": 3})
        p2, g2, s2, t2, meta = load_checkpoint(path)
        assert meta["note"] == "unit" and meta["epoch"] == 3
        assert g2.graph_hash() == graph.graph_hash()
        assert p2.hyper.as_dict() == hyper.as_dict()
        for nm in params.names():
            np.testing.assert_array_equal(p2[nm].data, params[nm].data)
        np.testing.assert_array_equal(s2.temp_mean, stats.temp_mean)
        assert t2 is None

    def test_payload_corruption_detected(self, setup, tmp_path):
        graph, _, params, stats, _ = setup
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, graph, stats=stats)
        blob = bytearray(path.read_bytes())
        blob[-9] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_wrong_magic_rejected(self, setup, tmp_path):
        graph, _, params, _, _ = setup
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, graph)
        blob = bytearray(path.read_bytes())
        blob[0] = ord(b"X")
        path.write_bytes(bytes(blob))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, setup, tmp_path):
        graph, _, params, _, _ = setup
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, graph)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 64])
        with pytest.raises((ConfigError, ShapeError)):
            load_checkpoint(path)
