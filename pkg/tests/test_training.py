import math

import numpy as np
import pytest

from hesslens.expcli.datasets import split_train_val, synth_blobs
from hesslens.linalg import Rng, gaussian
from hesslens.models import ModelSpec, init_bn_state
from hesslens.training import (
    AdamState,
    AveragedState,
    DivergenceError,
    SgdState,
    TrainConfig,
    adam_step,
    adamw_step,
    evaluate,
    gadam_run,
    history_to_csv,
    lr_schedule,
    lr_schedule_avg,
    recompute_bn_stats,
    sgd_step,
    train,
)


def _cfg(**kw):
    return TrainConfig(**kw)


class TestLrSchedule:
    def test_ramp_value(self):
        cfg = _cfg(lr=1.0, epochs=100, final_lr_fraction=0.01)
        assert lr_schedule(70, cfg) == pytest.approx(0.505, abs=1e-12)

    def test_knots(self):
        cfg = _cfg(lr=2.0, epochs=100, final_lr_fraction=0.01)
        assert lr_schedule(50, cfg) == 2.0
        assert lr_schedule(90, cfg) == pytest.approx(2.0 * 0.01, abs=1e-12)
        assert lr_schedule(100, cfg) == 2.0 * 0.01

    def test_continuity_at_knots_random(self):
        rng = Rng(1)
        eps = 1e-9
        for k in range(200):
            t_total = 10 + int(rng.integers(1, 990)[0])
            r = 0.01 + 0.98 * float(rng.uniform(1)[0])
            a0 = 0.01 + 3.0 * float(rng.uniform(1)[0])
            cfg = _cfg(lr=a0, epochs=t_total, final_lr_fraction=r)
            for knot in (0.5, 0.9):
                below = lr_schedule((knot - eps) * t_total, cfg)
                above = lr_schedule((knot + eps) * t_total, cfg)
                assert abs(below - above) < 1e-6 * a0

    def test_piecewise_formula_random(self):
        rng = Rng(2)
        for k in range(1000):
            t_total = 1 + int(rng.integers(1, 1000)[0])
            t = float(rng.uniform(1)[0]) * t_total
            r = 0.001 + 0.999 * float(rng.uniform(1)[0])
            a0 = 0.01 + 5.0 * float(rng.uniform(1)[0])
            cfg = _cfg(lr=a0, epochs=t_total, final_lr_fraction=r)
            ratio = t / t_total
            if ratio <= 0.5:
                expected = a0
            elif ratio <= 0.9:
                expected = a0 * (1 - (1 - r) * (ratio - 0.5) / 0.4)
            else:
                expected = a0 * r
            assert lr_schedule(t, cfg) == pytest.approx(expected, abs=1e-12)


class TestLrScheduleAvg:
    def test_flat_before_half(self):
        cfg = _cfg(optimizer="gadam", lr=1.0, epochs=100, t_avg=80)
        assert lr_schedule_avg(40, cfg) == 1.0

    def test_terminal_value_is_half_lr(self):
        cfg = _cfg(optimizer="gadam", lr=0.4, epochs=100, t_avg=80)
        assert lr_schedule_avg(73, cfg) == pytest.approx(0.2, abs=1e-15)
        assert lr_schedule_avg(99, cfg) == pytest.approx(0.2, abs=1e-15)

    def test_ramp_as_printed_uses_total_epochs(self):
        cfg = _cfg(optimizer="gadam", lr=1.0, epochs=100, t_avg=80)
        t = 56.0  # t/t_avg = 0.7 inside the ramp window
        expected = 1.0 * (1 - (1 - 0.5) * (t / 100 - 0.5) / 0.4)
        assert lr_schedule_avg(t, cfg) == pytest.approx(expected, abs=1e-15)

    def test_ramp_consistent_uses_t_avg(self):
        cfg = _cfg(
            optimizer="gadam", lr=1.0, epochs=100, t_avg=80,
            avg_schedule_mode="consistent",
        )
        t = 56.0
        expected = 1.0 * (1 - (1 - 0.5) * (t / 80 - 0.5) / 0.4)
        assert lr_schedule_avg(t, cfg) == pytest.approx(expected, abs=1e-15)

    def test_consistent_mode_continuous_at_knots(self):
        eps = 1e-9
        for t_avg, t_total in ((80, 100), (30, 90), (55, 60)):
            cfg = _cfg(
                optimizer="gadam", lr=1.0, epochs=t_total, t_avg=t_avg,
                avg_schedule_mode="consistent",
            )
            for knot in (0.5, 0.9):
                below = lr_schedule_avg((knot - eps) * t_avg, cfg)
                above = lr_schedule_avg((knot + eps) * t_avg, cfg)
                assert abs(below - above) < 1e-6


class TestSgdStep:
    def test_hand_iteration(self):
        state = SgdState(np.zeros(1), np.zeros(1))
        grad = np.ones(1)
        state = sgd_step(state, grad, alpha=0.1, rho=0.9)
        assert state.w[0] == pytest.approx(-0.1, abs=1e-15)
        state = sgd_step(state, grad, alpha=0.1, rho=0.9)
        assert state.z[0] == pytest.approx(1.9, abs=1e-15)
        assert state.w[0] == pytest.approx(-0.29, abs=1e-15)

    def test_zero_momentum_is_plain_gd(self):
        w = np.array([1.0, -2.0])
        g = np.array([0.5, 0.5])
        state = sgd_step(SgdState(w, np.zeros(2)), g, alpha=0.2, rho=0.0)
        np.testing.assert_allclose(state.w, w - 0.2 * g, atol=1e-15)

    def test_zero_grad_fixed_point(self):
        state = SgdState(np.array([3.0]), np.zeros(1))
        nxt = sgd_step(state, np.zeros(1), alpha=0.1, rho=0.9)
        np.testing.assert_array_equal(nxt.w, state.w)


class TestAdamSteps:
    def test_first_step_exact(self):
        state = AdamState(np.zeros(1), np.zeros(1), np.zeros(1))
        nxt = adam_step(state, np.ones(1), alpha=0.001)
        expected = -0.001 * (1.0 / (1.0 + 1e-8))
        assert nxt.w[0] == pytest.approx(expected, abs=1e-18)

    def test_step_size_bound(self):
        rng = Rng(3)
        state = AdamState(gaussian(rng, 5), np.zeros(5), np.zeros(5))
        lam = 0.1
        alpha = 0.01
        prev = state.w.copy()
        for k in range(20):
            state = adamw_step(state, gaussian(rng, 5), alpha, lam=lam)
            step = np.abs(state.w - prev)
            assert np.all(step <= alpha * (1.0 + lam * (alpha + np.abs(prev))) + 1e-12)
            prev = state.w.copy()

    def test_adamw_zero_decay_is_adam_bitwise(self):
        rng = Rng(4)
        s1 = AdamState(gaussian(rng, 6), np.zeros(6), np.zeros(6))
        s2 = AdamState(s1.w.copy(), np.zeros(6), np.zeros(6))
        for k in range(10):
            g = gaussian(rng, 6)
            s1 = adam_step(s1, g, 0.003)
            s2 = adamw_step(s2, g, 0.003, lam=0.0)
            np.testing.assert_array_equal(s1.w, s2.w)

    def test_pure_decay_is_geometric(self):
        state = AdamState(np.array([2.0]), np.zeros(1), np.zeros(1))
        alpha, lam = 0.1, 0.5
        for k in range(1, 6):
            state = adamw_step(state, np.zeros(1), alpha, lam=lam)
            assert state.w[0] == pytest.approx(2.0 * (1 - alpha * lam) ** k, rel=1e-12)


class TestAveragedState:
    def test_matches_naive_mean(self):
        rng = Rng(5)
        avg = AveragedState.empty(4)
        iterates = [gaussian(rng, 4) for _ in range(13)]
        for w in iterates:
            avg.update(w)
        np.testing.assert_allclose(avg.mean, np.mean(iterates, axis=0), atol=1e-12)

    def test_constant_iterates(self):
        avg = AveragedState.empty(3)
        w = np.array([1.0, -1.0, 2.0])
        for _ in range(7):
            avg.update(w)
        np.testing.assert_array_equal(avg.mean, w)

    def test_empty_mean_raises(self):
        with pytest.raises(ValueError):
            AveragedState.empty(2).mean


@pytest.fixture(scope="module")
def blob_data():
    ds = synth_blobs(d_x=8, d_y=2, n_per_class=220, separation=2.2, seed=21)
    return split_train_val(ds, 140, seed=22)


class TestTrainLoop:
    def test_bit_reproducible(self, blob_data):
        tr, va = blob_data
        spec = ModelSpec(8, (10,), 2)
        cfg = _cfg(optimizer="sgd", lr=0.1, epochs=6, batch_size=32, seed=9, mu_l2=1e-4)
        r1 = train(spec, tr, cfg, va)
        r2 = train(spec, tr, cfg, va)
        assert r1.history == r2.history
        np.testing.assert_array_equal(r1.params.flat, r2.params.flat)

    def test_l2_shrinks_final_weight_norm(self, blob_data):
        tr, va = blob_data
        spec = ModelSpec(8, (10,), 2)
        base = dict(optimizer="sgd", lr=0.1, epochs=12, batch_size=32, seed=9)
        r0 = train(spec, tr, _cfg(mu_l2=0.0, **base))
        r1 = train(spec, tr, _cfg(mu_l2=5e-3, **base))
        assert r1.history[-1]["weight_norm"] < r0.history[-1]["weight_norm"]

    def test_divergence_aborts_with_history(self, blob_data):
        tr, _ = blob_data
        spec = ModelSpec(8, (10,), 2)
        cfg = _cfg(optimizer="sgd", lr=5e4, epochs=8, batch_size=32, seed=3)
        with np.errstate(all="ignore"), pytest.raises(DivergenceError) as err:
            train(spec, tr, cfg)
        assert isinstance(err.value.history, list)

    def test_gadam_averaging_last_two(self, blob_data):
        tr, va = blob_data
        spec = ModelSpec(8, (6,), 2)
        epochs = 6
        cfg = _cfg(
            optimizer="gadam", lr=3e-3, epochs=epochs, t_avg=epochs - 2,
            batch_size=32, seed=4, lambda_decoupled=0.01,
        )
        # rerun with t_avg = epochs-1 to capture the final iterate alone
        result = train(spec, tr, cfg, va)
        cfg1 = _cfg(
            optimizer="gadam", lr=3e-3, epochs=epochs, t_avg=epochs - 1,
            batch_size=32, seed=4, lambda_decoupled=0.01,
        )
        result1 = train(spec, tr, cfg1, va)
        # t_avg = T-1 averages exactly one iterate: the final one
        np.testing.assert_allclose(result1.averaged_params.flat, result1.params.flat, atol=1e-15)
        # t_avg = T-2 averages the last two; it differs from the final iterate
        assert not np.array_equal(result.averaged_params.flat, result.params.flat)

    def test_gadam_run_wrapper(self, blob_data):
        tr, va = blob_data
        spec = ModelSpec(8, (6,), 2)
        cfg = _cfg(optimizer="gadam", lr=3e-3, epochs=4, t_avg=2, batch_size=32, seed=4)
        final, averaged, history = gadam_run(cfg, spec, tr, va)
        assert averaged is not None and len(history) == 4
        with pytest.raises(ValueError):
            gadam_run(_cfg(optimizer="sgd"), spec, tr, va)

    def test_history_csv_format(self, blob_data):
        tr, va = blob_data
        spec = ModelSpec(8, (6,), 2)
        r = train(spec, tr, _cfg(optimizer="adam", lr=1e-3, epochs=3, batch_size=64, seed=1), va)
        csv = history_to_csv(r.history)
        lines = csv.strip().split("\n")
        assert lines[0] == "epoch,lr,train_loss,train_acc,test_loss,test_acc,weight_norm"
        assert len(lines) == 4
        # rows parse back to the same floats
        vals = lines[1].split(",")
        assert float(vals[2]) == r.history[0]["train_loss"]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            _cfg(optimizer="rmsprop")
        with pytest.raises(ValueError):
            _cfg(lr=-0.1)
        with pytest.raises(ValueError):
            _cfg(optimizer="gadam", epochs=10, t_avg=10)
        with pytest.raises(ValueError):
            _cfg(final_lr_fraction=0.0)
        d = _cfg(optimizer="adamw", lambda_decoupled=0.2).to_dict()
        assert TrainConfig.from_dict(d) == _cfg(optimizer="adamw", lambda_decoupled=0.2)


class TestBatchNormRecompute:
    def test_exact_average_of_batch_stats(self, blob_data):
        tr, _ = blob_data
        spec = ModelSpec(8, (5,), 2, batch_norm=(True,))
        cfg = _cfg(optimizer="sgd", lr=0.05, epochs=2, batch_size=32, seed=6)
        result = train(spec, tr, cfg)
        bn = recompute_bn_stats(spec, result.params, tr, batch_size=40)
        # oracle: accumulate the same per-batch statistics by hand
        from hesslens.models import batch_stats_from_caches, blocks_from_flat, net_forward

        blocks = blocks_from_flat(spec, result.params.flat)
        means, variances = [], []
        for start in range(0, tr.n, 40):
            _, caches = net_forward(
                spec, blocks, init_bn_state(spec), tr.inputs[start : start + 40], "train"
            )
            stats = batch_stats_from_caches(spec, caches)
            means.append(stats[0][0])
            variances.append(stats[0][1])
        np.testing.assert_allclose(bn.running_mean[0], np.mean(means, axis=0), atol=1e-12)
        np.testing.assert_allclose(bn.running_var[0], np.mean(variances, axis=0), atol=1e-12)

    def test_evaluate_uses_eval_mode(self, blob_data):
        tr, va = blob_data
        spec = ModelSpec(8, (5,), 2, batch_norm=(True,))
        result = train(spec, tr, _cfg(optimizer="sgd", lr=0.05, epochs=3, batch_size=32, seed=6), va)
        loss, acc = evaluate(spec, result.params, result.bn_state, va)
        assert math.isfinite(loss) and 0.0 <= acc <= 1.0
