import numpy as np
import pytest

from forecasters import (TAU_LMS, TAU_RNN, ForecastDivergence, ForecastError, NormalizationStats,
                         clip_gradient, denormalize, fit_linear_regression, forecast_series, init_lms_state,
                         init_rnn_state, make_supervised_pairs, normalize_inputs, normalize_targets,
                         predict_baseline_previous, rnn_forward, train_step_dni, train_step_frozen,
                         train_step_lms, train_step_rtrl, train_step_snap1, train_step_uoro, SupervisedPairs)
from metrics import weight_nrmse


def _random_net(method, q=3, m=2, p=2, scale=0.5, seed=0):
    state = init_rnn_state(method, q, m, p, np.random.default_rng(seed))
    # weights drawn apart from init so every method gets the same network
    rng = np.random.default_rng([seed, 1])
    state.W_a = rng.normal(0.0, scale, size=(q, q))
    state.W_b = rng.normal(0.0, scale, size=(q, m + 1))
    state.W_c = rng.normal(0.0, scale, size=(p, q))
    return state


def _stream(n, m, p, seed=1):
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(n, m + 1))
    inputs[:, 0] = 1.0
    return inputs, rng.normal(size=(n, p))


def _theta(state):
    return np.concatenate([state.W_a.ravel(), state.W_b.ravel(), state.W_c.ravel()])


def _unrolled_loss(theta, shapes, inputs, targets):
    sizes = np.cumsum([np.prod(s) for s in shapes])[:-1]
    W_a, W_b, W_c = (part.reshape(s) for part, s in zip(np.split(theta, sizes), shapes))
    x = np.zeros(W_a.shape[0])
    total = 0.0
    for u, t in zip(inputs, targets):
        x = np.tanh(W_a @ x + W_b @ u)
        total += np.sum((W_c @ x - t) ** 2)
    return total


class TestPairs:
    def test_layout(self):
        weights = np.arange(20, dtype=np.float64).reshape(10, 2)
        pairs = make_supervised_pairs(weights, L=3, h=2)
        assert len(pairs) == 6
        np.testing.assert_array_equal(pairs.inputs[0], [1, 0, 1, 2, 3, 4, 5])
        np.testing.assert_array_equal(pairs.targets[0], [8, 9])
        assert pairs.target_frames.tolist() == [5, 6, 7, 8, 9, 10]

    def test_not_enough_frames(self):
        with pytest.raises(ForecastError, match="no valid pairs"):
            make_supervised_pairs(np.zeros((10, 2)), L=8, h=3)

    def test_normalization(self, sine_weights):
        pairs = make_supervised_pairs(sine_weights, L=4, h=1)
        stats = NormalizationStats.from_inputs(pairs.inputs, n_outputs=2)
        assert stats.mu[0] == 0.0
        assert stats.sigma[0] == 1.0
        normed = normalize_inputs(pairs.inputs, stats)
        np.testing.assert_array_equal(normed[:, 0], 1.0)
        np.testing.assert_allclose(normed[:, 1:].mean(axis=0), 0.0, atol=1e-12)
        back = denormalize(normalize_targets(pairs.targets, stats), stats)
        np.testing.assert_allclose(back, pairs.targets, atol=1e-12)


class TestClipping:
    def test_below_threshold(self):
        g = np.array([30.0, 40.0])
        np.testing.assert_array_equal(clip_gradient(g, 100.0), g)

    def test_rescaled(self):
        np.testing.assert_allclose(clip_gradient(np.array([300.0, 400.0]), 100.0), [60.0, 80.0])

    def test_zero(self):
        np.testing.assert_array_equal(clip_gradient(np.zeros(3), 100.0), 0.0)


class TestRnn:
    def test_forward_scalar_case(self):
        state = init_rnn_state("rtrl", 1, 0, 1, np.random.default_rng(0))
        state.W_a = np.array([[0.5]])
        state.W_b = np.array([[0.1]])
        state.x = np.array([0.2])
        x_new, y = rnn_forward(state, np.array([1.0]))
        np.testing.assert_allclose(x_new, np.tanh(0.2))
        np.testing.assert_allclose(y, state.W_c @ np.tanh([0.2]))

    def test_forward_shapes(self):
        state = init_rnn_state("rtrl", 3, 2, 2, np.random.default_rng(0))
        with pytest.raises(ForecastError, match="does not match"):
            rnn_forward(state, np.ones(4))
        x_new, _ = rnn_forward(_random_net("rtrl", scale=10.0), np.ones(3))
        assert np.all(np.abs(x_new) < 1)

    @pytest.mark.parametrize("method, step", [
        ("rtrl", train_step_rtrl), ("snap1", train_step_snap1),
        ("dni", train_step_dni), ("frozen_rnn", train_step_frozen),
    ])
    def test_exact_prediction_leaves_weights(self, method, step):
        state = _random_net(method)
        if state.A is not None:
            state.A = np.zeros_like(state.A)
        u = np.array([1.0, 0.3, -0.2])
        _, y = rnn_forward(state, u)
        before = _theta(state)
        state, _ = step(state, u, y, 0.1)
        np.testing.assert_array_equal(_theta(state), before)

    def test_rtrl_matches_finite_differences(self):
        q, m, p = 3, 2, 2
        state = _random_net("rtrl", q, m, p)
        shapes = [state.W_a.shape, state.W_b.shape, state.W_c.shape]
        theta = _theta(state)
        inputs, targets = _stream(15, m, p)

        analytic = np.zeros_like(theta)
        for u, t in zip(inputs, targets):
            state, _ = train_step_rtrl(state, u, t, 0.0)
            analytic += state.last_gradient

        eps = 1e-5
        numeric = np.empty_like(theta)
        for i in range(theta.size):
            bump = np.zeros_like(theta)
            bump[i] = eps
            numeric[i] = (_unrolled_loss(theta + bump, shapes, inputs, targets)
                          - _unrolled_loss(theta - bump, shapes, inputs, targets)) / (2 * eps)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)

    def test_rtrl_is_deterministic(self):
        inputs, targets = _stream(20, 2, 2)
        runs = []
        for _ in range(2):
            state = _random_net("rtrl")
            for u, t in zip(inputs, targets):
                state, _ = train_step_rtrl(state, u, t, 0.05)
            runs.append(_theta(state))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_uoro_is_unbiased(self):
        q, m, p = 3, 2, 2
        base = _random_net("uoro", q, m, p)
        base.x = np.random.default_rng(9).uniform(-0.5, 0.5, size=q)
        u, t = np.array([1.0, 0.4, -0.7]), np.array([0.3, -0.2])

        exact = _random_net("rtrl", q, m, p)
        exact.x = base.x.copy()
        exact, _ = train_step_rtrl(exact, u, t, 0.0)
        n_rec = q * (q + m + 1)

        rng = np.random.default_rng(123)
        n_samples = 100_000
        estimates = np.empty((n_samples, n_rec))
        for i in range(n_samples):
            state, _ = train_step_uoro(base.copy(), u, t, 0.0, rng)
            estimates[i] = state.last_gradient[:n_rec]
        mean = estimates.mean(axis=0)
        stderr = estimates.std(axis=0, ddof=1) / np.sqrt(n_samples)
        assert np.all(np.abs(mean - exact.last_gradient[:n_rec]) <= 3 * stderr + 1e-12)
        # the readout gradient is exact
        np.testing.assert_allclose(state.last_gradient[n_rec:], exact.last_gradient[n_rec:])

    def test_uoro_same_seed_same_trajectory(self):
        inputs, targets = _stream(20, 2, 2)
        runs = []
        for _ in range(2):
            state, rng = _random_net("uoro"), np.random.default_rng(4)
            for u, t in zip(inputs, targets):
                state, _ = train_step_uoro(state, u, t, 0.05, rng)
            runs.append(_theta(state))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_snap1_equals_rtrl_for_one_unit(self):
        inputs, targets = _stream(12, 2, 2)
        snap = _random_net("snap1", q=1)
        rtrl = _random_net("rtrl", q=1)
        for u, t in zip(inputs, targets):
            snap, y_snap = train_step_snap1(snap, u, t, 0.05)
            rtrl, y_rtrl = train_step_rtrl(rtrl, u, t, 0.05)
            np.testing.assert_allclose(snap.last_gradient, rtrl.last_gradient, rtol=0, atol=1e-12)
            np.testing.assert_allclose(y_snap, y_rtrl, rtol=0, atol=1e-12)

    def test_snap1_is_masked_rtrl(self):
        q, m, p = 4, 2, 2
        n = q + m + 1
        state = _random_net("snap1", q, m, p)
        inputs, targets = _stream(20, m, p)
        masked = np.zeros((q, q, n))
        keep = np.eye(q)[:, :, None]
        diag = np.arange(q)
        for u, t in zip(inputs, targets):
            x_prev = state.x.copy()
            state, _ = train_step_snap1(state, u, t, 0.0)
            d = 1.0 - state.x ** 2
            jac = d[:, None] * state.W_a
            full = (jac @ masked.reshape(q, q * n)).reshape(q, q, n)
            full[diag, diag, :] += d[:, None] * np.concatenate([x_prev, u])[None, :]
            masked = full * keep
            np.testing.assert_allclose(state.influence, masked[diag, diag, :], rtol=0, atol=1e-10)

    def test_dni_without_synthetic_credit_is_one_step_rtrl(self):
        dni = _random_net("dni")
        dni.A = np.zeros_like(dni.A)
        rtrl = _random_net("rtrl")
        u, t = np.array([1.0, 0.5, 0.1]), np.array([0.4, -0.3])
        dni, _ = train_step_dni(dni, u, t, 0.0)
        rtrl, _ = train_step_rtrl(rtrl, u, t, 0.0)
        np.testing.assert_allclose(dni.last_gradient, rtrl.last_gradient, atol=1e-14)

    def test_dni_learns_synthetic_gradient(self):
        state = _random_net("dni")
        inputs, targets = _stream(10, 2, 2)
        before = state.A.copy()
        for u, t in zip(inputs, targets):
            state, _ = train_step_dni(state, u, t, 0.05)
        assert not np.array_equal(state.A, before)

    def test_frozen_hidden_layer(self):
        state = _random_net("frozen_rnn")
        W_a, W_b = state.W_a.copy(), state.W_b.copy()
        inputs, targets = _stream(25, 2, 2)
        for u, t in zip(inputs, targets):
            state, _ = train_step_frozen(state, u, t, 0.1)
        np.testing.assert_array_equal(state.W_a, W_a)
        np.testing.assert_array_equal(state.W_b, W_b)

    def test_frozen_readout_gradient(self):
        state = _random_net("frozen_rnn")
        u, t = np.array([1.0, -0.4, 0.9]), np.array([0.2, 0.1])
        x_new, _ = rnn_forward(state, u)
        W_c = state.W_c.copy()
        state, _ = train_step_frozen(state, u, t, 0.0)

        eps = 1e-6
        numeric = np.empty(W_c.size)
        for i in range(W_c.size):
            bump = np.zeros(W_c.size)
            bump[i] = eps
            plus = np.sum(((W_c.ravel() + bump).reshape(W_c.shape) @ x_new - t) ** 2)
            minus = np.sum(((W_c.ravel() - bump).reshape(W_c.shape) @ x_new - t) ** 2)
            numeric[i] = (plus - minus) / (2 * eps)
        np.testing.assert_allclose(state.last_gradient, numeric, atol=1e-6)

    def test_non_finite_state_diverges(self):
        state = _random_net("rtrl")
        state.W_a[0, 0] = np.nan
        with pytest.raises(ForecastDivergence, match="divergence"):
            train_step_rtrl(state, np.ones(3), np.zeros(2), 0.1)

    def test_initial_weights_spread(self):
        state = init_rnn_state("rtrl", q=100, m=99, p=5, rng=np.random.default_rng(0))
        weights = np.concatenate([state.W_a.ravel(), state.W_b.ravel(), state.W_c.ravel()])
        assert weights.size >= 10_000
        assert abs(weights.std() - 0.02) < 0.05 * 0.02
        assert abs(weights.mean()) < 5 * 0.02 / np.sqrt(weights.size)

    def test_dni_beats_previous_weight_on_ar1(self):
        rng = np.random.default_rng(17)
        series = np.zeros(501)
        for n in range(1, 501):
            series[n] = 0.3 * series[n - 1] + rng.normal()
        state = init_rnn_state("dni", q=10, m=1, p=1, rng=np.random.default_rng(3))
        dni_sq, baseline_sq = [], []
        for n in range(1, 501):
            u, target = np.array([1.0, series[n - 1]]), np.array([series[n]])
            state, y = train_step_dni(state, u, target, 0.01)
            dni_sq.append(float((y[0] - series[n]) ** 2))
            baseline_sq.append((series[n - 1] - series[n]) ** 2)
        assert np.mean(dni_sq) < np.mean(baseline_sq)


class TestUpdateBound:
    """No applied step is longer than eta times the clipping threshold."""

    ETA = 0.01

    def _large_error_stream(self, m=2, p=2):
        inputs, targets = _stream(30, m, p, seed=2)
        return inputs, 1e3 * targets

    @pytest.mark.parametrize("method, step", [("rtrl", train_step_rtrl), ("snap1", train_step_snap1)])
    def test_network_step(self, method, step):
        state = _random_net(method)
        clipped = 0
        for u, t in zip(*self._large_error_stream()):
            before = _theta(state)
            state, _ = step(state, u, t, self.ETA)
            assert np.linalg.norm(_theta(state) - before) <= self.ETA * TAU_RNN * (1 + 1e-12)
            clipped += np.linalg.norm(state.last_gradient) > TAU_RNN
        assert clipped > 0

    def test_dni_steps(self):
        state = _random_net("dni")
        for u, t in zip(*self._large_error_stream()):
            theta, A = _theta(state), state.A.copy()
            state, _ = train_step_dni(state, u, t, self.ETA)
            assert np.linalg.norm(_theta(state) - theta) <= self.ETA * TAU_RNN * (1 + 1e-12)
            assert np.linalg.norm(state.A - A) <= self.ETA * TAU_RNN * (1 + 1e-12)

    def test_lms_step(self):
        state = init_lms_state(m=2, p=2)
        for u, t in zip(*self._large_error_stream()):
            W = state.W.copy()
            state, _ = train_step_lms(state, u, t, self.ETA)
            assert np.linalg.norm(state.W - W) <= self.ETA * TAU_LMS * (1 + 1e-12)
        assert np.linalg.norm(state.W) > 0


class TestLinear:
    def test_lms_hand_case(self):
        state = init_lms_state(m=1, p=1)
        state, y = train_step_lms(state, np.array([1.0, 1.0]), np.array([1.0]), 0.1)
        np.testing.assert_array_equal(y, [0.0])
        np.testing.assert_allclose(state.W, [[0.1, 0.1]])

    def test_lms_zero_error(self):
        state = init_lms_state(m=1, p=1)
        state.W = np.array([[0.5, 0.5]])
        state, _ = train_step_lms(state, np.array([1.0, 1.0]), np.array([1.0]), 0.1)
        np.testing.assert_array_equal(state.W, [[0.5, 0.5]])

    def test_lms_converges_on_linear_stream(self):
        rng = np.random.default_rng(0)
        W_star = np.array([[0.5, -0.3, 0.8]])
        state = init_lms_state(m=2, p=1)
        errors = []
        for _ in range(200):
            u = np.concatenate([[1.0], rng.normal(size=2)])
            state, y = train_step_lms(state, u, W_star @ u, 0.1)
            errors.append(float(np.sum((y - W_star @ u) ** 2)))
        assert np.mean(errors[-10:]) < 1e-3

    def test_linreg_recovers_generator(self):
        rng = np.random.default_rng(1)
        W_star = rng.normal(size=(2, 4))
        inputs = rng.normal(size=(20, 4))
        model = fit_linear_regression(SupervisedPairs(inputs, inputs @ W_star.T, np.arange(20)))
        np.testing.assert_allclose(model.W, W_star, atol=1e-8)

    def test_linreg_minimum_norm(self):
        rng = np.random.default_rng(2)
        inputs = rng.normal(size=(2, 5))
        targets = rng.normal(size=(2, 3))
        model = fit_linear_regression(SupervisedPairs(inputs, targets, np.arange(2)))
        np.testing.assert_allclose(model.predict(inputs), targets, atol=1e-8)
        np.testing.assert_allclose(model.W, (np.linalg.pinv(inputs) @ targets).T, atol=1e-8)

    def test_previous_weight_baseline(self):
        ramp = np.column_stack([0.5 * np.arange(10), np.full(10, 2.0)])
        np.testing.assert_array_equal(predict_baseline_previous(ramp, 0), ramp)
        pred = predict_baseline_previous(ramp, 3)
        assert np.all(np.isnan(pred[:3]))
        np.testing.assert_allclose(ramp[3:] - pred[3:], [[1.5, 0.0]] * 7)


class TestForecastSeries:
    def test_predictions_start_at_first_target(self, sine_weights):
        result = forecast_series("lms", sine_weights, L=6, h=2, m_train=60, eta=0.05)
        assert result.predictions.shape == sine_weights.shape
        assert np.all(np.isnan(result.predictions[:7]))
        assert np.all(np.isfinite(result.predictions[7:]))
        assert result.target_frames[0] == 8

    def test_stats_only_see_training_frames(self, sine_weights):
        result = forecast_series("snap1", sine_weights, L=6, h=2, m_train=60, eta=0.01, q=5)
        expected = NormalizationStats.from_inputs(make_supervised_pairs(sine_weights[:60], 6, 2).inputs, 2)
        np.testing.assert_array_equal(result.stats.mu, expected.mu)
        np.testing.assert_array_equal(result.stats.sigma, expected.sigma)

    @pytest.mark.parametrize("method", ["rtrl", "uoro", "snap1", "dni", "frozen_rnn", "lms"])
    def test_no_lookahead(self, sine_weights, method):
        altered = sine_weights.copy()
        altered[80:] += 5.0
        kwargs = dict(L=6, h=1, m_train=60, eta=0.02, q=4, seed=3)
        a = forecast_series(method, sine_weights, **kwargs).predictions
        b = forecast_series(method, altered, **kwargs).predictions
        np.testing.assert_array_equal(a[:81], b[:81])
        assert not np.allclose(a[82:], b[82:])

    def test_same_seed_same_predictions(self, sine_weights):
        a = forecast_series("uoro", sine_weights, L=6, h=1, m_train=60, seed=11).predictions
        b = forecast_series("uoro", sine_weights, L=6, h=1, m_train=60, seed=11).predictions
        c = forecast_series("uoro", sine_weights, L=6, h=1, m_train=60, seed=12).predictions
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a[7:], c[7:])

    def test_reset_after_clears_memory(self, sine_weights):
        kwargs = dict(L=6, h=1, m_train=60, eta=0.02, q=4, seed=0)
        kept = forecast_series("snap1", sine_weights, **kwargs).predictions
        reset = forecast_series("snap1", sine_weights, reset_after=90, **kwargs).predictions
        np.testing.assert_array_equal(kept[:90], reset[:90])
        assert not np.array_equal(kept[90:], reset[90:])

    @pytest.mark.parametrize("method", ["lms", "linreg"])
    def test_beats_previous_weight(self, sine_weights, method):
        h = 3
        pred = forecast_series(method, sine_weights, L=12, h=h, m_train=60, eta=0.05).predictions
        baseline = predict_baseline_previous(sine_weights, h)
        test = slice(100, 120)
        assert weight_nrmse(pred[test], sine_weights[test]) < weight_nrmse(baseline[test], sine_weights[test])

    def test_unknown_method(self, sine_weights):
        with pytest.raises(ForecastError, match="unknown"):
            forecast_series("lstm", sine_weights, L=6, h=1, m_train=60)

    def test_training_range_too_short(self, sine_weights):
        with pytest.raises(ForecastError, match="no training pairs"):
            forecast_series("lms", sine_weights, L=12, h=3, m_train=10)
