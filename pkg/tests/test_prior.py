import json

import numpy as np
import pytest

from voiceprior.align import D_EMO
from voiceprior.errors import InsufficientData, NonFiniteState, PreconditionError, TimeOutOfRange
from voiceprior.nn import grad_check
from voiceprior.prior import (PriorConfig, ScoreModel, SdeConfig, dsm_loss, dsm_loss_and_grads, euler_maruyama,
                              forward_marginal, gaussian_score, guided_score, reverse_ode_sample, sample_forward,
                              time_embedding, train_prior)


def const_beta_cfg(dim=1, beta=0.5):
    # beta0 = beta1 gives a constant schedule
    return SdeConfig(np.zeros(dim), np.ones(dim), beta, beta)


class TestForwardMarginal:
    def test_t_zero(self):
        x0 = np.array([0.3, -1.2] + [0.0] * (D_EMO - 2))
        mean, var = forward_marginal(x0, 0.0, SdeConfig())
        np.testing.assert_array_equal(mean, x0)
        np.testing.assert_array_equal(var, np.zeros(D_EMO))

    def test_constant_beta_closed_form(self):
        mean, var = forward_marginal(np.array([2.0]), 1.0, const_beta_cfg())
        assert mean[0] == pytest.approx(2.0 * np.exp(-0.25), rel=1e-14)
        assert var[0] == pytest.approx(1 - np.exp(-0.5), rel=1e-14)
        assert var[0] == pytest.approx(0.39347, abs=1e-5)

    def test_attractor_limit(self):
        cfg = SdeConfig(np.full(2, 0.7), np.array([0.5, 2.0]), 50.0, 200.0)
        mean, var = forward_marginal(np.array([5.0, -5.0]), 1.0, cfg)
        np.testing.assert_allclose(mean, cfg.mu, atol=1e-12)
        np.testing.assert_allclose(var, cfg.lam, rtol=1e-12)

    def test_variance_monotone_and_positive(self):
        cfg = SdeConfig()
        ts = np.linspace(0, 1, 201)
        v = np.array([forward_marginal(np.zeros(D_EMO), t, cfg)[1][0] for t in ts])
        assert np.all(np.diff(v) >= 0)
        assert np.all(v[1:] > 0)

    def test_schedule(self):
        cfg = SdeConfig()
        assert cfg.beta(0.0) == 0.05 and cfg.beta(1.0) == 20.0
        assert cfg.integrated_beta(1.0) == pytest.approx(0.05 + 0.5 * 19.95)

    @pytest.mark.parametrize("t", [-0.1, 1.5, np.nan])
    def test_out_of_range(self, t):
        with pytest.raises(TimeOutOfRange):
            forward_marginal(np.zeros(D_EMO), t, SdeConfig())

    def test_batch_times(self):
        cfg = SdeConfig()
        x0 = np.random.default_rng(0).standard_normal((3, D_EMO))
        t = np.array([0.1, 0.5, 0.9])
        mean, var = forward_marginal(x0, t, cfg)
        for i in range(3):
            m, v = forward_marginal(x0[i], t[i], cfg)
            np.testing.assert_allclose(mean[i], m, rtol=1e-15)
            np.testing.assert_allclose(var[i], v, rtol=1e-15)


class TestSampling:
    def test_sample_forward_t0_exact(self):
        x0 = np.arange(D_EMO, dtype=float)
        np.testing.assert_array_equal(sample_forward(x0, 0.0, SdeConfig(), np.random.default_rng(1)), x0)

    def test_sample_forward_seeded(self):
        x0 = np.ones(D_EMO)
        a = sample_forward(x0, 0.3, SdeConfig(), np.random.default_rng(2))
        b = sample_forward(x0, 0.3, SdeConfig(), np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)

    def test_sample_forward_moments(self):
        cfg = SdeConfig(np.zeros(1), np.ones(1))
        x0 = np.full((100_000, 1), 1.5)
        x = sample_forward(x0, 0.5, cfg, np.random.default_rng(3))
        mean, var = forward_marginal(np.array([1.5]), 0.5, cfg)
        assert x.mean() == pytest.approx(mean[0], rel=0.01)
        assert x.var() == pytest.approx(var[0], rel=0.02)

    def test_euler_maruyama_small(self):
        x = euler_maruyama(np.full(20_000, 1.0), 1.0, 1e-2, np.random.default_rng(4))
        assert x.mean() == pytest.approx(np.exp(-0.25), abs=0.02)
        assert x.var() == pytest.approx(1 - np.exp(-0.5), rel=0.05)


class TestTimeEmbedding:
    def test_shape_and_values(self):
        e = time_embedding([0.0, 0.5])
        assert e.shape == (2, 8)
        np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
        assert e[1, 0] == pytest.approx(np.sin(500.0))
        assert e[1, 7] == pytest.approx(np.cos(0.5))


def _model(seed=0, hidden=16, depth=2, dim=D_EMO, scaling="std"):
    cfg = SdeConfig(np.zeros(dim), np.ones(dim))
    return ScoreModel.init(cfg, np.random.default_rng(seed), dim, hidden, depth, scaling), cfg


class TestDsmLoss:
    def test_zero_model_baseline(self):
        model, cfg = _model()
        for layer in model.net.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        rng = np.random.default_rng(5)
        y = rng.standard_normal((20_000, D_EMO))
        z = rng.standard_normal((20_000, D_EMO))
        assert dsm_loss(model, y, z, cfg, rng) == pytest.approx(D_EMO, rel=0.05)

    @pytest.mark.parametrize("scaling", ["std", "none"])
    def test_matches_weighted_regression(self, scaling):
        model, cfg = _model(1, scaling=scaling)
        rng = np.random.default_rng(6)
        y, z = rng.standard_normal((7, D_EMO)), rng.standard_normal((7, D_EMO))
        t = rng.uniform(cfg.eps_t, cfg.T, 7)
        noise = rng.standard_normal((7, D_EMO))
        mean, var = forward_marginal(y, t, cfg)
        x_t = mean + np.sqrt(var) * noise
        target = (mean - x_t) / var
        s = np.stack([model.score(x_t[i], t[i], z[i]) for i in range(7)])
        expected = np.mean(np.sum(var * (s - target) ** 2, axis=1))
        assert dsm_loss(model, y, z, cfg, rng, t=t, noise=noise) == pytest.approx(expected, rel=1e-12)

    def test_exact_target_gives_zero(self):
        # a model returning the regression target exactly contributes nothing
        cfg = SdeConfig(np.zeros(2), np.ones(2))
        rng = np.random.default_rng(7)
        y = rng.standard_normal((4, 2))
        t = rng.uniform(0.1, 1.0, 4)
        noise = rng.standard_normal((4, 2))
        mean, var = forward_marginal(y, t, cfg)
        x_t = mean + np.sqrt(var) * noise
        target = (mean - x_t) / var
        assert np.sum(np.sqrt(var) * target + noise) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("scaling", ["std", "none"])
    def test_gradient(self, scaling):
        model, cfg = _model(2, hidden=10, depth=2, scaling=scaling)
        rng = np.random.default_rng(8)
        y, z = rng.standard_normal((5, D_EMO)), rng.standard_normal((5, D_EMO))
        t = rng.uniform(0.05, 1.0, 5)
        noise = rng.standard_normal((5, D_EMO))
        err = grad_check(model.net.parameters(),
                         lambda: dsm_loss_and_grads(model, y, z, cfg, rng, t=t, noise=noise))
        assert err <= 1e-4


class TestReverseOde:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_exact_score_recovers_gaussian(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.uniform(-1, 1, 2)
        s = rng.uniform(0.25, 1.0, 2)
        cfg = SdeConfig(np.zeros(2), np.ones(2))
        x = reverse_ode_sample(gaussian_score(m, s, cfg), None, 200, cfg, np.random.default_rng(10 + seed),
                               n_samples=2000)
        assert np.max(np.abs(x.mean(axis=0) - m)) <= 0.05
        assert np.max(np.abs(x.var(axis=0) / s - 1)) <= 0.10

    def test_zero_score_linear_flow(self):
        # with s = 0 the reverse flow is linear: each Euler step scales x - mu by 1 + h beta / (2 lam)
        cfg = SdeConfig(np.zeros(4), np.ones(4))
        x = reverse_ode_sample(lambda x, t, z: np.zeros_like(x), None, 50, cfg, np.random.default_rng(3),
                               n_samples=500)
        x_init = np.random.default_rng(3).standard_normal((500, 4))
        ts = np.linspace(cfg.T, cfg.eps_t, 51)
        factor = np.prod(1 + (ts[:-1] - ts[1:]) * cfg.beta(ts[:-1]) / 2)
        np.testing.assert_allclose(x, x_init * factor, rtol=1e-12)
        continuous = np.exp(0.5 * (cfg.integrated_beta(cfg.T) - cfg.integrated_beta(cfg.eps_t)))
        assert factor == pytest.approx(continuous, rel=0.3)

    def test_deterministic(self):
        model, cfg = _model(4)
        z = np.random.default_rng(0).standard_normal(D_EMO)
        a = reverse_ode_sample(model, z, 20, cfg, np.random.default_rng(9))
        b = reverse_ode_sample(model, z, 20, cfg, np.random.default_rng(9))
        assert a.shape == (D_EMO,)
        np.testing.assert_array_equal(a, b)

    def test_zero_steps(self):
        model, cfg = _model()
        with pytest.raises(PreconditionError):
            reverse_ode_sample(model, np.zeros(D_EMO), 0, cfg, np.random.default_rng(0))

    def test_divergence_guard(self):
        cfg = SdeConfig(np.zeros(2), np.ones(2))
        with pytest.raises(NonFiniteState):
            reverse_ode_sample(lambda x, t, z: 1e9 * np.ones_like(x), None, 10, cfg, np.random.default_rng(0))

    def test_trace(self, tmp_path):
        model, cfg = _model(5)
        path = tmp_path / "trace.csv"
        reverse_ode_sample(model, np.zeros(D_EMO), 5, cfg, np.random.default_rng(0), trace_path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,t," + ",".join(f"x_{i}" for i in range(D_EMO))
        assert len(lines) == 7

    def test_guidance_zero_is_plain(self):
        model, _ = _model(6)
        assert guided_score(model, 0.0) is model
        x = np.random.default_rng(1).standard_normal((3, D_EMO))
        z = np.random.default_rng(2).standard_normal(D_EMO)
        g = guided_score(model, 2.0)(x, 0.5, z)
        expected = 3.0 * model(x, 0.5, z) - 2.0 * model(x, 0.5, np.zeros_like(z))
        np.testing.assert_allclose(g, expected, rtol=1e-14)


class TestTraining:
    def _data(self, n=240):
        rng = np.random.default_rng(0)
        z_table = rng.standard_normal((3, D_EMO))
        labels = rng.integers(0, 3, n)
        y = z_table[labels] * 0.5 + 0.3 * rng.standard_normal((n, D_EMO))
        return y, lambda idx, r: z_table[labels[idx]]

    def test_seeded_and_descends(self):
        y, cond = self._data()
        config = PriorConfig(epochs=8, hidden=16, depth=2, batch_size=64, seed=3)
        a = train_prior(y, cond, SdeConfig(), config)
        b = train_prior(y, cond, SdeConfig(), config)
        assert a.history == b.history
        assert a.history[-1] < a.history[0]
        np.testing.assert_array_equal(a.model.net.layers[0].weight, b.model.net.layers[0].weight)

    def test_insufficient(self):
        y, cond = self._data(100)
        with pytest.raises(InsufficientData):
            train_prior(y, cond, SdeConfig(), PriorConfig(epochs=1))

    def test_checkpoint_round_trip(self):
        model, cfg = _model(7)
        back = ScoreModel.from_dict(json.loads(json.dumps(model.to_dict())))
        x = np.random.default_rng(0).standard_normal(D_EMO)
        np.testing.assert_array_equal(back(x, 0.4, x), model(x, 0.4, x))
