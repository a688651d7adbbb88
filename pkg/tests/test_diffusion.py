import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfdm.denoiser import GaussianMixtureSpec, OracleDenoiser
from pfdm.diffusion import (
    NoiseSchedule,
    SampleBatch,
    ddpm_loss,
    diffuse,
    make_linear_schedule,
    reverse_step,
    sample_ddpm,
    train_ddpm,
)
from pfdm.denoiser import TrainingConfig, build_trainable_denoiser


def brute_alpha_bar(t, T=1000, lo=1e-4, hi=0.02):
    prod = 1.0
    for s in range(1, t + 1):
        prod *= 1.0 - (lo + (s - 1) * (hi - lo) / (T - 1))
    return prod


class ZeroDenoiser:
    trainable = False

    def __init__(self, dim=2):
        self.input_shape = (dim,)

    def predict(self, x, t, labels=None):
        return np.zeros_like(np.asarray(x, dtype=float))


class FixedDenoiser:
    """Returns a stored noise array, i.e. a perfect predictor for that draw."""

    trainable = False

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)
        self.input_shape = self.z.shape[1:]

    def predict(self, x, t, labels=None):
        return self.z.reshape(np.shape(x))


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(1000, 1e-4, 0.02)


class TestSchedule:
    def test_first_alpha_bar(self, sched):
        assert sched.alpha_bars[0] == pytest.approx(0.9999, rel=1e-15)

    def test_alpha_bar_400_and_1000(self, sched):
        assert brute_alpha_bar(400) == pytest.approx(0.19514644493343, rel=1e-10)
        assert float(sched.alpha_bar(400)) == pytest.approx(brute_alpha_bar(400), rel=1e-12)
        assert float(sched.alpha_bar(1000)) == pytest.approx(brute_alpha_bar(1000), rel=1e-12)
        assert float(sched.alpha_bar(1000)) == pytest.approx(4.0e-5, rel=0.01)

    def test_recurrence(self, sched):
        ab = sched.alpha_bars
        np.testing.assert_allclose(ab[1:], ab[:-1] * (1 - sched.betas[1:]), rtol=1e-12)
        assert np.all(np.diff(ab) < 0)
        assert np.all((ab > 0) & (ab < 1))

    def test_latent_nearly_gaussian(self, sched):
        assert sched.alpha_bars[-1] < 1e-4

    def test_posterior_variance(self, sched):
        ab, b = sched.alpha_bars, sched.betas
        assert sched.posterior_vars[0] == 0.0
        np.testing.assert_allclose(sched.posterior_vars[1:], (1 - ab[:-1]) / (1 - ab[1:]) * b[1:], rtol=1e-14)

    def test_sigma_modes(self, sched):
        np.testing.assert_array_equal(sched.sigmas, np.sqrt(sched.betas))
        post = make_linear_schedule(1000, 1e-4, 0.02, "posterior")
        np.testing.assert_array_equal(post.sigmas, np.sqrt(post.posterior_vars))
        assert np.all(post.sigmas >= 0)

    def test_linear_spacing(self, sched):
        t = np.arange(1, 1001)
        np.testing.assert_allclose(sched.betas, 1e-4 + (t - 1) * (0.02 - 1e-4) / 999, rtol=1e-14)

    def test_single_step(self):
        s = make_linear_schedule(1, 0.3, 0.3)
        assert s.T == 1 and s.betas[0] == 0.3

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.1), (10, 0.1, 1.0), (2.5, 0.1, 0.2)])
    def test_rejects_bad_bounds(self, args):
        with pytest.raises(ValueError):
            make_linear_schedule(*args)

    def test_table_round_trip(self, sched):
        text = sched.to_table()
        assert text.splitlines()[1] == "t beta alpha_bar sigma"
        again = NoiseSchedule.from_table(text)
        np.testing.assert_array_equal(again.betas, sched.betas)
        assert again.fingerprint() == sched.fingerprint()
        assert len(sched.fingerprint()) == 32

    def test_check_step(self, sched):
        with pytest.raises(ValueError):
            sched.check_step(0)
        with pytest.raises(ValueError):
            sched.check_step(1001)


class TestDiffuse:
    def test_zero_noise(self, sched):
        x0 = np.array([[1.0, -2.0], [0.5, 3.0]])
        out = diffuse(x0, 250, np.zeros_like(x0), sched)
        np.testing.assert_allclose(out.data, math.sqrt(sched.alpha_bars[249]) * x0)

    def test_zero_signal(self, sched):
        z = np.array([[1.0, -2.0]])
        out = diffuse(np.zeros((1, 2)), 250, z, sched)
        np.testing.assert_allclose(out.data, math.sqrt(1 - sched.alpha_bars[249]) * z)

    def test_labels_pass_through(self, sched):
        batch = SampleBatch(np.ones((3, 4)), (2, 2), np.array([1, 2, 3]), client_id=7)
        out = diffuse(batch, 10, np.zeros((3, 4)), sched)
        assert out.shape == (2, 2) and out.client_id == 7
        np.testing.assert_array_equal(out.labels, [1, 2, 3])

    def test_monte_carlo_variance(self, sched):
        rng = np.random.default_rng(1)
        t = 400
        x0 = np.full((100_000, 1), 0.7)
        z = rng.standard_normal(x0.shape)
        resid = diffuse(x0, t, z, sched).data - math.sqrt(sched.alpha_bars[t - 1]) * x0
        assert resid.var() == pytest.approx(1 - sched.alpha_bars[t - 1], rel=0.02)

    def test_errors(self, sched):
        with pytest.raises(ValueError):
            diffuse(np.ones((2, 2)), 5, np.ones((2, 3)), sched)
        with pytest.raises(ValueError):
            diffuse(np.ones((2, 2)), 1001, np.ones((2, 2)), sched)

    @settings(max_examples=40, deadline=None)
    @given(a=st.floats(-5, 5), t=st.integers(1, 1000), seed=st.integers(0, 2**16))
    def test_affine(self, a, t, seed):
        sched = make_linear_schedule(1000)
        rng = np.random.default_rng(seed)
        x0, z = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        lhs = diffuse(a * x0, t, a * z, sched).data
        rhs = a * diffuse(x0, t, z, sched).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestLoss:
    def test_perfect_prediction(self, sched):
        rng = np.random.default_rng(0)
        x0, z = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        assert ddpm_loss(FixedDenoiser(z), x0, 100, z, sched) == 0.0

    def test_zero_denoiser_expectation(self, sched):
        rng = np.random.default_rng(2)
        d = 6
        z = rng.standard_normal((50_000, d))
        loss = ddpm_loss(ZeroDenoiser(d), np.zeros((50_000, d)), 300, z, sched)
        # E||z||^2 = d; std of the batch mean is sqrt(2d / n)
        assert abs(loss - d) < 4 * math.sqrt(2 * d / 50_000)

    def test_batch_averaging(self, sched):
        den = OracleDenoiser(GaussianMixtureSpec.single([0.5, -0.5], 0.3), sched)
        x0 = np.array([[0.2, 0.1]])
        z = np.array([[0.3, -1.2]])
        one = ddpm_loss(den, x0, 50, z, sched)
        two = ddpm_loss(den, np.repeat(x0, 2, 0), 50, np.repeat(z, 2, 0), sched)
        assert one == pytest.approx(two, rel=1e-15)

    def test_oracle_beats_zero_at_every_t(self, sched):
        spec = GaussianMixtureSpec([0.4, 0.6], [[-1.0, 0.0], [1.0, 2.0]], [0.2, 0.5])
        oracle = OracleDenoiser(spec, sched)
        x0, _ = spec.sample(4000, seed=3)
        rng = np.random.default_rng(4)
        for t in range(1, 1001, 37):
            z = rng.standard_normal(x0.shape)
            assert ddpm_loss(oracle, x0, t, z, sched) <= ddpm_loss(ZeroDenoiser(2), x0, t, z, sched)


class TestTraining:
    def test_oracle_unchanged(self, sched):
        spec = GaussianMixtureSpec.single([0.0, 1.0], 0.5)
        oracle = OracleDenoiser(spec, sched)
        x0, _ = spec.sample(64, seed=0)
        cfg = TrainingConfig(batch_size=16, n_steps=8, seed=5)
        run = train_ddpm(x0, 1000, sched, oracle, cfg)
        assert run.denoiser is oracle
        # replay the same draws independently
        from pfdm._rng import stream

        rng = stream(5, "train")
        order = None
        for step in range(8):
            pos = step % 4
            if pos == 0:
                order = rng.permutation(64)
            idx = order[pos * 16:(pos + 1) * 16]
            t = rng.integers(1, 1001, size=16)
            z = rng.standard_normal((16, 2))
            ab = sched.alpha_bars[t - 1][:, None]
            xt = np.sqrt(ab) * x0[idx] + np.sqrt(1 - ab) * z
            expected = np.mean(np.sum((z - oracle.predict(xt, t)) ** 2, axis=1))
            assert run.losses[step] == pytest.approx(expected, rel=1e-14)

    def test_trainable_loss_decreases(self, sched):
        spec = GaussianMixtureSpec.single([2.0, -1.0], 0.1)
        x0, _ = spec.sample(512, seed=1)
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=64, n_steps=2000, seed=0, optimizer="adam", hidden=(32, 32))
        den = build_trainable_denoiser(cfg, (2,), sched.T)
        run = train_ddpm(x0, 1000, sched, den, cfg)
        means = run.epoch_means()
        assert means[-1] < means[0]

    def test_t_max_one(self, sched):
        cfg = TrainingConfig(batch_size=8, n_steps=20, hidden=(8,), time_dim=4)
        den = build_trainable_denoiser(cfg, (2,), sched.T)
        run = train_ddpm(np.ones((16, 2)), 1, sched, den, cfg)
        assert all(np.all(t == 1) for t in run.timesteps)

    def test_deterministic(self, sched):
        cfg = TrainingConfig(batch_size=8, n_steps=30, hidden=(8,), time_dim=4, seed=3)
        x0 = np.random.default_rng(0).standard_normal((40, 2))
        a = train_ddpm(x0, 1000, sched, build_trainable_denoiser(cfg, (2,), 1000), cfg)
        b = train_ddpm(x0, 1000, sched, build_trainable_denoiser(cfg, (2,), 1000), cfg)
        np.testing.assert_array_equal(a.losses, b.losses)
        for k in a.denoiser.params:
            np.testing.assert_array_equal(a.denoiser.params[k], b.denoiser.params[k])

    def test_non_finite_loss_aborts(self, sched):
        cfg = TrainingConfig(learning_rate=1e6, batch_size=8, n_steps=200, hidden=(8,), time_dim=4, optimizer="sgd")
        den = build_trainable_denoiser(cfg, (2,), sched.T)
        with pytest.raises(FloatingPointError, match="non-finite loss"):
            with np.errstate(over="ignore", invalid="ignore"):
                train_ddpm(np.full((16, 2), 50.0), 1000, sched, den, cfg)

    def test_empty_dataset(self, sched):
        with pytest.raises(ValueError):
            train_ddpm(np.zeros((0, 2)), 10, sched, ZeroDenoiser(), TrainingConfig())


class TestReverse:
    def test_pure_rescale(self, sched):
        x = np.array([[1.0, 2.0]])
        out = reverse_step(x, 500, ZeroDenoiser(), sched)
        np.testing.assert_allclose(out.data, x / math.sqrt(1 - sched.betas[499]))

    def test_hand_computed_step(self, sched):
        t = 10
        x0 = np.array([[0.5, -1.0]])
        zstar = np.array([[0.3, 0.8]])
        ab, beta = brute_alpha_bar(t), sched.betas[t - 1]
        xt = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * zstar
        out = reverse_step(xt, t, FixedDenoiser(zstar), sched).data
        # x_{t-1} = (x_t - beta / sqrt(1-ab) z*) / sqrt(1-beta), element by element
        expected = [(xt[0, i] - beta / math.sqrt(1 - ab) * zstar[0, i]) / math.sqrt(1 - beta) for i in range(2)]
        np.testing.assert_allclose(out[0], expected, rtol=1e-10)
        # equivalently sqrt(ab_{t-1}) x0 + coefficient * z* with coefficient known in closed form
        ab_prev = brute_alpha_bar(t - 1)
        coef = (math.sqrt(1 - ab) - beta / math.sqrt(1 - ab)) / math.sqrt(1 - beta)
        np.testing.assert_allclose(out, math.sqrt(ab_prev) * x0 + coef * zstar, rtol=1e-10)

    def test_noise_term(self, sched):
        z = np.array([[1.0, -1.0]])
        out = reverse_step(np.zeros((1, 2)), 3, ZeroDenoiser(), sched, z)
        np.testing.assert_allclose(out.data, sched.sigmas[2] * z)

    def test_nonzero_noise_at_final_step(self, sched):
        with pytest.raises(ValueError):
            reverse_step(np.zeros((1, 2)), 1, ZeroDenoiser(), sched, np.ones((1, 2)))
        reverse_step(np.zeros((1, 2)), 1, ZeroDenoiser(), sched, np.zeros((1, 2)))

    def test_alpha_coefficient(self, sched):
        x = np.array([[1.0, 2.0]])
        out = reverse_step(x, 500, ZeroDenoiser(), sched, coefficient="alpha")
        np.testing.assert_allclose(out.data, x / (1 - sched.betas[499]))

    def test_shape_and_labels_preserved(self, sched):
        batch = SampleBatch(np.ones((2, 4)), (1, 2, 2), np.array([3, 4]))
        out = reverse_step(batch, 7, ZeroDenoiser(4), sched)
        assert out.shape == (1, 2, 2)
        np.testing.assert_array_equal(out.labels, [3, 4])


class TestSampler:
    def test_count_one(self, sched):
        den = OracleDenoiser(GaussianMixtureSpec.single([0, 0, 0], 1.0), sched)
        out = sample_ddpm(den, sched, count=1, seed=0)
        assert out.data.shape == (1, 3)

    def test_same_seed_bit_identical(self, sched):
        den = OracleDenoiser(GaussianMixtureSpec.single([1.0, 2.0], 0.5), sched)
        a = sample_ddpm(den, sched, 300, 50, seed=9).data
        b = sample_ddpm(den, sched, 300, 50, seed=9).data
        assert a.tobytes() == b.tobytes()
        c = sample_ddpm(den, sched, 300, 50, seed=10).data
        assert a.tobytes() != c.tobytes()

    def test_moments_converge(self):
        s = make_linear_schedule(200, 5e-4, 0.1)
        mu, var = np.array([1.0, -2.0]), 0.36
        den = OracleDenoiser(GaussianMixtureSpec.single(mu, var), s)
        x = sample_ddpm(den, s, count=10_000, seed=0).data
        sd = math.sqrt(var)
        assert np.all(np.abs(x.mean(0) - mu) < 3 * 3 * sd / math.sqrt(10_000))
        np.testing.assert_allclose(x.var(0), var, rtol=0.10)
