import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivae_lab import model as mdl
from ivae_lab import nets, priors
from ivae_lab.autodiff import Tape, Tensor, backward
from ivae_lab.model import ModelConfig, TrainConfig


def toy_data(seed=0, n_rows=64, d=3, m=4):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n_rows, d))
    u = np.eye(m)[gen.integers(0, m, n_rows)]
    return x, u


def linear_gaussian(seed=0, M=5, L=400, a=1.5, b=0.3, noise_var=0.01):
    """1-D sources with per-segment variance, x = a z + b + noise; exact log p(x|u) per row."""
    gen = np.random.default_rng(seed)
    var = gen.uniform(0.5, 3.0, M)
    seg = np.repeat(np.arange(M), L)
    z = gen.normal(size=M * L) * np.sqrt(var[seg])
    x = (a * z + b + math.sqrt(noise_var) * gen.normal(size=M * L))[:, None]
    total = a * a * var[seg] + noise_var
    log_lik = -0.5 * np.log(2 * math.pi * total) - 0.5 * (x[:, 0] - b) ** 2 / total
    return x, np.eye(M)[seg], float(log_lik.mean())


class TestReparameterize:
    def test_degenerate_variance(self):
        mu = Tensor(np.array([[0.5, -2.0]]))
        z = mdl.reparameterize(mu, Tensor(np.full((1, 2), math.log(1e-12))), 0)
        np.testing.assert_allclose(z.data, mu.data, atol=1e-5)

    def test_moments(self):
        z = mdl.reparameterize(Tensor(np.zeros((100_000, 1))), Tensor(np.zeros((100_000, 1))), 3).data
        assert abs(z.var() - 1.0) < 0.02
        assert abs(z.mean()) < 0.01

    def test_gradient_reaches_mean_not_noise(self):
        mu = Tensor(np.zeros((4, 2)), requires_grad=True)
        lv = Tensor(np.zeros((4, 2)), requires_grad=True)
        with Tape():
            backward(mdl.reparameterize(mu, lv, 1).mean())
        np.testing.assert_allclose(mu.grad, 1.0 / 8)
        assert np.abs(lv.grad).sum() > 0


class TestAnalyticKl:
    def _kl(self, mu, logvar, naturals):
        cfg = ModelConfig(data_dim=1, latent_dim=1, aux_dim=1, family="gaussian_mean_var")
        model = mdl.build_model(cfg, 0)
        return mdl.gaussian_kl(model, Tensor([[mu]]), Tensor([[logvar]]), Tensor([naturals])).item()

    def test_same_distribution(self):
        assert self._kl(0.0, 0.0, [0.0, -0.5]) == pytest.approx(0.0, abs=1e-15)

    def test_shifted_mean(self):
        assert self._kl(1.0, 0.0, [0.0, -0.5]) == pytest.approx(0.5)

    def test_matches_closed_form_for_general_gaussians(self):
        # KL(N(m1, v1) || N(m2, v2)) written out directly
        m1, v1, m2, v2 = 0.3, 0.7, -1.2, 2.5
        expected = 0.5 * (math.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1)
        assert self._kl(m1, math.log(v1), [m2 / v2, -0.5 / v2]) == pytest.approx(expected, rel=1e-12)

    def test_requires_gaussian_prior(self):
        cfg = ModelConfig(data_dim=1, latent_dim=1, aux_dim=1, family="laplace_scale")
        model = mdl.build_model(cfg, 0)
        with pytest.raises(ValueError):
            mdl.gaussian_kl(model, Tensor([[0.0]]), Tensor([[0.0]]), Tensor([[1.0]]))

    def test_analytic_and_sampled_elbo_agree(self):
        x, u = toy_data(1)
        cfg = ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, family="gaussian_mean_var", hidden_dim=10)
        model = mdl.build_model(cfg, 0)
        sampled, se = mdl.evaluate_elbo(model, x, u, samples=2000)
        analytic, _ = mdl.evaluate_elbo(model, x, u, samples=2000, analytic_kl=True)
        assert abs(sampled - analytic) < 3 * se


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(-5, 5), logvar=st.floats(-5, 3), mean=st.floats(-5, 5), var=st.floats(0.05, 10))
def test_analytic_kl_is_non_negative(mu, logvar, mean, var):
    cfg = ModelConfig(data_dim=1, latent_dim=1, aux_dim=1, family="gaussian_mean_var")
    model = mdl.build_model(cfg, 0)
    kl = mdl.gaussian_kl(model, Tensor([[mu]]), Tensor([[logvar]]), Tensor([[mean / var, -0.5 / var]])).item()
    assert kl >= -1e-12


class TestElbo:
    def test_breakdown_and_shapes(self):
        x, u = toy_data()
        model = mdl.build_model(ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, hidden_dim=10), 0)
        obj, parts = mdl.elbo(model, x, u, 0)
        assert obj.shape == ()
        assert parts["per_point"].shape == (64,)
        assert obj.item() == pytest.approx(parts["recon"] - parts["kl"])
        assert parts["elbo"] == pytest.approx(obj.item())

    def test_bernoulli_rejects_non_binary(self):
        x, u = toy_data()
        model = mdl.build_model(ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, likelihood="bernoulli"), 0)
        with pytest.raises(ValueError, match="bernoulli"):
            mdl.elbo(model, x, u, 0)
        _, parts = mdl.elbo(model, (x > 0).astype(float), u, 0)
        assert np.isfinite(parts["elbo"])

    def test_baselines_ignore_u(self):
        x, u = toy_data()
        for variant in ("vae", "beta_vae", "beta_tc_vae"):
            model = mdl.build_model(ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, variant=variant), 0)
            _, a = mdl.elbo(model, x, u, 0, 64)
            _, b = mdl.elbo(model, x, np.roll(u, 1, axis=1), 0, 64)
            assert a["objective"] == b["objective"]

    def test_ivae_uses_u(self):
        x, u = toy_data()
        model = mdl.build_model(ModelConfig(data_dim=3, latent_dim=2, aux_dim=4), 0)
        _, a = mdl.elbo(model, x, u, 0)
        _, b = mdl.elbo(model, x, np.roll(u, 1, axis=1), 0)
        assert a["objective"] != b["objective"]

    def test_unit_weights_reduce_to_vanilla(self):
        gen = np.random.default_rng(2)
        x = gen.normal(size=(256, 2))
        u = np.eye(3)[gen.integers(0, 3, 256)]
        base = ModelConfig(data_dim=2, latent_dim=2, aux_dim=3, hidden_dim=10)
        vae = mdl.build_model(mdl.with_variant(base, "vae"), 0)
        _, ref = mdl.elbo(vae, x, u, 5, 256)
        for variant in ("beta_vae", "beta_tc_vae"):
            other = mdl.build_model(mdl.with_variant(base, variant), 0)
            _, parts = mdl.elbo(other, x, u, 5, 256)
            assert abs(parts["objective"] - ref["objective"]) <= 0.1
        tc = mdl.build_model(mdl.with_variant(base, "beta_tc_vae"), 0)
        _, parts = mdl.elbo(tc, x, u, 5, 256)
        assert set(parts) >= {"mutual_info", "total_correlation", "dimwise_kl"}

    def test_beta_weights_kl(self):
        x, u = toy_data()
        base = ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, hidden_dim=10)
        _, one = mdl.elbo(mdl.build_model(mdl.with_variant(base, "vae"), 0), x, u, 0)
        _, four = mdl.elbo(mdl.build_model(mdl.with_variant(base, "beta_vae", beta=4.0), 0), x, u, 0)
        assert four["objective"] == pytest.approx(one["recon"] - 4.0 * one["kl"])

    def test_anneal_weights(self):
        assert mdl.anneal_weights(10, 10, 0.01) is None
        a, mi, tc, dw = mdl.anneal_weights(0, 10, 0.01)
        assert (a, mi, tc, dw) == (50.0, 15.0, 0.0, 25.0)
        a, mi, tc, dw = mdl.anneal_weights(9, 10, 0.01)
        assert tc == pytest.approx(0.9) and mi == pytest.approx(1.5)


def _param_gradient_errors(model, x, u, seed, step=1e-6):
    """Relative error of backward() against central differences, per parameter tensor."""
    with Tape():
        model.zero_grad()
        obj, _ = mdl.elbo(model, x, u, seed, x.shape[0])
        backward(-obj)
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            old = p.data[idx]
            p.data[idx] = old + step
            up = mdl.elbo(model, x, u, seed, x.shape[0])[0].item()
            p.data[idx] = old - step
            down = mdl.elbo(model, x, u, seed, x.shape[0])[0].item()
            p.data[idx] = old
            numeric[idx] = -(up - down) / (2 * step)
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        errors[name] = np.linalg.norm(analytic - numeric) / denom if denom > 0 else 0.0
    return errors


@pytest.mark.parametrize("variant,family,likelihood", [
    ("ivae", "gaussian_var", "gaussian"),
    ("ivae", "gaussian_mean_var", "gaussian"),
    ("ivae", "laplace_scale", "bernoulli"),
    ("vae", "gaussian_var", "gaussian"),
    ("beta_vae", "gaussian_var", "gaussian"),
    ("beta_tc_vae", "gaussian_var", "gaussian"),
])
def test_negative_elbo_gradient_matches_finite_differences(variant, family, likelihood):
    gen = np.random.default_rng(7)
    x = gen.normal(size=(4, 2))
    if likelihood == "bernoulli":
        x = (x > 0).astype(float)
    u = np.eye(3)[[0, 1, 2, 0]]
    cfg = ModelConfig(data_dim=2, latent_dim=2, aux_dim=3, family=family, variant=variant, hidden_dim=6,
                      likelihood=likelihood, beta=3.0, learn_noise=likelihood == "gaussian")
    errors = _param_gradient_errors(mdl.build_model(cfg, 3), x, u, (11,))
    assert max(errors.values()) < 1e-3, errors


class TestTrain:
    def setup_method(self):
        self.x, self.u = toy_data(3, n_rows=128)
        self.cfg = ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, hidden_dim=10)

    def test_zero_epochs_leaves_parameters(self):
        model = mdl.build_model(self.cfg, 0)
        before = model.snapshot()
        result = mdl.train(model, self.x, self.u, TrainConfig(epochs=0))
        assert result.trace == []
        for name, value in model.snapshot().items():
            np.testing.assert_array_equal(value, before[name])

    def test_same_seed_same_parameters(self):
        runs = []
        for _ in range(2):
            model = mdl.build_model(self.cfg, 4)
            mdl.train(model, self.x, self.u, TrainConfig(epochs=3, batch_size=32, seed=4))
            runs.append(model.snapshot())
        for name in runs[0]:
            assert runs[0][name].tobytes() == runs[1][name].tobytes()

    def test_resume_matches_uninterrupted(self):
        config = TrainConfig(epochs=4, batch_size=32, seed=2)
        full = mdl.build_model(self.cfg, 1)
        mdl.train(full, self.x, self.u, config)
        part = mdl.build_model(self.cfg, 1)
        first = mdl.train(part, self.x, self.u, TrainConfig(epochs=2, batch_size=32, seed=2))
        mdl.train(part, self.x, self.u, config, start_epoch=2, adam=first.adam)
        for name, value in full.snapshot().items():
            np.testing.assert_array_equal(part.snapshot()[name], value)

    def test_trace_rows(self):
        result = mdl.train(mdl.build_model(self.cfg, 0), self.x, self.u, TrainConfig(epochs=3, batch_size=32))
        assert [r["epoch"] for r in result.trace] == [0, 1, 2]
        assert all(set(r) >= {"elbo", "elbo_se", "lr"} for r in result.trace)
        assert result.trace[1]["lr"] == pytest.approx(0.01 * 0.99)

    def test_invalid_inputs(self):
        model = mdl.build_model(self.cfg, 0)
        with pytest.raises(ValueError, match="dims"):
            mdl.train(model, self.x[:, :2], self.u, TrainConfig(epochs=1))
        with pytest.raises(ValueError, match="batch"):
            mdl.train(model, self.x, self.u, TrainConfig(epochs=1, batch_size=1000))
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_divergence_names_epoch_and_batch(self):
        model = mdl.build_model(self.cfg, 0)
        with pytest.raises(mdl.TrainingDivergedError, match="epoch 0, batch 0"):
            mdl.train(model, self.x * 1e200, self.u, TrainConfig(epochs=1, batch_size=32))


def test_linear_gaussian_elbo_reaches_log_likelihood():
    x, u, log_lik = linear_gaussian()
    model = mdl.build_model(ModelConfig(data_dim=1, latent_dim=1, aux_dim=5, hidden_dim=20), 0)
    result = mdl.train(model, x, u, TrainConfig(epochs=200, batch_size=64, lr=0.003, analytic_kl=True))
    for row in result.trace:
        assert row["elbo"] <= log_lik + 3 * row["elbo_se"]
    final, se = mdl.evaluate_elbo(model, x, u, samples=20)
    assert final <= log_lik + 3 * se
    assert abs(final - log_lik) < 0.1


class TestPosteriorAndGenerate:
    def setup_method(self):
        self.cfg = ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, hidden_dim=10)
        self.model = mdl.build_model(self.cfg, 0)
        self.x, self.u = toy_data(5)

    def test_posterior_stats(self):
        mu, var, sample = mdl.posterior_stats(self.model, self.x, self.u)
        assert (var > 0).all()
        np.testing.assert_array_equal(mu, mdl.posterior_stats(self.model, self.x, self.u)[0])
        assert not np.array_equal(sample, mu)
        np.testing.assert_array_equal(mdl.latent_estimate(self.model, self.x, self.u), mu)
        np.testing.assert_array_equal(mdl.latent_estimate(self.model, self.x, self.u, use_samples=True), sample)

    def test_noise_free_generation_is_decoder_output(self):
        u = np.eye(4)[np.arange(20) % 4]
        lam = self.model.prior_naturals(Tensor(u)).data
        z = priors.sample_prior(self.cfg.prior_spec, lam, 20, 9)
        expected = nets.mlp_forward(self.model.f_net, Tensor(z)).data
        np.testing.assert_array_equal(mdl.generate(self.model, u, 9, noise=False), expected)

    def test_generated_mean_matches_decoder_mean(self):
        u = np.eye(4)[np.zeros(10_000, dtype=int)]
        noisy = mdl.generate(self.model, u, 2)
        clean = mdl.generate(self.model, u, 2, noise=False)
        resid = noisy - clean
        assert (np.abs(resid.mean(axis=0)) < 3 * 0.1 / math.sqrt(10_000)).all()
        assert abs(resid.var() - 0.01) < 0.001

    def test_generated_variance_tracks_prior(self):
        spec = priors.ExpFamilySpec("gaussian_var", 1)
        variances = np.linspace(0.5, 3.0, 10)
        cfg = ModelConfig(data_dim=1, latent_dim=1, aux_dim=10, hidden_dim=10)
        model = mdl.build_model(cfg, 1)
        model.lambda_map = priors.LambdaMap.from_naturals(spec, priors.moment_to_natural(spec, 0.0,
                                                                                          variances[:, None]))
        for w in model.f_net.weights:
            w.data = np.abs(w.data)  # monotone decoder
        out = [mdl.generate(model, np.eye(10)[[s] * 2000], s).var() for s in range(10)]
        ranks = np.argsort(np.argsort(out))
        assert np.corrcoef(ranks, np.arange(10))[0, 1] > 0.9


class TestPersistence:
    def test_round_trip_with_optimizer(self, tmp_path):
        x, u = toy_data(6)
        cfg = ModelConfig(data_dim=3, latent_dim=2, aux_dim=4, hidden_dim=10)
        model = mdl.build_model(cfg, 0)
        result = mdl.train(model, x, u, TrainConfig(epochs=2, batch_size=32))
        mdl.save_model(model, tmp_path / "m", {"seed": 0}, result.adam)
        back, meta, adam = mdl.load_model(tmp_path / "m")
        assert meta["seed"] == 0 and meta["variant"] == "ivae"
        assert back.config == cfg
        for name, value in model.snapshot().items():
            np.testing.assert_array_equal(back.snapshot()[name], value)
        assert adam.step_count == result.adam.step_count
        for a, b in zip(adam.m, result.adam.m):
            np.testing.assert_array_equal(a, b)
