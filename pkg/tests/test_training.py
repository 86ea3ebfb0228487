import csv
from dataclasses import replace

import numpy as np
import pytest

from eae.datasets import gen_correlated_gaussian, gen_gaussian_mixture
from eae.diagnostics import scaled_gaussian_toy, free_energy_check
from eae.networks import build_model, recon_loss_and_grad
from eae.optim import Adam
from eae.sampler import ThermostatConfig
from eae.training import (
    EncoderEnsemble,
    MinibatchStream,
    ReconObjective,
    TrainConfig,
    TrainingDiverged,
    ae_train,
    decoder_grad_estimate,
    eae_sample_latents,
    eae_train,
    sample_ensemble,
    vae_train,
)


@pytest.fixture
def toy2d():
    return gen_correlated_gaussian(2, 200, seed=0)


@pytest.fixture(scope="module")
def gmm():
    return gen_gaussian_mixture(k=4, dim=8, n=200, seed=0)


def ensemble_of(*grads):
    ens = EncoderEnsemble()
    for g in grads:
        ens.add(np.zeros(1), g)
    return ens


class TestDecoderGradEstimate:
    def test_symmetric_pair(self):
        g = np.array([0.5, -2.0])
        assert np.all(decoder_grad_estimate(ensemble_of(g, -g)) == 0)

    def test_single(self):
        g = np.array([0.5, -2.0])
        assert np.array_equal(decoder_grad_estimate(ensemble_of(g)), g)

    def test_arithmetic(self):
        est = decoder_grad_estimate(ensemble_of(np.array([1.0, 3.0]), np.array([3.0, 5.0])))
        assert np.array_equal(est, [2.0, 4.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            decoder_grad_estimate(EncoderEnsemble())

    def test_converges_with_ensemble_size(self):
        # exact Gibbs draws of the scaled-Gaussian toy; RMS error should halve as M quadruples
        toy = scaled_gaussian_toy()
        vt, beta = 0.7, 1.0
        exact = free_energy_check(toy, vt, beta).grad_expectation
        rng = np.random.default_rng(0)
        sd = 1.0 / (vt * np.sqrt(beta))
        rms = []
        for M in (16, 64, 256):
            errs = []
            for _ in range(400):
                phis = rng.normal(0.0, sd, size=M)
                ens = ensemble_of(*np.atleast_2d(toy.dloss(phis[:, None], vt)).reshape(M, -1))
                errs.append(decoder_grad_estimate(ens)[0] - exact)
            rms.append(np.sqrt(np.mean(np.square(errs))))
        ratios = np.array(rms[:-1]) / np.array(rms[1:])
        assert np.all((ratios > 1.6) & (ratios < 2.5))


class TestSampleLatents:
    def test_single_member(self, small_ae, rng):
        phi, theta = small_ae.init(0)
        y = rng.standard_normal(5)
        z = eae_sample_latents(small_ae, theta, [phi], y)
        assert z.shape == (1, 1, 2)
        assert np.array_equal(z[0, 0], small_ae.encode(phi, y))

    def test_duplicate_members(self, small_ae, rng):
        phi, theta = small_ae.init(0)
        z = eae_sample_latents(small_ae, theta, [phi, phi], rng.standard_normal((3, 5)))
        assert np.array_equal(z[0], z[1])

    def test_empty(self, small_ae):
        with pytest.raises(ValueError):
            eae_sample_latents(small_ae, None, [], np.zeros((1, 5)))

    def test_pushforward_variance(self, toy2d):
        # the loss is quadratic in a linear encoder, so the Gibbs measure is N(phi*, T H^-1)
        model = build_model(2, 1, activation="linear")
        T = 1e-3
        th = ThermostatConfig(T, dt=0.1, seed=0)
        cfg = TrainConfig(ensemble_size=10, batch_size=200, max_outer_iterations=100, lr=0.01,
                          thermostat=th, seed=0)
        theta, _, rep = eae_train(model, toy2d.inputs, cfg)
        obj = ReconObjective(model, toy2d.inputs)
        strong = replace(th, chain_mass=3 * T * 0.5**2)
        ens, _ = sample_ensemble(obj, theta, rep.final_state, strong, 40_000)
        members = ens.as_array()[5_000::10]
        q = toy2d.inputs[:5]
        z = eae_sample_latents(model, theta, members, q)[:, :, 0]

        phi0 = members.mean(axis=0)
        all_rows = np.arange(obj.n_rows)
        H = np.empty((3, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-5
            H[:, i] = (obj.loss_and_grad(phi0 + e, theta, all_rows)[1]
                       - obj.loss_and_grad(phi0 - e, theta, all_rows)[1]) / 2e-5
        C = T * np.linalg.inv(H)
        J = np.hstack([q, np.ones((5, 1))])
        analytic = np.einsum("ij,jk,ik->i", J, C, J)
        assert np.all(np.abs(z.var(axis=0) / analytic - 1) <= 0.2)


class TestEaeTrain:
    def test_degenerate_ensemble_is_gradient_step(self, small_ae, rng):
        y = rng.standard_normal((8, 5))
        th = ThermostatConfig(1e-12, dt=0.1, mass=1.0)
        cfg = TrainConfig(ensemble_size=1, batch_size=8, max_outer_iterations=1, thermostat=th)
        phi0, theta0 = small_ae.init(1)
        theta, ens, rep = eae_train(small_ae, y, cfg, init=(phi0, theta0))
        _, g_phi, g_theta = recon_loss_and_grad(small_ae, phi0, theta0, y)
        assert np.array_equal(ens.members[0], phi0)
        expected_phi = phi0 - 0.5 * th.dt**2 / th.mass * g_phi
        assert np.allclose(rep.final_state.positions, expected_phi, atol=1e-6)
        assert np.allclose(theta, Adam(cfg.lr).step(theta0, g_theta), rtol=0, atol=1e-15)

    def test_loss_decreases(self, toy2d):
        model = build_model(2, 1, activation="linear")
        cfg = TrainConfig(ensemble_size=5, batch_size=32, max_outer_iterations=100, lr=0.01,
                          thermostat=ThermostatConfig(1e-4, dt=0.1), seed=3)
        _, _, rep = eae_train(model, toy2d.inputs, cfg)
        assert rep.final_loss < rep.initial_loss

    def test_bit_identical(self, toy2d):
        model = build_model(2, 1, (3,), (3,))
        cfg = TrainConfig(ensemble_size=3, batch_size=16, max_outer_iterations=10,
                          thermostat=ThermostatConfig(1e-3, dt=0.05, seed=2), seed=2)
        a = eae_train(model, toy2d, cfg)
        b = eae_train(model, toy2d, cfg)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1].as_array(), b[1].as_array())

    def test_tolerance_stops(self, toy2d):
        model = build_model(2, 1, activation="linear")
        cfg = TrainConfig(ensemble_size=2, tolerance=1e6, max_outer_iterations=50,
                          thermostat=ThermostatConfig(1e-3))
        _, _, rep = eae_train(model, toy2d, cfg)
        assert len(rep.records) == 1 and not rep.max_iterations_reached
        assert rep.records[-1].grad_norm <= cfg.tolerance

    def test_max_iterations_flag(self, toy2d):
        model = build_model(2, 1, activation="linear")
        cfg = TrainConfig(ensemble_size=2, max_outer_iterations=3, thermostat=ThermostatConfig(1e-3))
        _, _, rep = eae_train(model, toy2d, cfg)
        assert len(rep.records) == 3 and rep.max_iterations_reached

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_last_good(self, toy2d):
        model = build_model(2, 1, activation="linear")
        cfg = TrainConfig(ensemble_size=2, max_outer_iterations=50,
                          thermostat=ThermostatConfig(1e-3, dt=50.0))
        with pytest.raises(TrainingDiverged) as exc:
            eae_train(model, toy2d.inputs * 1e3, cfg)
        assert set(exc.value.last_good) >= {"decoder", "encoder"}

    def test_requires_thermostat(self, toy2d):
        with pytest.raises(ValueError):
            eae_train(build_model(2, 1), toy2d, TrainConfig())

    def test_report_csv(self, toy2d, tmp_path):
        model = build_model(2, 1, activation="linear")
        cfg = TrainConfig(ensemble_size=3, max_outer_iterations=2, thermostat=ThermostatConfig(1e-3))
        _, _, rep = eae_train(model, toy2d, cfg)
        rep.write_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["outer_iter", "inner_iter", "member_loss", "post_update_loss", "grad_norm"]
        assert len(rows) == 1 + 2 * 3

    def test_checkpoint_callback(self, toy2d):
        model = build_model(2, 1, activation="linear")
        seen = []
        cfg = TrainConfig(ensemble_size=2, max_outer_iterations=6, checkpoint_every=2,
                          thermostat=ThermostatConfig(1e-3))
        eae_train(model, toy2d, cfg, on_checkpoint=lambda k, *rest: seen.append(k))
        assert seen == [2, 4, 6]


class TestBaselines:
    def test_ae_memorizes_single_point(self):
        y = np.tile(np.array([[0.3, -1.2, 0.8]]), (16, 1))
        model = build_model(3, 2, (8,), (8,))
        (_, _), rep = ae_train(model, y, TrainConfig(batch_size=16, lr=1e-2, epochs=500))
        assert rep.epochs[-1][1] == 500
        assert rep.final_loss < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_trainers_reduce_loss(self, gmm, seed):
        ae = build_model(8, 2, (16,), (16,))
        vae = build_model(8, 2, (16,), (16,), variational=True)
        cfg = TrainConfig(batch_size=32, epochs=5, lr=3e-3, seed=seed)
        _, r1 = ae_train(ae, gmm, cfg)
        _, r2 = vae_train(vae, gmm, cfg)
        assert r1.final_loss < r1.initial_loss
        assert r2.final_loss < r2.initial_loss
        eae_cfg = replace(cfg, ensemble_size=2, max_outer_iterations=100,
                          thermostat=ThermostatConfig(1e-5, dt=0.2, seed=seed))
        _, _, r3 = eae_train(ae, gmm, eae_cfg)
        assert r3.final_loss < r3.initial_loss

    def test_max_steps(self, gmm):
        _, rep = ae_train(build_model(8, 2), gmm, TrainConfig(batch_size=32, epochs=10, max_steps=7))
        assert rep.epochs[-1][1] == 7

    def test_baseline_report_csv(self, gmm, tmp_path):
        _, rep = ae_train(build_model(8, 2), gmm, TrainConfig(epochs=2))
        rep.write_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["epoch", "steps", "batch_loss", "full_loss"] and len(rows) == 3


class TestMinibatchStream:
    def test_epoch_covers_rows(self):
        s = MinibatchStream(10, 5, np.random.default_rng(0))
        first = np.concatenate([next(s), next(s)])
        assert sorted(first) == list(range(10))
        second = np.concatenate([next(s), next(s)])
        assert not np.array_equal(first, second) and s.epoch == 2

    def test_full_batch(self):
        s = MinibatchStream(4, 100, np.random.default_rng(0))
        assert np.array_equal(next(s), np.arange(4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(ensemble_size=0)
        with pytest.raises(ValueError):
            TrainConfig(ensemble_size=2, burn_in_discard=2)
