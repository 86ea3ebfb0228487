import csv

import numpy as np
import pytest

from eae import diagnostics as dg
from eae.diagnostics import (
    Grid,
    GridTooSmallError,
    class_conditional_latents,
    cv_marginal_check,
    ensemble_mean_code,
    free_energy_check,
    interpolate_codes,
    interpolation_grid,
    latent_activity,
    mean_pairwise_overlap,
    test_mse as per_pixel_mse,
)
from eae.networks import LossKind, build_model


class TestActivity:
    def test_count(self):
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((10_000, 3)) * np.sqrt([0.02, 0.005, 0.3])
        # rescale to exact population variances
        Z = (Z - Z.mean(0)) / Z.std(0) * np.sqrt([0.02, 0.005, 0.3])
        rep = latent_activity(Z)
        assert rep.threshold == 0.01
        assert rep.active_count == 2 and rep.n_z == 3
        assert rep.active.tolist() == [True, False, True]

    def test_constant_column(self, rng):
        Z = np.column_stack([rng.standard_normal(20), np.full(20, 4.0)])
        rep = latent_activity(Z)
        assert rep.variances[1] == 0.0 and not rep.active[1]

    def test_population_variance(self):
        assert latent_activity(np.array([[0.0], [2.0]])).variances[0] == 1.0

    def test_permutation_and_scaling(self, rng):
        Z = rng.standard_normal((50, 4)) * [0.05, 0.2, 1.0, 0.01]
        base = latent_activity(Z)
        perm = [2, 0, 3, 1]
        assert np.array_equal(latent_activity(Z[:, perm]).active, base.active[perm])
        scaled = latent_activity(Z * 3.0, threshold=0.09)
        assert np.allclose(scaled.variances, 9 * base.variances)
        assert np.array_equal(scaled.active, base.active)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            latent_activity(np.zeros((1, 3)))

    def test_csv(self, tmp_path, rng):
        latent_activity(rng.standard_normal((5, 2))).write_csv(tmp_path / "a.csv")
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert rows[0] == ["dim", "variance", "active"] and len(rows) == 3


class TestEnsembleMean:
    def test_single(self):
        z = np.array([[[0.5, -1.0]]])
        assert np.array_equal(ensemble_mean_code(z), [0.5, -1.0])

    def test_symmetric_members(self):
        z = np.array([1.0, -2.0])
        assert np.all(ensemble_mean_code([np.stack([z, -z])]) == 0)

    def test_two_stage_equals_flat(self, rng):
        Z = rng.standard_normal((4, 9, 3))
        assert np.allclose(ensemble_mean_code(Z), Z.reshape(-1, 3).mean(0), atol=1e-14)

    def test_ragged_order(self):
        # sample means first: (0 + 2) / 2 and 10, then their mean
        z = [np.array([[0.0], [2.0]]), np.array([[10.0]])]
        assert ensemble_mean_code(z)[0] == 5.5

    def test_class_filter(self, rng):
        Z = rng.standard_normal((3, 6, 2))
        labels = np.array([0, 1, 0, 1, 1, 0])
        got = ensemble_mean_code(Z, labels, 1)
        assert np.allclose(got, Z[:, labels == 1].reshape(-1, 2).mean(0))
        with pytest.raises(ValueError):
            ensemble_mean_code(Z, labels, 7)


class TestInterpolation:
    def test_endpoints_bitwise(self, rng):
        z1, z2 = rng.standard_normal(5), rng.standard_normal(5)
        assert np.array_equal(interpolate_codes(z1, z2, 1.0), z1)
        assert np.array_equal(interpolate_codes(z1, z2, 0.0), z2)
        assert np.allclose(interpolate_codes(z1, z2, 0.5), 0.5 * (z1 + z2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interpolate_codes(np.zeros(2), np.zeros(3), 0.5)

    def test_grid(self):
        alphas, codes = interpolation_grid(np.ones(2), np.zeros(2), 11)
        assert len(alphas) == 11 and np.array_equal(codes[-1], np.ones(2))
        assert np.allclose(codes[:, 0], alphas)


class TestClassLatents:
    def test_disjoint_spikes(self):
        Z = np.array([[0.0], [0.0], [1.0], [1.0]])
        cl = class_conditional_latents(Z, [0, 0, 1, 1])
        g = cl.grids[0]
        p, q = cl.densities[(0, 0)], cl.densities[(1, 0)]
        assert np.count_nonzero(p) == 1 and np.count_nonzero(q) == 1
        assert np.argmax(p) != np.argmax(q)
        assert dg.overlap_coefficient(p, q, g) == 0.0

    def test_label_shuffle_permutes_classes(self, rng):
        Z = rng.standard_normal((40, 2))
        labels = np.repeat([0, 1], 20)
        a = class_conditional_latents(Z, labels)
        b = class_conditional_latents(Z, 1 - labels)
        for d in (0, 1):
            assert np.array_equal(a.densities[(0, d)], b.densities[(1, d)])

    def test_curves_normalised_and_written(self, tmp_path, rng):
        Z = rng.standard_normal((3, 30, 2))
        cl = class_conditional_latents(Z, rng.integers(0, 3, 30), grid_points=256)
        for (c, d), dens in cl.densities.items():
            assert len(dens) == 256
            assert np.trapezoid(dens, cl.grids[d]) == pytest.approx(1.0)
        paths = cl.write_curves(tmp_path)
        assert len(paths) == 6
        rows = list(csv.reader(open(paths[0])))
        assert rows[0] == ["z", "density"] and len(rows) == 257

    def test_overlap_separated_vs_mixed(self, rng):
        a = rng.normal(0, 1, 300)
        sep = class_conditional_latents(np.concatenate([a, a + 10])[:, None], np.repeat([0, 1], 300))
        mix = class_conditional_latents(np.concatenate([a, a + 0.1])[:, None], np.repeat([0, 1], 300))
        assert mean_pairwise_overlap(sep) < 0.01 < 0.9 < mean_pairwise_overlap(mix)


class TestMse:
    def test_perfect(self, rng):
        m = build_model(3, 3, activation="linear")
        eye = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
        assert per_pixel_mse(m, eye, eye, rng.standard_normal((4, 3))) == 0.0

    def test_half_predictor(self, rng):
        m = build_model(4, 1, activation="linear")
        phi = np.zeros(m.encoder.n_params)
        theta = np.zeros(m.decoder.n_params)  # logits 0 -> sigmoid 0.5
        y = rng.integers(0, 2, size=(10, 4)).astype(float)
        assert per_pixel_mse(m, phi, theta, y, LossKind.BCE_LOGITS) == 0.25

    def test_ensemble_uses_mean_code(self, rng):
        m = build_model(3, 2, activation="linear")
        p1, theta = m.init(0)
        p2 = p1 + 0.1
        y = rng.standard_normal((5, 3))
        z = 0.5 * (m.encode(p1, y) + m.encode(p2, y))
        expected = np.mean((m.decode(theta, z) - y) ** 2)
        assert per_pixel_mse(m, [p1, p2], theta, y) == pytest.approx(expected, rel=1e-14)

    def test_vae_uses_mean(self, small_vae, rng):
        phi, theta = small_vae.init(0)
        y = rng.standard_normal((4, 5))
        mu = small_vae.encode_stats(phi, y)[0]
        expected = np.mean((small_vae.decode(theta, mu) - y) ** 2)
        assert per_pixel_mse(small_vae, phi, theta, y) == pytest.approx(expected, rel=1e-14)


class TestFreeEnergy:
    def test_translation_zero(self):
        res = free_energy_check(dg.translation_toy(), 0.5, 1.0)
        assert abs(res.grad_fd) < 1e-6 and abs(res.grad_expectation) < 1e-6

    @pytest.mark.parametrize("vt,beta", [(0.7, 1.0), (1.3, 2.5)])
    def test_scaled_gaussian_closed_form(self, vt, beta):
        res = free_energy_check(dg.scaled_gaussian_toy(), vt, beta, fd_step=1e-4)
        F = -np.log(np.sqrt(2 * np.pi / (beta * vt**2))) / beta
        assert res.free_energy == pytest.approx(F, abs=1e-6)
        assert res.grad_fd == pytest.approx(1 / (beta * vt), abs=1e-6)
        assert res.grad_expectation == pytest.approx(1 / (beta * vt), abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_toys(self, seed):
        res = free_energy_check(dg.random_toy(seed), 0.4, 1.0)
        assert res.discrepancy <= 1e-3

    def test_shipped_toys(self):
        from eae.verify import FREE_ENERGY_CASES

        names = set()
        for make, vt, beta in FREE_ENERGY_CASES:
            toy = make()
            names.add(toy.name)
            assert free_energy_check(toy, vt, beta).discrepancy <= 1e-3, toy.name
        assert names == {t.name for t in dg.shipped_toys()}

    def test_order(self):
        _, orders = dg.convergence_orders(dg.scaled_gaussian_toy(), 0.7, 1.0)
        assert orders.min() >= 1.9

    def test_grid_too_small(self):
        toy = dg.ToyLoss("narrow", 1, dg.scaled_gaussian_toy().loss, dg.scaled_gaussian_toy().dloss,
                         ((-1.0, 1.0),))
        with pytest.raises(GridTooSmallError):
            free_energy_check(toy, 0.5, 1.0)

    def test_grid_nodes(self):
        pts, w, boundary = Grid(3, ((0.0, 2.0), (0.0, 1.0))).nodes()
        assert pts.shape == (9, 2) and w.sum() == pytest.approx(2.0)
        assert boundary.sum() == 8


class TestMarginal:
    def test_identity_exact_without_refinement(self):
        res = cv_marginal_check(dg.translation_toy(), lambda p: p[:, 0], 0.3, 1.0, refine=1)
        assert res.tv <= 1e-12

    def test_double_well_square(self):
        toy = dg.tilted_double_well_toy()
        phi = np.linspace(-3, 3, 601)[:, None]
        assert np.sum(np.diff(np.sign(np.diff(toy.loss(phi, 0.0)))) != 0) == 3  # two wells
        res = cv_marginal_check(toy, lambda p: p[:, 0] ** 2, 0.0, 4.0, bins=200)
        assert res.tv <= 0.02

    def test_constant_energy_is_volume(self):
        name, toy, cv, vt, beta = dg.shipped_marginal_cases()[-1]
        assert name == "constant_energy"
        res = cv_marginal_check(toy, cv, vt, beta)
        assert 0.5 * np.abs(res.gibbs_hist - res.omega).sum() <= 0.05
        # with no energy differences F = -S / beta up to a constant
        ok = np.isfinite(res.entropy)
        shifted = res.free_energy[ok] + res.entropy[ok] / beta
        assert np.ptp(shifted) < 1e-12

    def test_all_shipped_cases(self):
        for name, toy, cv, vt, beta in dg.shipped_marginal_cases():
            assert cv_marginal_check(toy, cv, vt, beta).tv <= 0.05, name
