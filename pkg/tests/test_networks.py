import numpy as np
import pytest

from eae.autodiff import DimensionError, NetworkSpec
from eae.networks import (
    AutoencoderModel,
    LossDomainError,
    LossKind,
    NumericError,
    VaeModel,
    build_model,
    elbo_loss,
    elbo_terms,
    kl_to_standard_normal,
    load_checkpoint,
    recon_loss,
    recon_loss_and_grad,
    reconstruct,
    reparameterize,
    save_checkpoint,
)


class TestModels:
    def test_widths(self):
        m = build_model(7, 3, (5,), (6,))
        assert m.latent_dim == 3 and m.data_dim == 7
        assert m.encoder.layer_widths == (7, 5, 3)
        assert m.decoder.layer_widths == (3, 6, 7)

    def test_vae_encoder_width(self):
        v = build_model(7, 3, variational=True)
        assert isinstance(v, VaeModel) and v.encoder.layer_widths[-1] == 6

    def test_inconsistent_widths(self):
        enc = NetworkSpec((4, 2), ("linear",))
        dec = NetworkSpec((3, 4), ("linear",))
        with pytest.raises(ValueError):
            AutoencoderModel(enc, dec)

    def test_latent_bias_flag(self):
        m = build_model(4, 2, latent_bias=False)
        assert not m.encoder.output_bias
        assert m.encoder.n_params == 8


class TestReconLoss:
    def test_perfect_is_zero(self):
        m = build_model(2, 2, activation="linear")
        eye = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        y = np.array([[0.3, -0.4], [1.0, 2.0]])
        assert recon_loss(m, eye, eye, y) == 0.0

    def test_per_pixel_mean(self):
        m = build_model(2, 2, activation="linear")
        # decoder swaps coordinates
        swap = np.array([0.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        eye = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        assert recon_loss(m, eye, swap, np.array([[1.0, 0.0]])) == pytest.approx(1.0)

    def test_matches_reimplementation(self, small_ae, rng):
        phi, theta = small_ae.init(3)
        y = rng.standard_normal((6, 5))

        def elu(a):
            return np.where(a > 0, a, np.expm1(np.minimum(a, 0)))

        def layer(p, x, widths, act_last):
            pos, h = 0, x
            for i in range(len(widths) - 1):
                W = p[pos : pos + widths[i] * widths[i + 1]].reshape(widths[i], widths[i + 1])
                pos += W.size
                b = p[pos : pos + widths[i + 1]]
                pos += b.size
                h = h @ W + b
                if i < len(widths) - 2:
                    h = elu(h)
            return h

        out = layer(theta, layer(phi, y, (5, 4, 2), None), (2, 4, 5), None)
        ref = sum((out[i, j] - y[i, j]) ** 2 for i in range(6) for j in range(5)) / 30
        assert recon_loss(small_ae, phi, theta, y) == pytest.approx(ref, rel=1e-12, abs=1e-12)

    def test_bce_domain(self, small_ae):
        phi, theta = small_ae.init(0)
        with pytest.raises(LossDomainError):
            recon_loss(small_ae, phi, theta, np.full((1, 5), 1.5), LossKind.BCE_LOGITS)

    def test_bce_nonnegative_and_sigmoid_output(self, small_ae, rng):
        phi, theta = small_ae.init(0)
        y = rng.uniform(size=(3, 5))
        assert recon_loss(small_ae, phi, theta, y, LossKind.BCE_LOGITS) >= 0
        r = reconstruct(small_ae, phi, theta, y, LossKind.BCE_LOGITS)
        assert np.all((r > 0) & (r < 1))

    @pytest.mark.parametrize("kind", list(LossKind))
    def test_gradients_match_fd(self, small_ae, rng, kind):
        phi, theta = small_ae.init(1)
        y = rng.uniform(size=(4, 5))
        _, gp, gt = recon_loss_and_grad(small_ae, phi, theta, y, kind)
        dp, dt = rng.standard_normal(phi.shape), rng.standard_normal(theta.shape)
        h = 1e-6
        fd = (recon_loss(small_ae, phi + h * dp, theta + h * dt, y, kind)
              - recon_loss(small_ae, phi - h * dp, theta - h * dt, y, kind)) / (2 * h)
        assert gp @ dp + gt @ dt == pytest.approx(fd, rel=1e-5)


class TestVae:
    def test_reparameterize_cases(self):
        assert reparameterize([0.5], [0.3], [0.0])[0] == 0.5
        assert reparameterize([0.5], [0.0], [0.25])[0] == 0.75
        assert reparameterize([0.0], [2 * np.log(3.0)], [1.0])[0] == pytest.approx(3.0)

    def test_reparameterize_shape(self):
        with pytest.raises(DimensionError):
            reparameterize(np.zeros(2), np.zeros(3), np.zeros(2))

    def test_kl_closed_form(self):
        assert kl_to_standard_normal(np.zeros((1, 2)), np.zeros((1, 2))) == 0.0
        assert kl_to_standard_normal(np.array([[1.0]]), np.array([[0.0]])) == pytest.approx(0.5)

    def test_kl_monte_carlo(self):
        rng = np.random.default_rng(4)
        mu, lv = np.array([0.7, -0.3]), np.array([-0.5, 0.4])
        s = np.exp(0.5 * lv)
        z = mu + s * rng.standard_normal((1_000_000, 2))
        log_q = -0.5 * ((z - mu) / s) ** 2 - np.log(s)
        log_p = -0.5 * z**2
        mc = np.mean(np.sum(log_q - log_p, axis=1))
        assert kl_to_standard_normal(mu, lv) == pytest.approx(mc, rel=0.01)

    def test_kl_nonnegative(self, rng):
        for _ in range(20):
            assert kl_to_standard_normal(rng.standard_normal((3, 2)), rng.standard_normal((3, 2))) >= 0

    def test_collapsed_configuration(self, small_vae, rng):
        # zero encoder weights -> mu = 0, logvar = 0; decoder ignores z
        phi = np.zeros(small_vae.encoder.n_params)
        theta = small_vae.init(0)[1].copy()
        W_len = small_vae.decoder.layer_widths[0] * small_vae.decoder.layer_widths[1]
        theta[:W_len] = 0.0
        y = rng.standard_normal((4, 5))
        t = elbo_terms(small_vae, phi, theta, y, rng.standard_normal((4, 2)))
        assert t.kl == 0.0 and t.loss == t.recon

    def test_noise_shape(self, small_vae):
        phi, theta = small_vae.init(0)
        with pytest.raises(DimensionError):
            elbo_loss(small_vae, phi, theta, np.zeros((3, 5)), np.zeros((2, 2)))

    def test_nonfinite_logvar(self, small_vae):
        phi, theta = small_vae.init(0)
        phi = phi.copy()
        phi[:] = np.nan
        with pytest.raises(NumericError):
            elbo_loss(small_vae, phi, theta, np.zeros((1, 5)), np.zeros((1, 2)))

    def test_elbo_gradient(self, small_vae, rng):
        phi, theta = small_vae.init(2)
        y = rng.standard_normal((3, 5))
        eps = rng.standard_normal((3, 2))
        t = elbo_terms(small_vae, phi, theta, y, eps)
        dp, dt = rng.standard_normal(phi.shape), rng.standard_normal(theta.shape)
        h = 1e-6
        fd = (elbo_loss(small_vae, phi + h * dp, theta + h * dt, y, eps)
              - elbo_loss(small_vae, phi - h * dp, theta - h * dt, y, eps)) / (2 * h)
        assert t.g_phi @ dp + t.g_theta @ dt == pytest.approx(fd, rel=1e-5)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, small_vae):
        phi, theta = small_vae.init(5)
        save_checkpoint(tmp_path / "m.bin", small_vae, phi, theta, kind="vae", meta={"seed": 5})
        model, p2, t2, header = load_checkpoint(tmp_path / "m.bin")
        assert isinstance(model, VaeModel)
        assert np.array_equal(p2, phi) and np.array_equal(t2, theta)
        assert header["meta"]["seed"] == 5

    def test_wrong_format(self, tmp_path):
        from eae.io import write_container

        write_container(tmp_path / "x.bin", {"format": "other"}, {})
        with pytest.raises(ValueError, match="not a model checkpoint"):
            load_checkpoint(tmp_path / "x.bin")
