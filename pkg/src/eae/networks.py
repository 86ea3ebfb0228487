"""Autoencoder / VAE models, reconstruction losses and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from eae.autodiff import DimensionError, NetworkSpec, forward, init_params, mlp_spec, vjp
from eae.io import read_container, write_container


class LossKind(str, Enum):
    SQUARED_ERROR = "squared_error"
    BCE_LOGITS = "bernoulli_cross_entropy_with_sigmoid"


class LossDomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AutoencoderModel:
    encoder: NetworkSpec
    decoder: NetworkSpec

    def __post_init__(self):
        if self.decoder.n_in != self.encoder.n_out:
            raise DimensionError(
                f"decoder input width {self.decoder.n_in} != latent width {self.encoder.n_out}"
            )
        if self.decoder.n_out != self.encoder.n_in:
            raise DimensionError(
                f"decoder output width {self.decoder.n_out} != data width {self.encoder.n_in}"
            )

    @property
    def latent_dim(self) -> int:
        return self.encoder.n_out

    @property
    def data_dim(self) -> int:
        return self.encoder.n_in

    def encode(self, phi, y):
        return forward(self.encoder, phi, y)

    def decode(self, theta, z):
        return forward(self.decoder, theta, z)

    def init(self, seed):
        rng = np.random.default_rng(seed)
        return init_params(self.encoder, rng), init_params(self.decoder, rng)


@dataclass(frozen=True)
class VaeModel:
    """Encoder emits ``[mean | log-variance]``, each ``latent_dim`` wide."""

    encoder: NetworkSpec
    decoder: NetworkSpec

    def __post_init__(self):
        if self.encoder.n_out != 2 * self.decoder.n_in:
            raise DimensionError(
                f"VAE encoder width {self.encoder.n_out} must be twice the latent width {self.decoder.n_in}"
            )
        if self.decoder.n_out != self.encoder.n_in:
            raise DimensionError(
                f"decoder output width {self.decoder.n_out} != data width {self.encoder.n_in}"
            )

    @property
    def latent_dim(self) -> int:
        return self.decoder.n_in

    @property
    def data_dim(self) -> int:
        return self.encoder.n_in

    def encode_stats(self, phi, y):
        h = forward(self.encoder, phi, np.atleast_2d(y))
        k = self.latent_dim
        return h[:, :k], h[:, k:]

    def decode(self, theta, z):
        return forward(self.decoder, theta, z)

    def init(self, seed):
        rng = np.random.default_rng(seed)
        return init_params(self.encoder, rng), init_params(self.decoder, rng)


def build_model(data_dim, latent_dim, encoder_hidden=(), decoder_hidden=(),
                activation="relu", variational=False, latent_bias=True):
    """MLP encoder/decoder pair; ``latent_bias=False`` drops the encoder's output bias."""
    enc_out = 2 * latent_dim if variational else latent_dim
    enc = mlp_spec((data_dim, *encoder_hidden, enc_out), activation, output_bias=latent_bias)
    dec = mlp_spec((latent_dim, *decoder_hidden, data_dim), activation)
    return VaeModel(enc, dec) if variational else AutoencoderModel(enc, dec)


# -- per-output losses ---------------------------------------------------------

def _check_targets(kind, y):
    if kind is LossKind.BCE_LOGITS and (np.any(y < 0.0) or np.any(y > 1.0)):
        raise LossDomainError("cross-entropy targets must lie in [0, 1]")


def output_loss(kind, out, y):
    """Batch-mean loss of decoder outputs ``out`` against targets ``y``.

    Squared error is averaged over pixels too (per-pixel MSE); cross-entropy
    is summed over pixels. For cross-entropy ``out`` holds logits.
    """
    kind = LossKind(kind)
    _check_targets(kind, y)
    if kind is LossKind.SQUARED_ERROR:
        return float(np.mean((out - y) ** 2))
    per = np.logaddexp(0.0, out) - y * out
    return float(per.sum() / out.shape[0])


def output_loss_grad(kind, out, y):
    kind = LossKind(kind)
    if kind is LossKind.SQUARED_ERROR:
        return 2.0 * (out - y) / out.size
    return (sigmoid(out) - y) / out.shape[0]


def sigmoid(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def reconstruct(model, phi, theta, y, kind=LossKind.SQUARED_ERROR):
    """Decoder output in data space (sigmoid applied for cross-entropy models)."""
    out = model.decode(theta, model.encode(phi, y))
    return sigmoid(out) if LossKind(kind) is LossKind.BCE_LOGITS else out


def recon_loss(model: AutoencoderModel, phi, theta, batch, kind=LossKind.SQUARED_ERROR) -> float:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    out = model.decode(theta, model.encode(phi, batch))
    return output_loss(kind, out, batch)


def recon_loss_and_grad(model: AutoencoderModel, phi, theta, batch, kind=LossKind.SQUARED_ERROR):
    """Returns ``(loss, d loss/d phi, d loss/d theta)``."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    z = forward(model.encoder, phi, batch)
    out = forward(model.decoder, theta, z)
    loss = output_loss(kind, out, batch)
    g_theta, g_z = vjp(model.decoder, theta, z, output_loss_grad(kind, out, batch))
    g_phi, _ = vjp(model.encoder, phi, batch, g_z)
    return loss, g_phi, g_theta


# -- VAE -------------------------------------------------------------------------

def reparameterize(mu, logvar, noise):
    mu, logvar, noise = (np.asarray(a, dtype=np.float64) for a in (mu, logvar, noise))
    if not (mu.shape == logvar.shape == noise.shape):
        raise DimensionError(
            f"mean {mu.shape}, log-variance {logvar.shape} and noise {noise.shape} must match"
        )
    return mu + np.exp(0.5 * logvar) * noise


def kl_to_standard_normal(mu, logvar) -> float:
    """Batch mean of ``0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)``."""
    mu = np.atleast_2d(mu)
    logvar = np.atleast_2d(logvar)
    return float(0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar) / mu.shape[0])


@dataclass
class ElboTerms:
    loss: float
    recon: float
    kl: float
    g_phi: np.ndarray | None = field(default=None, repr=False)
    g_theta: np.ndarray | None = field(default=None, repr=False)


def elbo_terms(vae: VaeModel, phi, theta, batch, noise, kind=LossKind.SQUARED_ERROR,
               with_grad=True) -> ElboTerms:
    """Single-sample negative ELBO with its reconstruction / KL split."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.shape != (batch.shape[0], vae.latent_dim):
        raise DimensionError(
            f"noise has shape {noise.shape}, expected {(batch.shape[0], vae.latent_dim)}"
        )
    h = forward(vae.encoder, phi, batch)
    k = vae.latent_dim
    mu, logvar = h[:, :k], h[:, k:]
    if not np.all(np.isfinite(logvar)):
        raise NumericError("non-finite log-variance in VAE encoder output")
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    out = forward(vae.decoder, theta, z)
    rec = output_loss(kind, out, batch)
    kl = kl_to_standard_normal(mu, logvar)
    terms = ElboTerms(rec + kl, rec, kl)
    if not with_grad:
        return terms
    n = batch.shape[0]
    g_theta, g_z = vjp(vae.decoder, theta, z, output_loss_grad(kind, out, batch))
    g_mu = g_z + mu / n
    g_lv = g_z * noise * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / n
    g_phi, _ = vjp(vae.encoder, phi, batch, np.concatenate([g_mu, g_lv], axis=1))
    terms.g_phi, terms.g_theta = g_phi, g_theta
    return terms


def elbo_loss(vae: VaeModel, phi, theta, batch, noise, kind=LossKind.SQUARED_ERROR) -> float:
    return elbo_terms(vae, phi, theta, batch, noise, kind, with_grad=False).loss


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model, phi, theta, kind="ae", loss=LossKind.SQUARED_ERROR, meta=None):
    header = {
        "format": "eae-checkpoint",
        "version": 1,
        "model": kind,
        "loss": LossKind(loss).value,
        "encoder": model.encoder.to_dict(),
        "decoder": model.decoder.to_dict(),
        "meta": meta or {},
    }
    write_container(path, header, {"encoder": phi, "decoder": theta})


def load_checkpoint(path):
    """Returns ``(model, phi, theta, header)``."""
    header, arrays = read_container(path)
    if header.get("format") != "eae-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    enc = NetworkSpec.from_dict(header["encoder"])
    dec = NetworkSpec.from_dict(header["decoder"])
    model = VaeModel(enc, dec) if header["model"] == "vae" else AutoencoderModel(enc, dec)
    return model, arrays["encoder"], arrays["decoder"], header
