"""Entropic-autoencoder training loop, ensemble latent sampling and baselines.

The EAE loop alternates two levels. With the decoder frozen, ``M`` thermostat
steps move the encoder parameters through the Gibbs measure of the
reconstruction loss; before each step the current encoder is stored together
with the decoder gradient at that encoder. The decoder then takes one Adam step
along the mean of the stored gradients.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from eae import sampler
from eae.autodiff import forward
from eae.networks import (
    AutoencoderModel,
    LossKind,
    NumericError,
    VaeModel,
    elbo_terms,
    output_loss,
    recon_loss_and_grad,
)
from eae.optim import Adam
from eae.sampler import SamplerState, ThermostatConfig


class TrainingDiverged(NumericError):
    """Non-finite loss or gradient. Carries the last finite iterate."""

    def __init__(self, message, last_good=None, report=None):
        super().__init__(message)
        self.last_good = last_good or {}
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    ensemble_size: int = 10
    batch_size: int = 32
    tolerance: float = 0.0
    max_outer_iterations: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossKind = LossKind.SQUARED_ERROR
    thermostat: ThermostatConfig | None = None
    seed: int = 0
    burn_in_discard: int = 0
    epochs: int = 1
    max_steps: int | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if not 0 <= self.burn_in_discard < self.ensemble_size:
            raise ValueError("burn_in_discard must be in [0, ensemble_size)")

    def adam(self) -> Adam:
        return Adam(self.lr, self.beta1, self.beta2, self.adam_eps)


@dataclass
class EncoderEnsemble:
    members: list = field(default_factory=list)
    decoder_gradients: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    def add(self, phi, g_theta):
        self.members.append(np.array(phi, dtype=np.float64))
        self.decoder_gradients.append(np.array(g_theta, dtype=np.float64))

    def as_array(self) -> np.ndarray:
        return np.stack(self.members)


@dataclass
class OuterRecord:
    member_losses: list
    post_update_loss: float
    grad_norm: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    max_iterations_reached: bool = False
    wall_clock: float = 0.0
    seeds: dict = field(default_factory=dict)
    initial_loss: float = float("nan")
    final_state: SamplerState | None = field(default=None, repr=False)
    # baselines: one (epoch, steps, mean batch loss, full-data loss) per epoch
    epochs: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        if self.records:
            return self.records[-1].post_update_loss
        return self.epochs[-1][3]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.records:
                w.writerow(["outer_iter", "inner_iter", "member_loss", "post_update_loss", "grad_norm"])
                for k, rec in enumerate(self.records):
                    for i, ml in enumerate(rec.member_losses):
                        w.writerow([k, i, repr(ml), repr(rec.post_update_loss), repr(rec.grad_norm)])
            else:
                w.writerow(["epoch", "steps", "batch_loss", "full_loss"])
                for e, s, bl, fl in self.epochs:
                    w.writerow([e, s, repr(bl), repr(fl)])


class Objective(Protocol):
    n_rows: int

    def loss_and_grad(self, phi, theta, idx) -> tuple[float, np.ndarray, np.ndarray]: ...

    def full_loss(self, phi, theta) -> float: ...


class ReconObjective:
    """Batch-mean reconstruction loss of a deterministic autoencoder."""

    def __init__(self, model: AutoencoderModel, data, kind=LossKind.SQUARED_ERROR):
        self.model = model
        self.data = np.asarray(data, dtype=np.float64)
        self.kind = LossKind(kind)
        self.n_rows = self.data.shape[0]

    def loss_and_grad(self, phi, theta, idx):
        return recon_loss_and_grad(self.model, phi, theta, self.data[idx], self.kind)

    def full_loss(self, phi, theta):
        out = self.model.decode(theta, self.model.encode(phi, self.data))
        return output_loss(self.kind, out, self.data)


class MinibatchStream:
    """Endless minibatch indices: a fresh seeded shuffle per epoch.

    Each epoch yields ``n // batch_size`` full batches; the leftover rows of
    that shuffle are dropped. ``batch_size >= n`` gives the full data set.
    """

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.epoch = 0
        self._perm = None
        self._pos = 0

    @property
    def batches_per_epoch(self):
        return self.n // self.batch_size

    def __iter__(self):
        return self

    def __next__(self):
        if self.batch_size == self.n:
            self.epoch += 1
            return np.arange(self.n)
        if self._perm is None or self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
            self.epoch += 1
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _data_array(data):
    return np.asarray(getattr(data, "inputs", data), dtype=np.float64)


def decoder_grad_estimate(ensemble: EncoderEnsemble, discard: int = 0) -> np.ndarray:
    """Mean of the stored decoder gradients (optionally skipping the first ``discard``)."""
    grads = ensemble.decoder_gradients[discard:]
    if not grads:
        raise ValueError("decoder_grad_estimate needs a non-empty ensemble")
    return np.mean(np.stack(grads), axis=0)


def eae_train(model: AutoencoderModel, data, cfg: TrainConfig, objective: Objective | None = None,
              init=None, on_checkpoint: Callable | None = None):
    """Train an entropic autoencoder.

    Returns ``(theta, ensemble, report)``: the final decoder, the encoder
    ensemble of the last outer iteration and a ``TrainReport`` whose
    ``final_state`` lets sampling continue with the decoder frozen.
    """
    if cfg.thermostat is None:
        raise ValueError("eae_train requires a thermostat configuration")
    if objective is None:
        objective = ReconObjective(model, _data_array(data), cfg.loss)
    if objective.n_rows == 0:
        raise ValueError("training data is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    phi0, theta = model.init(rng) if init is None else (np.array(init[0]), np.array(init[1]))
    batches = MinibatchStream(objective.n_rows, cfg.batch_size, rng)
    thermo = cfg.thermostat
    state = sampler.init_state(phi0, thermo)
    adam = cfg.adam()
    report = TrainReport(seeds={"train": cfg.seed, "thermostat": thermo.seed})
    report.initial_loss = objective.full_loss(phi0, theta)
    period = thermo.velocity_resample_period

    grad_norm = np.inf
    k = 0
    ensemble = EncoderEnsemble()
    while grad_norm > cfg.tolerance and k < cfg.max_outer_iterations:
        ensemble = EncoderEnsemble()
        losses = []
        for _ in range(cfg.ensemble_size):
            idx = next(batches)
            loss, g_phi, g_theta = objective.loss_and_grad(state.positions, theta, idx)
            if not (np.isfinite(loss) and np.all(np.isfinite(g_theta))):
                raise TrainingDiverged(
                    f"non-finite loss at outer iteration {k}",
                    {"decoder": theta, "encoder": state.positions, "ensemble": ensemble}, report)
            ensemble.add(state.positions, g_theta)
            losses.append(float(loss))
            th = theta
            try:
                state = sampler.step(
                    state, lambda p: objective.loss_and_grad(p, th, idx)[1], thermo, initial_grad=g_phi)
            except sampler.SamplerDivergence as exc:
                raise TrainingDiverged(
                    str(exc), {"decoder": theta, "encoder": ensemble.members[-1], "ensemble": ensemble},
                    report) from exc
            if period and state.step_index % period == 0:
                state = sampler.resample_velocities(state, thermo)
        g_bar = decoder_grad_estimate(ensemble, cfg.burn_in_discard)
        grad_norm = float(np.linalg.norm(g_bar))
        theta = adam.step(theta, g_bar)
        post = objective.full_loss(state.positions, theta)
        if not np.isfinite(post):
            raise TrainingDiverged(
                f"non-finite loss after decoder update {k}",
                {"decoder": theta, "encoder": state.positions, "ensemble": ensemble}, report)
        report.records.append(OuterRecord(losses, float(post), grad_norm))
        k += 1
        if on_checkpoint is not None and cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
            on_checkpoint(k, state.positions, theta, ensemble)

    report.max_iterations_reached = bool(grad_norm > cfg.tolerance)
    report.final_state = state
    report.wall_clock = time.perf_counter() - t0
    return theta, ensemble, report


def sample_ensemble(objective: Objective, theta, state: SamplerState, cfg: ThermostatConfig,
                    n_samples: int, batch_size: int | None = None, seed: int = 0):
    """Continue the encoder trajectory with the decoder frozen.

    Returns ``(ensemble, state)`` with ``n_samples`` consecutive encoders.
    """
    rng = np.random.default_rng(seed)
    batches = MinibatchStream(objective.n_rows, batch_size or objective.n_rows, rng)
    ens = EncoderEnsemble()
    period = cfg.velocity_resample_period
    for _ in range(n_samples):
        idx = next(batches)
        _, g_phi, g_theta = objective.loss_and_grad(state.positions, theta, idx)
        ens.add(state.positions, g_theta)
        state = sampler.step(state, lambda p: objective.loss_and_grad(p, theta, idx)[1], cfg,
                             initial_grad=g_phi)
        if period and state.step_index % period == 0:
            state = sampler.resample_velocities(state, cfg)
    return ens, state


def eae_sample_latents(model: AutoencoderModel, theta, ensemble, queries) -> np.ndarray:
    """Latent ensemble ``Z[i, n] = E_{phi_i}(y_n)``, shape ``(members, queries, n_z)``.

    ``theta`` is accepted for symmetry with generation but not used by encoding.
    """
    members = ensemble.members if isinstance(ensemble, EncoderEnsemble) else list(ensemble)
    if len(members) == 0:
        raise ValueError("ensemble is empty")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return np.stack([forward(model.encoder, phi, q) for phi in members])


# -- baselines ---------------------------------------------------------------------

def _baseline_loop(n_rows, cfg, init, step_fn, full_fn):
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    phi, theta = init(rng)
    n_phi = phi.size
    params = np.concatenate([phi, theta])
    adam = cfg.adam()
    batches = MinibatchStream(n_rows, cfg.batch_size, rng)
    report = TrainReport(seeds={"train": cfg.seed})
    report.initial_loss = full_fn(params[:n_phi], params[n_phi:])
    steps = 0
    per_epoch = max(1, batches.batches_per_epoch)
    for epoch in range(cfg.epochs):
        batch_losses = []
        for _ in range(per_epoch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = next(batches)
            loss, g_phi, g_theta = step_fn(params[:n_phi], params[n_phi:], idx, rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {steps}",
                    {"encoder": params[:n_phi], "decoder": params[n_phi:]}, report)
            params = adam.step(params, np.concatenate([g_phi, g_theta]))
            batch_losses.append(loss)
            steps += 1
        if not batch_losses:
            break
        full = full_fn(params[:n_phi], params[n_phi:])
        report.epochs.append((epoch, steps, float(np.mean(batch_losses)), float(full)))
    report.wall_clock = time.perf_counter() - t0
    return (params[:n_phi], params[n_phi:]), report


def ae_train(model: AutoencoderModel, data, cfg: TrainConfig, init=None):
    """Plain minibatch Adam on the reconstruction loss. Returns ``((phi, theta), report)``."""
    obj = ReconObjective(model, _data_array(data), cfg.loss)
    initf = model.init if init is None else (lambda rng: (np.array(init[0]), np.array(init[1])))
    return _baseline_loop(
        obj.n_rows, cfg, initf,
        lambda phi, theta, idx, rng: obj.loss_and_grad(phi, theta, idx),
        obj.full_loss)


def vae_train(model: VaeModel, data, cfg: TrainConfig, init=None):
    """Minibatch Adam on the single-sample negative ELBO. Returns ``((phi, theta), report)``."""
    y = _data_array(data)
    eval_noise = np.random.default_rng([cfg.seed, 1]).standard_normal((y.shape[0], model.latent_dim))

    def step_fn(phi, theta, idx, rng):
        noise = rng.standard_normal((len(idx), model.latent_dim))
        t = elbo_terms(model, phi, theta, y[idx], noise, cfg.loss)
        return t.loss, t.g_phi, t.g_theta

    def full_fn(phi, theta):
        return elbo_terms(model, phi, theta, y, eval_noise, cfg.loss, with_grad=False).loss

    initf = model.init if init is None else (lambda rng: (np.array(init[0]), np.array(init[1])))
    return _baseline_loop(y.shape[0], cfg, initf, step_fn, full_fn)


def with_thermostat(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, thermostat=replace(cfg.thermostat, **changes))
