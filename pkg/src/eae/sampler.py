"""Nose-Hoover-chain thermostatted dynamics over a flat parameter vector.

Positions are parameters, the loss is the potential energy and
``exp(-loss / T)`` is the stationary marginal over positions. One ``step`` is
the symmetric splitting

    chain half-step -> half kick -> drift -> half kick -> chain half-step

where each chain half-step is the usual Martyna-Tuckerman-Klein sweep
(single inner cycle, Suzuki-Yoshida weight 1). Momenta ``r`` use a scalar
mass ``m``; link 1 of the chain has mass ``Q`` and later links ``Q / n``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from eae.io import write_container

# Sign of the force on the first chain link. Only flipped by mutation tests.
_CHAIN_FORCE_SIGN = 1.0


class SamplerDivergence(FloatingPointError):
    """Non-finite gradient or state during integration."""

    def __init__(self, message, step_index):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


@dataclass(frozen=True)
class ThermostatConfig:
    temperature: float
    mass: float = 1.0
    dt: float = 0.01
    chain_length: int = 4
    chain_mass: float | None = None
    velocity_resample_period: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not self.mass > 0:
            raise ValueError("particle mass must be > 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if self.chain_mass is not None and not self.chain_mass > 0:
            raise ValueError("chain_mass must be > 0")
        if self.velocity_resample_period < 0:
            raise ValueError("velocity_resample_period must be >= 0")

    def link_masses(self, n_dof: int) -> list[float]:
        """``[Q, Q/n, Q/n, ...]`` with ``Q = n T tau^2``, ``tau = 100 dt`` unless set."""
        q = self.chain_mass
        if q is None:
            tau = 100.0 * self.dt
            q = n_dof * self.temperature * tau * tau
        return [q] + [q / n_dof] * (self.chain_length - 1)

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "mass": self.mass,
            "dt": self.dt,
            "chain_length": self.chain_length,
            "chain_mass": self.chain_mass,
            "velocity_resample_period": self.velocity_resample_period,
            "seed": self.seed,
        }


@dataclass
class SamplerState:
    positions: np.ndarray
    momenta: np.ndarray
    chain_positions: np.ndarray
    chain_momenta: np.ndarray
    rng: np.random.Generator = field(repr=False)
    step_index: int = 0
    # gradient at ``positions`` from the last step, reused when the caller's
    # potential has not changed
    last_grad: np.ndarray | None = field(default=None, repr=False)

    def copy(self) -> "SamplerState":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return SamplerState(
            self.positions.copy(),
            self.momenta.copy(),
            self.chain_positions.copy(),
            self.chain_momenta.copy(),
            rng,
            self.step_index,
            None if self.last_grad is None else self.last_grad.copy(),
        )


def _draw_momenta(rng, n, cfg):
    # v ~ N(0, T/m)  ->  r = m v
    return cfg.mass * rng.normal(0.0, math.sqrt(cfg.temperature / cfg.mass), size=n)


def init_state(phi0, cfg: ThermostatConfig) -> SamplerState:
    phi0 = np.array(phi0, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    return SamplerState(
        positions=phi0,
        momenta=_draw_momenta(rng, phi0.size, cfg),
        chain_positions=np.zeros(cfg.chain_length),
        chain_momenta=np.zeros(cfg.chain_length),
        rng=rng,
    )


def resample_velocities(state: SamplerState, cfg: ThermostatConfig) -> SamplerState:
    """Redraw momenta from the Maxwell distribution; advances ``state.rng``."""
    return replace(state, momenta=_draw_momenta(state.rng, state.positions.size, cfg))


def kinetic_temperature(state: SamplerState, cfg: ThermostatConfig) -> float:
    r = state.momenta
    return float(r @ r / cfg.mass / r.size)


def _chain_half_step(r, xi, p, Q, n, T, m, dt):
    """Half-step (length dt/2) of the chain; rescales ``r`` and returns it.

    ``xi`` and ``p`` are Python lists updated in place.
    """
    d2, d4, d8 = 0.5 * dt, 0.25 * dt, 0.125 * dt
    L = len(p)
    ke2 = float(r @ r) / m  # twice the kinetic energy
    nT = n * T
    sign = _CHAIN_FORCE_SIGN
    if L == 1:
        p[0] += d4 * sign * (ke2 - nT)
        s = math.exp(-d2 * p[0] / Q[0])
        ke2 *= s * s
        xi[0] += d2 * p[0] / Q[0]
        p[0] += d4 * sign * (ke2 - nT)
        return r * s
    M = L - 1
    p[M] += d4 * (p[M - 1] * p[M - 1] / Q[M - 1] - T)
    for j in range(M - 1, 0, -1):
        g = p[j - 1] * p[j - 1] / Q[j - 1] - T
        s = math.exp(-d8 * p[j + 1] / Q[j + 1])
        p[j] = s * (s * p[j] + d4 * g)
    s = math.exp(-d8 * p[1] / Q[1])
    p[0] = s * (s * p[0] + d4 * sign * (ke2 - nT))
    scale = math.exp(-d2 * p[0] / Q[0])
    ke2 *= scale * scale
    for j in range(L):
        xi[j] += d2 * p[j] / Q[j]
    g = sign * (ke2 - nT)
    for j in range(M):
        s = math.exp(-d8 * p[j + 1] / Q[j + 1])
        p[j] = s * (s * p[j] + d4 * g)
        g = p[j] * p[j] / Q[j] - T
    p[M] += d4 * g
    return r * scale


def step(state: SamplerState, grad_fn: Callable[[np.ndarray], np.ndarray],
         cfg: ThermostatConfig, initial_grad: np.ndarray | None = None) -> SamplerState:
    """Advance one integrator step of length ``cfg.dt``.

    ``grad_fn(phi)`` returns the loss gradient. ``initial_grad`` may supply the
    gradient at ``state.positions`` when the caller already has it.
    """
    n = state.positions.size
    Q = cfg.link_masses(n)
    xi = state.chain_positions.tolist()
    p = state.chain_momenta.tolist()
    T, m, dt = cfg.temperature, cfg.mass, cfg.dt
    k = state.step_index

    g0 = grad_fn(state.positions) if initial_grad is None else initial_grad
    g0 = np.asarray(g0, dtype=np.float64)
    if not np.all(np.isfinite(g0)):
        raise SamplerDivergence("non-finite gradient", k)
    try:
        r = _chain_half_step(state.momenta, xi, p, Q, n, T, m, dt)
        r = r - 0.5 * dt * g0
        phi = state.positions + (dt / m) * r
        g1 = np.asarray(grad_fn(phi), dtype=np.float64)
        if not np.all(np.isfinite(g1)):
            raise SamplerDivergence("non-finite gradient", k)
        r = r - 0.5 * dt * g1
        r = _chain_half_step(r, xi, p, Q, n, T, m, dt)
    except OverflowError as exc:
        raise SamplerDivergence(f"thermostat overflow: {exc}", k) from None
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(phi))
            and all(math.isfinite(v) for v in p)):
        raise SamplerDivergence("non-finite sampler state", k)
    return SamplerState(phi, r, np.array(xi), np.array(p), state.rng, k + 1, g1)


def run(state: SamplerState, loss_and_grad: Callable, cfg: ThermostatConfig, n_steps: int,
        csv_path=None, snapshot_path=None, snapshot_stride: int = 0,
        callback: Callable | None = None) -> SamplerState:
    """Integrate ``n_steps`` steps with optional trajectory dumps.

    ``loss_and_grad(phi) -> (loss, grad)``. The CSV gets ``step, loss,
    kinetic_temperature`` per step; every ``snapshot_stride`` steps the
    positions are stored and written to ``snapshot_path`` as a container.
    ``callback(state, loss)`` is called after each step.
    """
    rows = []
    snaps = []
    loss, g = loss_and_grad(state.positions)
    period = cfg.velocity_resample_period
    for _ in range(n_steps):
        state = step(state, lambda x: loss_and_grad(x)[1], cfg, initial_grad=g)
        if period and state.step_index % period == 0:
            state = resample_velocities(state, cfg)
        loss, g = loss_and_grad(state.positions)
        rows.append((state.step_index, loss, kinetic_temperature(state, cfg)))
        if snapshot_stride and state.step_index % snapshot_stride == 0:
            snaps.append(state.positions.copy())
        if callback is not None:
            callback(state, loss)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "kinetic_temperature"])
            for s, l, t in rows:
                w.writerow([s, repr(float(l)), repr(float(t))])
    if snapshot_path is not None and snaps:
        write_container(
            snapshot_path,
            {"format": "eae-trajectory", "stride": snapshot_stride, "thermostat": cfg.to_dict()},
            {"positions": np.stack(snaps)},
        )
    return state
