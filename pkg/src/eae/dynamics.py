"""Latent equations of motion: basis library, least-squares coefficients and
the dynamics-aware reconstruction loss.

With latents ``z = E(x)`` and latent velocities ``zdot = J_E(x) xdot``, the
coefficients solve ``min ||Theta(z) Xi - zdot||`` column by column. The loss

    lam1 * mse(x, D(z)) + lam2 * mse(xdot, J_D(z) Theta(z) Xi)

re-solves ``Xi`` on every batch and differentiates through that solve.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import gaussian_kde

from eae.autodiff import forward, jvp, tangent_backward, tangent_forward

SIGNIFICANCE_THRESHOLD = 0.1
MAX_CONDITION = 1e12


class SingularGramError(np.linalg.LinAlgError):
    def __init__(self, condition):
        super().__init__(f"library matrix is rank deficient (condition number {condition:.3e})")
        self.condition = condition


class LatentDivergence(FloatingPointError):
    def __init__(self, step_index):
        super().__init__(f"latent trajectory became non-finite at step {step_index}")
        self.step_index = step_index


# -- basis library ---------------------------------------------------------------

@dataclass(frozen=True)
class BasisLibrary:
    """Monomials (no constant) and sines of single coordinates.

    ``terms`` holds ``("poly", exponents)`` or ``("sin", j)`` entries.
    """

    n_z: int
    terms: tuple

    def __post_init__(self):
        for kind, arg in self.terms:
            if kind == "poly":
                if len(arg) != self.n_z or sum(arg) == 0 or min(arg) < 0:
                    raise ValueError(f"bad monomial exponents {arg}")
            elif kind == "sin":
                if not 0 <= arg < self.n_z:
                    raise ValueError(f"sin index {arg} out of range")
            else:
                raise ValueError(f"unknown basis kind {kind!r}")

    @classmethod
    def default(cls, n_z=2, max_degree=3, sines=True) -> "BasisLibrary":
        terms = []
        for deg in range(1, max_degree + 1):
            for combo in itertools.combinations_with_replacement(range(n_z), deg):
                terms.append(("poly", tuple(combo.count(j) for j in range(n_z))))
        if sines:
            terms.extend(("sin", j) for j in range(n_z))
        return cls(n_z, tuple(terms))

    def __len__(self):
        return len(self.terms)

    @property
    def names(self) -> list[str]:
        out = []
        for kind, arg in self.terms:
            if kind == "sin":
                out.append(f"sin(z{arg + 1})")
                continue
            parts = [f"z{j + 1}" + (f"^{e}" if e > 1 else "") for j, e in enumerate(arg) if e]
            out.append(" ".join(parts))
        return out

    def _check(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        Z = Z[None, :] if Z.ndim == 1 else Z
        if Z.ndim != 2 or Z.shape[1] != self.n_z:
            raise ValueError(f"latents must have width {self.n_z}, got shape {np.shape(Z)}")
        return Z

    def evaluate(self, Z) -> np.ndarray:
        Z = self._check(Z)
        cols = []
        for kind, arg in self.terms:
            if kind == "sin":
                cols.append(np.sin(Z[:, arg]))
            else:
                cols.append(np.prod(Z ** np.array(arg), axis=1))
        return np.stack(cols, axis=1)

    def jacobian(self, Z) -> np.ndarray:
        """``d Theta / d z`` with shape ``(rows, p, n_z)``."""
        Z = self._check(Z)
        J = np.zeros((Z.shape[0], len(self.terms), self.n_z))
        for k, (kind, arg) in enumerate(self.terms):
            if kind == "sin":
                J[:, k, arg] = np.cos(Z[:, arg])
                continue
            e = np.array(arg)
            for j in range(self.n_z):
                if e[j] == 0:
                    continue
                ej = e.copy()
                ej[j] -= 1
                J[:, k, j] = e[j] * np.prod(Z**ej, axis=1)
        return J


def eval_theta(lib: BasisLibrary, Z) -> np.ndarray:
    return lib.evaluate(Z)


# -- least squares -------------------------------------------------------------------

def _qr_checked(theta):
    n, p = theta.shape
    if n < p:
        raise SingularGramError(np.inf)
    s = np.linalg.svd(theta, compute_uv=False)
    cond = np.inf if s[-1] == 0 else s[0] / s[-1]
    if not cond < MAX_CONDITION:
        raise SingularGramError(cond)
    return np.linalg.qr(theta)


def solve_xi(theta, zdot):
    """Least-squares ``Xi`` for a precomputed library matrix; returns ``(Xi, R)``."""
    Q, R = _qr_checked(theta)
    return solve_triangular(R, Q.T @ zdot), R


def estimate_xi(lib: BasisLibrary, Z, Zdot) -> np.ndarray:
    """Column-wise least squares ``Theta(Z) Xi ~ Zdot`` via QR."""
    Zdot = np.asarray(Zdot, dtype=np.float64)
    theta = lib.evaluate(Z)
    if Zdot.shape != (theta.shape[0], lib.n_z):
        raise ValueError(f"latent derivatives have shape {Zdot.shape}, expected {(theta.shape[0], lib.n_z)}")
    return solve_xi(theta, Zdot)[0]


def encode_with_velocity(model, phi, x, xdot):
    """``(E(x), J_E(x) xdot)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return forward(model.encoder, phi, x), jvp(model.encoder, phi, x, np.atleast_2d(xdot))


def member_xi(model, phi, x, xdot, lib: BasisLibrary) -> np.ndarray:
    z, zdot = encode_with_velocity(model, phi, x, xdot)
    return estimate_xi(lib, z, zdot)


def predicted_xdot(model, phi, theta, x, lib: BasisLibrary, xi) -> np.ndarray:
    """Decoder JVP at ``E(x)`` along ``Theta(E(x)) Xi``."""
    z = forward(model.encoder, phi, np.atleast_2d(x))
    return jvp(model.decoder, theta, z, lib.evaluate(z) @ xi)


# -- dynamics loss ----------------------------------------------------------------------

@dataclass(frozen=True)
class DynamicsWeights:
    recon: float = 1.0
    derivative: float = 20.0

    def __post_init__(self):
        if self.recon < 0 or self.derivative < 0:
            raise ValueError("dynamics weights must be non-negative")
        if self.recon == 0 and self.derivative == 0:
            raise ValueError("dynamics weights cannot both be zero")


def dynamics_loss_and_grad(model, phi, theta, x, xdot, lib: BasisLibrary,
                           weights: DynamicsWeights = DynamicsWeights(), with_grad=True):
    """Returns ``(loss, g_phi, g_theta, xi)``; the gradients are ``None`` unless requested.

    Both terms are means over rows and coordinates, so ``derivative=0`` gives
    ``recon * recon_loss``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xdot = np.atleast_2d(np.asarray(xdot, dtype=np.float64))
    if xdot.shape != x.shape:
        raise ValueError(f"xdot has shape {xdot.shape}, x has shape {x.shape}")
    z, zdot, enc_cache = tangent_forward(model.encoder, phi, x, xdot)
    th = lib.evaluate(z)
    xi, R = solve_xi(th, zdot)
    t = th @ xi
    xhat, xdhat, dec_cache = tangent_forward(model.decoder, theta, z, t)
    r1 = xhat - x
    r2 = xdhat - xdot
    loss = weights.recon * float(np.mean(r1**2)) + weights.derivative * float(np.mean(r2**2))
    if not with_grad:
        return loss, None, None, xi

    g_theta, g_z, g_t = tangent_backward(
        model.decoder, dec_cache, weights.recon * 2.0 * r1 / r1.size,
        weights.derivative * 2.0 * r2 / r2.size)
    # t = Theta Xi
    g_th = g_t @ xi.T
    g_xi = th.T @ g_t
    # Xi = (Theta^T Theta)^{-1} Theta^T zdot
    W = solve_triangular(R, solve_triangular(R, g_xi, trans="T"))
    res = zdot - th @ xi
    g_th += res @ W.T - th @ W @ xi.T
    g_zdot = th @ W
    g_z = g_z + np.einsum("bk,bkj->bj", g_th, lib.jacobian(z))
    g_phi, _, _ = tangent_backward(model.encoder, enc_cache, g_z, g_zdot)
    return loss, g_phi, g_theta, xi


def dynamics_loss(model, phi, theta, x, xdot, lib, weights=DynamicsWeights()) -> float:
    return dynamics_loss_and_grad(model, phi, theta, x, xdot, lib, weights, with_grad=False)[0]


class DynamicsObjective:
    """Training objective over paired snapshots ``(x, xdot)``; Xi is re-solved per batch."""

    def __init__(self, model, x, xdot, lib: BasisLibrary, weights=DynamicsWeights()):
        self.model = model
        self.x = np.asarray(x, dtype=np.float64)
        self.xdot = np.asarray(xdot, dtype=np.float64)
        self.lib = lib
        self.weights = weights
        self.n_rows = self.x.shape[0]

    def loss_and_grad(self, phi, theta, idx):
        loss, gp, gt, _ = dynamics_loss_and_grad(
            self.model, phi, theta, self.x[idx], self.xdot[idx], self.lib, self.weights)
        return loss, gp, gt

    def full_loss(self, phi, theta):
        return dynamics_loss(self.model, phi, theta, self.x, self.xdot, self.lib, self.weights)


# -- coefficient statistics -----------------------------------------------------------

@dataclass
class CoefficientStats:
    mean: np.ndarray
    mode: np.ndarray
    significant: np.ndarray
    threshold: float = SIGNIFICANCE_THRESHOLD


def kde_mode(values, grid_points=1024) -> float:
    """Mode of a Silverman-bandwidth Gaussian KDE, searched on a grid over the sample range."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        return float(v.mean())
    kde = gaussian_kde(v, bw_method="silverman")
    grid = np.linspace(lo, hi, grid_points)
    return float(grid[np.argmax(kde(grid))])


def coefficient_stats(samples, threshold=SIGNIFICANCE_THRESHOLD) -> CoefficientStats:
    S = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    if S.shape[0] < 2:
        raise ValueError("coefficient_stats needs at least 2 samples")
    mean = S.mean(axis=0)
    mode = np.empty_like(mean)
    for idx in np.ndindex(mean.shape):
        mode[idx] = kde_mode(S[(slice(None),) + idx])
    sig = (np.abs(mean) > threshold) & (np.abs(mode) > threshold)
    return CoefficientStats(mean, mode, sig, threshold)


def coefficient_correlation(samples, mask=None):
    """Pearson correlation across samples between (masked) flattened entries.

    Returns ``(corr, zero_variance)``. Entries without spread correlate 0 with
    everything else and are flagged; the diagonal is always 1.
    """
    S = np.stack([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    if mask is not None:
        S = S[:, np.asarray(mask).ravel()]
    C = S - S.mean(axis=0)
    sd = np.sqrt(np.sum(C * C, axis=0))
    flat = sd <= 1e-300
    sd_safe = np.where(flat, 1.0, sd)
    corr = (C.T @ C) / np.outer(sd_safe, sd_safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr, flat


def entry_names(lib: BasisLibrary, mask=None) -> list[str]:
    names = [f"{b} -> dz{j + 1}" for b in lib.names for j in range(lib.n_z)]
    if mask is None:
        return names
    return [n for n, m in zip(names, np.asarray(mask).ravel()) if m]


def linear_part(lib: BasisLibrary, xi, mask=None) -> np.ndarray:
    """Jacobian at the origin of ``z -> Theta(z) Xi``, using only masked terms."""
    xi = np.asarray(xi, dtype=np.float64)
    if mask is not None:
        xi = np.where(mask, xi, 0.0)
    J0 = lib.jacobian(np.zeros(lib.n_z))[0]  # (p, n_z)
    return xi.T @ J0


# -- integration ------------------------------------------------------------------------

def integrate_latent_ode(lib: BasisLibrary, xi, z0, dt, steps) -> np.ndarray:
    """Classical RK4 for ``zdot = Theta(z) Xi``; returns ``steps + 1`` states."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    xi = np.asarray(xi, dtype=np.float64)
    f = lambda z: lib.evaluate(z)[0] @ xi
    traj = np.empty((steps + 1, lib.n_z))
    z = np.asarray(z0, dtype=np.float64).copy()
    traj[0] = z
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            k1 = f(z)
            k2 = f(z + 0.5 * dt * k1)
            k3 = f(z + 0.5 * dt * k2)
            k4 = f(z + dt * k3)
            z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(z)):
                raise LatentDivergence(k + 1)
            traj[k + 1] = z
    return traj


# -- exports ------------------------------------------------------------------------------

def write_coefficient_table(path, lib: BasisLibrary, stats: CoefficientStats):
    """One row per basis function; mean, mode and significance per latent column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["basis"]
        for j in range(lib.n_z):
            header += [f"mean_dz{j + 1}", f"mode_dz{j + 1}", f"significant_dz{j + 1}"]
        w.writerow(header)
        for k, name in enumerate(lib.names):
            row = [name]
            for j in range(lib.n_z):
                row += [repr(float(stats.mean[k, j])), repr(float(stats.mode[k, j])),
                        int(stats.significant[k, j])]
            w.writerow(row)


def write_correlation(path, names, corr, flags):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry", "zero_variance", *names])
        for name, flag, row in zip(names, flags, corr):
            w.writerow([name, int(flag), *(repr(float(v)) for v in row)])
