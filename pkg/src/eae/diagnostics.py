"""Latent diagnostics and quadrature checks of the Gibbs free-energy identities.

Collapse metrics work on latent codes. The quadrature checks integrate
``exp(-beta L(phi, vartheta))`` over a small encoder-parameter grid (at most
three dimensions) with the trapezoid rule, and compare

* the finite-difference gradient of ``F = -log(Z) / beta`` in ``vartheta``
  with the Gibbs expectation of ``dL/dvartheta``;
* the Gibbs measure pushed through a scalar collective variable with the
  restricted integral ``exp(-beta F(theta))`` evaluated on a separate grid.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp
from scipy.stats import gaussian_kde

from eae.autodiff import forward
from eae.networks import LossKind, VaeModel, sigmoid

ACTIVITY_THRESHOLD = 0.01


# -- activity ---------------------------------------------------------------------

@dataclass
class ActivityReport:
    variances: np.ndarray
    threshold: float = ACTIVITY_THRESHOLD

    @property
    def active(self) -> np.ndarray:
        return self.variances > self.threshold

    @property
    def active_count(self) -> int:
        return int(self.active.sum())

    @property
    def n_z(self) -> int:
        return self.variances.size

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dim", "variance", "active"])
            for j, (v, a) in enumerate(zip(self.variances, self.active)):
                w.writerow([j, repr(float(v)), int(a)])


def latent_activity(latents, threshold=ACTIVITY_THRESHOLD) -> ActivityReport:
    """Per-dimension population variance over rows; active iff above ``threshold``."""
    Z = np.asarray(latents, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("latent_activity needs a 2-D array with at least 2 rows")
    return ActivityReport(Z.var(axis=0), threshold)


# -- ensemble means and interpolation -----------------------------------------------

def _per_sample_members(Z):
    # (M, N, nz) array -> list over samples of (M, nz); lists pass through
    if isinstance(Z, np.ndarray) and Z.ndim == 3:
        return [Z[:, n, :] for n in range(Z.shape[1])]
    return [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in Z]


def ensemble_mean_code(Z, labels=None, cls=None) -> np.ndarray:
    """Average over members per sample, then over the selected samples.

    ``Z`` is an ``(members, samples, n_z)`` array or a list with one
    ``(members_n, n_z)`` array per sample.
    """
    per = _per_sample_members(Z)
    if cls is not None:
        labels = np.asarray(labels)
        if labels.shape[0] != len(per):
            raise ValueError("labels do not align with the latent samples")
        per = [p for p, l in zip(per, labels) if l == cls]
    if not per:
        raise ValueError(f"no samples selected for class {cls!r}")
    return np.mean(np.stack([p.mean(axis=0) for p in per]), axis=0)


def interpolate_codes(z1, z2, alpha) -> np.ndarray:
    """``alpha z1 + (1 - alpha) z2``; the endpoints return exact copies."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"code shapes differ: {z1.shape} vs {z2.shape}")
    if alpha == 1:
        return z1.copy()
    if alpha == 0:
        return z2.copy()
    return alpha * z1 + (1.0 - alpha) * z2


def interpolation_grid(z1, z2, n=11) -> tuple[np.ndarray, np.ndarray]:
    alphas = np.linspace(0.0, 1.0, n)
    return alphas, np.stack([interpolate_codes(z1, z2, a) for a in alphas])


# -- class-conditional distributions ---------------------------------------------------

@dataclass
class ClassLatents:
    grids: dict
    samples: dict = field(default_factory=dict)  # (cls, dim) -> 1-D array
    densities: dict = field(default_factory=dict)  # (cls, dim) -> density on grids[dim]
    activity: ActivityReport | None = None

    @property
    def classes(self):
        return sorted({c for c, _ in self.samples})

    def write_curves(self, directory, prefix="kde"):
        from pathlib import Path

        out = []
        for (c, d), dens in sorted(self.densities.items()):
            path = Path(directory) / f"{prefix}_class{c}_dim{d}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["z", "density"])
                for z, p in zip(self.grids[d], dens):
                    w.writerow([repr(float(z)), repr(float(p))])
            out.append(path)
        return out


def _density(values, grid):
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-12 * max(1.0, abs(lo)) or np.unique(values).size < 2:
        dens = np.zeros_like(grid)
        dens[np.argmin(np.abs(grid - values.mean()))] = 1.0
    else:
        try:
            dens = gaussian_kde(values, bw_method="silverman")(grid)
        except np.linalg.LinAlgError:
            dens = np.zeros_like(grid)
            dens[np.argmin(np.abs(grid - values.mean()))] = 1.0
    area = np.trapezoid(dens, grid)
    return dens / area if area > 0 else dens


def class_conditional_latents(Z, labels, dims=None, grid_points=256) -> ClassLatents:
    """Per-(class, dim) raw samples and KDE curves on a common per-dim grid.

    ``Z`` may be ``(queries, n_z)`` codes or an ``(members, queries, n_z)``
    ensemble; ensemble members all inherit their query's label.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    if Z.ndim == 3:
        labels = np.tile(labels, Z.shape[0])
        Z = Z.reshape(-1, Z.shape[2])
    if labels.shape[0] != Z.shape[0]:
        raise ValueError("labels do not align with the latent samples")
    dims = range(Z.shape[1]) if dims is None else dims
    grids = {}
    out = ClassLatents(grids, activity=latent_activity(Z))
    for d in dims:
        col = Z[:, d]
        lo, hi = col.min(), col.max()
        pad = 0.1 * (hi - lo) if hi > lo else 1.0
        grids[d] = np.linspace(lo - pad, hi + pad, grid_points)
        for c in np.unique(labels):
            v = col[labels == c]
            out.samples[(int(c), d)] = v
            out.densities[(int(c), d)] = _density(v, grids[d])
    return out


def overlap_coefficient(p, q, grid) -> float:
    """Integral of the pointwise minimum of two normalised densities."""
    return float(np.trapezoid(np.minimum(p, q), grid))


def mean_pairwise_overlap(cl: ClassLatents, dims=None) -> float:
    dims = sorted(cl.grids) if dims is None else dims
    vals = []
    for d in dims:
        for a, b in itertools.combinations(cl.classes, 2):
            vals.append(overlap_coefficient(cl.densities[(a, d)], cl.densities[(b, d)], cl.grids[d]))
    return float(np.mean(vals))


# -- reconstruction error -----------------------------------------------------------------

def _encode_for_eval(model, encoder, y):
    if isinstance(model, VaeModel):
        return forward(model.encoder, encoder, y)[:, : model.latent_dim]
    members = getattr(encoder, "members", None)
    if members is None and isinstance(encoder, (list, tuple)):
        members = encoder
    if members is None and np.ndim(encoder) == 2:
        members = list(encoder)
    if members is not None:
        return np.mean([forward(model.encoder, phi, y) for phi in members], axis=0)
    return forward(model.encoder, encoder, y)


def test_mse(model, encoder, theta, data, kind=LossKind.SQUARED_ERROR) -> float:
    """Per-pixel mean squared reconstruction error.

    ``encoder`` is one parameter vector or an ensemble, in which case the
    ensemble-mean code is decoded; VAEs decode their posterior mean.
    Cross-entropy models are compared after the sigmoid.
    """
    y = np.atleast_2d(np.asarray(getattr(data, "inputs", data), dtype=np.float64))
    out = model.decode(theta, _encode_for_eval(model, encoder, y))
    if LossKind(kind) is LossKind.BCE_LOGITS:
        out = sigmoid(out)
    return float(np.mean((out - y) ** 2))


test_mse.__test__ = False  # not a pytest test despite the name


# -- quadrature toys ----------------------------------------------------------------------

class GridTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class ToyLoss:
    """``loss(phi, vartheta)`` over an ``(nodes, dim)`` array of encoder points.

    ``dloss`` is the analytic ``d loss / d vartheta`` (scalar ``vartheta``).
    """

    name: str
    dim: int
    loss: Callable
    dloss: Callable
    bounds: tuple  # one (lo, hi) per encoder coordinate
    # the box is the whole support (uniform-measure toys); skips the tail check
    compact: bool = False


@dataclass(frozen=True)
class Grid:
    points: int
    bounds: tuple

    @property
    def spacing(self) -> float:
        return max((hi - lo) / (self.points - 1) for lo, hi in self.bounds)

    def nodes(self):
        axes = [np.linspace(lo, hi, self.points) for lo, hi in self.bounds]
        w1 = np.full(self.points, 1.0)
        w1[[0, -1]] = 0.5
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        w = np.ones(1)
        boundary = np.zeros(1, dtype=bool)
        edge = np.zeros(self.points, dtype=bool)
        edge[[0, -1]] = True
        for (lo, hi) in self.bounds:
            h = (hi - lo) / (self.points - 1)
            w = np.multiply.outer(w, w1 * h).ravel()
            boundary = np.logical_or.outer(boundary, edge).ravel()
        return pts, w, boundary

    def refined(self, factor) -> "Grid":
        return Grid((self.points - 1) * factor + 1, self.bounds)


def _log_gibbs(toy, pts, w, boundary, vartheta, beta, boundary_tol):
    lw = np.log(w) - beta * toy.loss(pts, vartheta)
    logZ = logsumexp(lw)
    if boundary.any() and not toy.compact:
        edge = np.exp(logsumexp(lw[boundary]) - logZ)
        if edge > boundary_tol:
            raise GridTooSmallError(
                f"{toy.name}: boundary mass {edge:.3e} of Z exceeds {boundary_tol:g}; widen the grid")
    return lw, logZ


@dataclass
class FreeEnergyCheck:
    free_energy: float
    grad_fd: float
    grad_expectation: float
    discrepancy: float
    fd_step: float


DEFAULT_POINTS = {1: 401, 2: 201, 3: 61}


def free_energy_check(toy: ToyLoss, vartheta: float, beta: float, grid: Grid | int | None = None,
                      fd_step: float | None = None, boundary_tol=1e-6) -> FreeEnergyCheck:
    """Compare ``dF/dvartheta`` (central difference) with ``E_gibbs[dL/dvartheta]``.

    The difference step defaults to a tenth of the grid spacing, so refining the
    grid also refines the difference quotient.
    """
    if grid is None:
        grid = DEFAULT_POINTS[toy.dim]
    if not isinstance(grid, Grid):
        grid = Grid(int(grid), toy.bounds)
    pts, w, boundary = grid.nodes()
    h = 0.1 * grid.spacing if fd_step is None else fd_step
    lw, logZ = _log_gibbs(toy, pts, w, boundary, vartheta, beta, boundary_tol)
    _, logZp = _log_gibbs(toy, pts, w, boundary, vartheta + h, beta, boundary_tol)
    _, logZm = _log_gibbs(toy, pts, w, boundary, vartheta - h, beta, boundary_tol)
    F = -logZ / beta
    fd = -(logZp - logZm) / (2.0 * h * beta)
    p = np.exp(lw - logZ)
    ex = float(p @ toy.dloss(pts, vartheta))
    return FreeEnergyCheck(float(F), float(fd), ex, abs(fd - ex), h)


def convergence_orders(toy, vartheta, beta, points=(51, 101, 201, 401)):
    """Discrepancies under successive grid doubling and the observed orders."""
    errs = []
    for n in points:
        errs.append(free_energy_check(toy, vartheta, beta, Grid(n, toy.bounds)).discrepancy)
    errs = np.array(errs)
    return errs, np.log2(errs[:-1] / errs[1:])


@dataclass
class MarginalCheck:
    edges: np.ndarray
    gibbs_hist: np.ndarray  # binned Gibbs measure, normalised
    free_energy_curve: np.ndarray  # exp(-beta F(theta)) / sum, normalised
    tv: float
    entropy: np.ndarray  # log Omega per bin (-inf where empty)
    mean_loss: np.ndarray  # Gibbs-conditional <L> per bin
    free_energy: np.ndarray  # -log(restricted integral) / beta per bin
    omega: np.ndarray  # uniform-measure volume per bin, normalised


def cv_marginal_check(toy: ToyLoss, collective: Callable, vartheta: float, beta: float,
                      grid: Grid | int = 20001, bins=200, refine=3, boundary_tol=1e-6) -> MarginalCheck:
    """Bin the Gibbs measure by ``theta(phi)`` and compare with ``exp(-beta F(theta))``.

    The first curve assigns each quadrature node's Gibbs weight to its theta
    bin. The second evaluates, on a grid refined ``refine`` times, the volume
    ``Omega`` of each theta bin and the mean Boltzmann factor over it; their
    product is the restricted partition function of the bin.
    """
    if not isinstance(grid, Grid):
        grid = Grid(int(grid), toy.bounds)
    pts, w, boundary = grid.nodes()
    lw, logZ = _log_gibbs(toy, pts, w, boundary, vartheta, beta, boundary_tol)
    th = collective(pts)
    edges = np.linspace(th.min(), th.max(), bins + 1)
    which = np.clip(np.searchsorted(edges, th, side="right") - 1, 0, bins - 1)
    hist = np.bincount(which, weights=np.exp(lw - logZ), minlength=bins)
    hist /= hist.sum()

    fine = grid if refine == 1 else grid.refined(refine)
    fpts, fw, _ = fine.nodes()
    fth = collective(fpts)
    fwhich = np.clip(np.searchsorted(edges, fth, side="right") - 1, 0, bins - 1)
    floss = toy.loss(fpts, vartheta)
    shift = floss.min()
    boltz = np.exp(-beta * (floss - shift))
    omega = np.bincount(fwhich, weights=fw, minlength=bins)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_boltz = np.bincount(fwhich, weights=fw * boltz, minlength=bins) / omega
        restricted = omega * mean_boltz
        mean_loss = np.bincount(fwhich, weights=fw * boltz * floss, minlength=bins) / (omega * mean_boltz)
        entropy = np.log(omega)
        free_energy = shift - np.log(restricted) / beta
    restricted = np.nan_to_num(restricted)
    curve = restricted / restricted.sum()
    tv = 0.5 * float(np.abs(hist - curve).sum())
    return MarginalCheck(edges, hist, curve, tv, entropy, mean_loss, free_energy, omega / omega.sum())


# -- shipped toys ------------------------------------------------------------------------

def _sq(a):
    return a * a


def translation_toy() -> ToyLoss:
    return ToyLoss("translation", 1,
                   lambda p, t: 0.5 * _sq(p[:, 0] - t),
                   lambda p, t: -(p[:, 0] - t),
                   ((-12.0, 12.0),))


def scaled_gaussian_toy() -> ToyLoss:
    return ToyLoss("scaled_gaussian", 1,
                   lambda p, t: 0.5 * t * t * _sq(p[:, 0]),
                   lambda p, t: t * _sq(p[:, 0]),
                   ((-12.0, 12.0),))


def tilted_double_well_toy() -> ToyLoss:
    return ToyLoss("tilted_double_well", 1,
                   lambda p, t: 0.25 * _sq(_sq(p[:, 0]) - 1.0) + t * p[:, 0],
                   lambda p, t: p[:, 0],
                   ((-3.0, 3.0),))


def linear_autoencoder_toy() -> ToyLoss:
    # two-parameter encoder (gain a, offset b) with decoder gain vartheta on a tiny data set
    y = np.array([-1.0, -0.3, 0.4, 1.2])

    def loss(p, t):
        r = t * (p[:, :1] * y + p[:, 1:2]) - y
        return 0.5 * np.sum(r * r, axis=1) + 0.05 * (_sq(p[:, 0]) + _sq(p[:, 1]))

    def dloss(p, t):
        z = p[:, :1] * y + p[:, 1:2]
        return np.sum((t * z - y) * z, axis=1)

    return ToyLoss("linear_autoencoder", 2, loss, dloss, ((-6.0, 6.0), (-6.0, 6.0)))


def coupled_quartic_toy() -> ToyLoss:
    def A(t):
        return np.array([[1.0 + t * t, t, 0.0], [t, 2.0, 0.3], [0.0, 0.3, 1.5]])

    dA = lambda t: np.array([[2.0 * t, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

    def loss(p, t):
        return 0.5 * np.einsum("gi,ij,gj->g", p, A(t), p) + 0.1 * _sq(np.sum(p * p, axis=1))

    def dloss(p, t):
        return 0.5 * np.einsum("gi,ij,gj->g", p, dA(t), p)

    return ToyLoss("coupled_quartic", 3, loss, dloss, ((-5.0, 5.0),) * 3)


def shipped_toys() -> list[ToyLoss]:
    return [translation_toy(), scaled_gaussian_toy(), tilted_double_well_toy(),
            linear_autoencoder_toy(), coupled_quartic_toy()]


def random_toy(seed) -> ToyLoss:
    """Seeded 1- or 2-parameter loss: quadratic well tilted by vartheta plus a quartic."""
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 3))
    s = rng.uniform(0.5, 2.0, size=dim)
    u = rng.normal(size=dim)
    q = rng.uniform(0.0, 0.3)

    def loss(p, t):
        d = p - t * u
        return 0.5 * np.sum(s * d * d, axis=1) + q * _sq(np.sum(p * p, axis=1)) + 0.5 * t * t * np.sum(p * p, axis=1)

    def dloss(p, t):
        return -np.sum(s * (p - t * u) * u, axis=1) + t * np.sum(p * p, axis=1)

    return ToyLoss(f"random_{seed}", dim, loss, dloss, ((-6.0, 6.0),) * dim)


def shipped_marginal_cases():
    """``(name, toy, collective, vartheta, beta)`` tuples for the marginal check."""
    one = lambda p: p[:, 0]
    return [
        ("identity_cv", translation_toy(), one, 0.3, 1.0),
        ("double_well_square", tilted_double_well_toy(), lambda p: p[:, 0] ** 2, 0.0, 4.0),
        ("double_well_tilted", tilted_double_well_toy(), one, 0.2, 4.0),
        ("constant_energy", ToyLoss("constant", 1, lambda p, t: np.zeros(len(p)),
                                    lambda p, t: np.zeros(len(p)), ((-1.0, 1.0),), compact=True),
         lambda p: p[:, 0] ** 2, 0.0, 1.0),
    ]
