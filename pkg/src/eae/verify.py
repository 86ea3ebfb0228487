"""Numerical self-checks: sampler fidelity, differentiation and the quadrature identities.

Each check returns a ``CheckResult``; ``run_all`` collects them in a fixed
order. Results carry only deterministic numbers (no timings), so summaries of
two runs compare byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from eae import diagnostics as dg
from eae import sampler
from eae.autodiff import ACTIVATIONS, NetworkSpec, forward, init_params, jvp, vjp
from eae.datasets import gen_oscillator
from eae.dynamics import BasisLibrary, estimate_xi, integrate_latent_ode
from eae.training import EncoderEnsemble, decoder_grad_estimate


@dataclass
class CheckResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    tolerance: dict = field(default_factory=dict)

    def to_dict(self):
        return {"passed": bool(self.passed), "metrics": _plain(self.metrics), "tolerance": _plain(self.tolerance)}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in np.asarray(obj).tolist()] if isinstance(obj, np.ndarray) else [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


# -- sampler on a quadratic well ------------------------------------------------------------

QUAD_A = np.array([1.0, 4.0])
QUAD_T = 0.1
# strong coupling (tau = 5 dt); the default tau = 100 dt equilibrates too slowly here
QUAD_CFG = sampler.ThermostatConfig(temperature=QUAD_T, dt=0.1, chain_length=4,
                                    chain_mass=2 * QUAD_T * 0.5**2, seed=0)


@dataclass
class QuadraticRun:
    cov: np.ndarray
    target: np.ndarray
    window_temperatures: np.ndarray


def quadratic_gibbs_run(cfg=QUAD_CFG, burn_in=10_000, n_samples=100_000, window=10_000) -> QuadraticRun:
    """Sample ``0.5 phi^T diag(A) phi`` and record covariance and windowed kinetic temperature."""
    A = QUAD_A
    grad = lambda phi: A * phi
    state = sampler.init_state(np.zeros(2), cfg)
    for _ in range(burn_in):
        state = sampler.step(state, grad, cfg, initial_grad=state.last_grad)
    xs = np.empty((n_samples, 2))
    kin = np.empty(n_samples)
    for i in range(n_samples):
        state = sampler.step(state, grad, cfg, initial_grad=state.last_grad)
        xs[i] = state.positions
        kin[i] = sampler.kinetic_temperature(state, cfg)
    cov = np.cov(xs.T, bias=True)
    windows = kin[: (n_samples // window) * window].reshape(-1, window).mean(axis=1)
    return QuadraticRun(cov, np.diag(cfg.temperature / A), windows)


def check_gibbs_fidelity(run: QuadraticRun, tol=0.15) -> CheckResult:
    scale = np.sqrt(np.outer(np.diag(run.target), np.diag(run.target)))
    rel = np.abs(run.cov - run.target) / scale
    return CheckResult("sampler_gibbs_fidelity", bool(rel.max() <= tol),
                       {"covariance": run.cov, "target": run.target, "max_relative_error": rel.max()},
                       {"relative": tol})


def check_equipartition(run: QuadraticRun, T=QUAD_T, tol=0.10) -> CheckResult:
    dev = np.abs(run.window_temperatures / T - 1.0)
    return CheckResult("sampler_equipartition", bool(dev.max() <= tol),
                       {"window_temperatures": run.window_temperatures, "max_relative_deviation": dev.max()},
                       {"relative": tol})


# -- differentiation -----------------------------------------------------------------------------

def _rel(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def autodiff_probe(rng, h=1e-6):
    """One random net/probe; returns ``(vjp_rel_err, jvp_rel_err)`` against central differences."""
    n_layers = int(rng.integers(1, 4))
    widths = [int(w) for w in rng.integers(1, 7, size=n_layers + 1)]
    acts = tuple(rng.choice(ACTIVATIONS, size=n_layers))
    spec = NetworkSpec(tuple(widths), acts, bool(rng.integers(0, 2)))
    params = init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params)
    x = rng.standard_normal((int(rng.integers(1, 5)), widths[0]))
    u = rng.standard_normal((x.shape[0], widths[-1]))
    dp = rng.standard_normal(spec.n_params)
    dx = rng.standard_normal(x.shape)
    f = lambda p, xx: float(np.sum(u * forward(spec, p, xx)))
    fd = (f(params + h * dp, x + h * dx) - f(params - h * dp, x - h * dx)) / (2 * h)
    gp, gx = vjp(spec, params, x, u)
    e_vjp = abs(fd - (gp @ dp + np.sum(gx * dx))) / max(abs(fd), 1e-8)
    fd_j = (forward(spec, params, x + h * dx) - forward(spec, params, x - h * dx)) / (2 * h)
    e_jvp = _rel(fd_j, jvp(spec, params, x, dx))
    return e_vjp, e_jvp


def check_autodiff(n_probes=100, seed=0, tol=1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    errs = np.array([autodiff_probe(rng) for _ in range(n_probes)])
    worst = errs.max(axis=0)
    return CheckResult("autodiff_finite_difference", bool(worst.max() <= tol),
                       {"probes": n_probes, "max_vjp_error": worst[0], "max_jvp_error": worst[1]},
                       {"relative": tol})


# -- free-energy identities -------------------------------------------------------------------

FREE_ENERGY_CASES = (
    (dg.scaled_gaussian_toy, 0.7, 1.0),
    (dg.tilted_double_well_toy, 0.3, 2.0),
    (dg.linear_autoencoder_toy, 0.8, 1.0),
    (dg.coupled_quartic_toy, 0.4, 1.0),
    (dg.translation_toy, 0.5, 1.0),
)


def check_free_energy_gradient(tol=1e-3, min_order=1.9) -> CheckResult:
    disc = {}
    for make, vt, beta in FREE_ENERGY_CASES:
        toy = make()
        disc[toy.name] = dg.free_energy_check(toy, vt, beta).discrepancy
    errs, orders = dg.convergence_orders(dg.scaled_gaussian_toy(), 0.7, 1.0)
    ok = max(disc.values()) <= tol and orders.min() >= min_order
    return CheckResult("free_energy_gradient", bool(ok),
                       {"discrepancy": disc, "order_errors": errs, "orders": orders},
                       {"absolute": tol, "min_order": min_order})


def check_cv_marginal(tol=0.05) -> CheckResult:
    tvs = {}
    omega_tv = None
    for name, toy, cv, vt, beta in dg.shipped_marginal_cases():
        res = dg.cv_marginal_check(toy, cv, vt, beta)
        tvs[name] = res.tv
        if name == "constant_energy":
            omega_tv = 0.5 * float(np.abs(res.gibbs_hist - res.omega).sum())
    ok = max(tvs.values()) <= tol and omega_tv <= tol
    return CheckResult("cv_marginal", bool(ok), {"tv": tvs, "constant_energy_vs_omega": omega_tv},
                       {"tv": tol})


# -- identities and oracles ------------------------------------------------------------------

def check_ensemble_identities() -> CheckResult:
    rng = np.random.default_rng(0)
    z1, z2 = rng.standard_normal(4), rng.standard_normal(4)
    ends = (np.array_equal(dg.interpolate_codes(z1, z2, 1.0), z1)
            and np.array_equal(dg.interpolate_codes(z1, z2, 0.0), z2))
    Z = rng.standard_normal((5, 7, 3))
    two_stage = dg.ensemble_mean_code(Z)
    flat = Z.reshape(-1, 3).mean(axis=0)
    g = rng.standard_normal(6)
    ens = EncoderEnsemble()
    ens.add(np.zeros(1), g)
    ens.add(np.zeros(1), -g)
    gbar = decoder_grad_estimate(ens)
    diff = float(np.abs(two_stage - flat).max())
    ok = ends and diff <= 1e-12 and np.all(gbar == 0)
    return CheckResult("ensemble_identities", bool(ok),
                       {"endpoints_exact": ends, "two_stage_vs_flat": diff, "opposite_gradients_mean": np.abs(gbar).max()},
                       {"absolute": 1e-12})


def check_xi_oracle(tol=1e-8) -> CheckResult:
    lib = BasisLibrary.default(2)
    ds = gen_oscillator(2.0, 100, 500, 0.01, seed=0, radius=(1.0, 3.0), n_trajectories=10)
    xi = estimate_xi(lib, ds.latents, ds.latent_derivatives)
    target = np.zeros_like(xi)
    target[lib.names.index("z2"), 0] = 2.0
    target[lib.names.index("z1"), 1] = -2.0
    err = float(np.abs(xi - target).max())
    return CheckResult("xi_ground_truth", err <= tol, {"max_error": err}, {"absolute": tol})


def check_rotation_integration(tol=1e-6) -> CheckResult:
    lib = BasisLibrary.default(2)
    xi = np.zeros((len(lib), 2))
    xi[lib.names.index("z2"), 0] = 2.0
    xi[lib.names.index("z1"), 1] = -2.0
    z0 = np.array([1.0, 0.5])
    traj = integrate_latent_ode(lib, xi, z0, 1e-3, 1000)
    drift = float(np.abs(np.linalg.norm(traj, axis=1) - np.linalg.norm(z0)).max())
    half = integrate_latent_ode(lib, xi, z0, np.pi / 2 / 1000, 1000)[-1]
    flip = float(np.abs(half + z0).max())
    ok = drift <= tol and flip <= 1e-4
    return CheckResult("latent_rotation", ok, {"radius_drift": drift, "half_period_error": flip},
                       {"radius": tol, "half_period": 1e-4})


def _guard(name, fn):
    try:
        return fn()
    except (ArithmeticError, ValueError) as exc:
        return CheckResult(name, False, {"error": f"{type(exc).__name__}: {exc}"})


def run_all(gibbs_samples=100_000) -> list[CheckResult]:
    try:
        run = quadratic_gibbs_run(n_samples=gibbs_samples)
        sampler_checks = [check_gibbs_fidelity(run), check_equipartition(run)]
    except (ArithmeticError, ValueError) as exc:
        err = {"error": f"{type(exc).__name__}: {exc}"}
        sampler_checks = [CheckResult("sampler_gibbs_fidelity", False, err),
                          CheckResult("sampler_equipartition", False, err)]
    return sampler_checks + [
        _guard("autodiff_finite_difference", check_autodiff),
        _guard("free_energy_gradient", check_free_energy_gradient),
        _guard("cv_marginal", check_cv_marginal),
        _guard("ensemble_identities", check_ensemble_identities),
        _guard("xi_ground_truth", check_xi_oracle),
        _guard("latent_rotation", check_rotation_integration),
    ]


def summary(results) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "checks": {r.name: r.to_dict() for r in results},
        "failures": [r.name for r in results if not r.passed],
    }


def write_summary(results, path):
    with open(path, "w") as fh:
        json.dump(summary(results), fh, indent=2, sort_keys=True)
        fh.write("\n")
