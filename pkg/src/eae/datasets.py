"""Data sources: MNIST IDX files and seeded synthetic generators."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from eae.io import read_container, write_container

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class StabilityError(ValueError):
    pass


class SplitConfigError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    time_derivatives: np.ndarray | None = None
    # ground truth for synthetic dynamics, when the generator knows it
    latents: np.ndarray | None = None
    latent_derivatives: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)
    # per-row time stamps for trajectory data
    times: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        n = self.inputs.shape[0]
        for name in ("labels", "time_derivatives", "latents", "latent_derivatives", "times"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} has {len(v)} rows, inputs have {n}")
        if self.time_derivatives is not None and self.time_derivatives.shape != self.inputs.shape:
            raise ValueError("time_derivatives must match inputs in shape")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.inputs[idx], pick(self.labels), pick(self.time_derivatives),
                       pick(self.latents), pick(self.latent_derivatives), dict(self.provenance),
                       pick(self.times))


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndims):
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise IdxFormatError("truncated magic number", len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(">" + "I" * ndims, raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IdxFormatError(f"truncated payload (expected {need} bytes)", len(raw))
    if len(raw) > need:
        raise IdxFormatError(f"{len(raw) - need} trailing bytes", need)
    return dims, np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read IDX image (and optional label) files; pixels scaled to [0, 1]."""
    raw = _read_bytes(images_path)
    dims, pix = _parse_idx(raw, IDX_IMAGES_MAGIC, 3)
    n, rows, cols = dims
    images = pix.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        (ln,), lab = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1)
        if ln != n:
            raise IdxFormatError(f"label count {ln} != image count {n}", 4)
        if lab.size and lab.max() > 9:
            raise IdxFormatError(f"label value {int(lab.max())} outside 0..9", 8 + int(np.argmax(lab > 9)))
        labels = lab.astype(np.int64)
    digest = hashlib.sha256(raw).hexdigest()[:16]
    return Dataset(images, labels, provenance={"source": "idx", "images_sha256": digest,
                                               "shape": [rows, cols]})


def write_idx(images_path, labels_path, images_u8, labels=None):
    """Write IDX files (used to fabricate fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, r, c = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c))
        fh.write(images_u8.tobytes())
    if labels_path is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
            fh.write(labels.tobytes())


# -- embedded oscillator --------------------------------------------------------

def _rk4(f, z, dt):
    k1 = f(z)
    k2 = f(z + 0.5 * dt * k1)
    k3 = f(z + 0.5 * dt * k2)
    k4 = f(z + dt * k3)
    return z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def gen_oscillator(omega=2.0, embed_dim=100, n=500, dt=0.01, seed=0, radius=1.0,
                   embedding=None, n_trajectories=1, embed_scale=1.0) -> Dataset:
    """Harmonic rotation ``z1' = w z2, z2' = -w z1`` linearly embedded in ``embed_dim``.

    ``n`` rows are split evenly over ``n_trajectories`` runs, each from a seeded
    random phase. ``radius`` is a number or a ``(lo, hi)`` range sampled per run.
    Points on a single orbit satisfy a quadratic identity, which makes a cubic
    basis library rank deficient; several radii avoid that.

    ``embedding`` (shape ``(2, embed_dim)``) overrides the seeded random map,
    whose entries are ``N(0, embed_scale^2 / embed_dim)``. Time derivatives are exact: the
    vector field evaluated at each state, pushed through the map.
    """
    if omega <= 0:
        raise ValueError("omega must be > 0")
    if embed_dim < 2:
        raise ValueError("embed_dim must be >= 2")
    if not 1 <= n_trajectories <= n:
        raise ValueError("n_trajectories must be in [1, n]")
    rng = np.random.default_rng(seed)
    if embedding is None:
        P = rng.normal(0.0, embed_scale / np.sqrt(embed_dim), size=(2, embed_dim))
    else:
        P = np.asarray(embedding, dtype=np.float64)
        if P.shape != (2, embed_dim):
            raise ValueError(f"embedding must have shape (2, {embed_dim})")
    lo, hi = (radius, radius) if np.isscalar(radius) else radius
    field_ = lambda z: omega * np.array([z[1], -z[0]])
    Z = np.empty((n, 2))
    times = np.empty(n)
    bounds = np.linspace(0, n, n_trajectories + 1).astype(int)
    for j in range(n_trajectories):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        r = rng.uniform(lo, hi) if hi > lo else lo
        z = r * np.array([np.cos(angle), np.sin(angle)])
        for i in range(bounds[j], bounds[j + 1]):
            Z[i] = z
            times[i] = (i - bounds[j]) * dt
            z = _rk4(field_, z, dt)
    Zdot = omega * np.stack([Z[:, 1], -Z[:, 0]], axis=1)
    prov = {"generator": "oscillator", "omega": omega, "embed_dim": embed_dim, "n": n,
            "dt": dt, "seed": seed, "radius": radius if np.isscalar(radius) else list(radius),
            "n_trajectories": n_trajectories, "embed_scale": embed_scale}
    return Dataset(Z @ P, time_derivatives=Zdot @ P, latents=Z, latent_derivatives=Zdot,
                   provenance=prov, times=times)


# -- lambda-omega reaction-diffusion ---------------------------------------------

def _laplacian(a, h):
    return (np.roll(a, 1, 0) + np.roll(a, -1, 0) + np.roll(a, 1, 1) + np.roll(a, -1, 1) - 4 * a) / (h * h)


def lambda_omega_rhs(u, v, h, d1=0.1, d2=0.1, beta=1.0):
    r2 = u * u + v * v
    lam = 1.0 - r2
    om = -beta * r2
    du = lam * u - om * v + d1 * _laplacian(u, h)
    dv = om * u + lam * v + d2 * _laplacian(v, h)
    return du, dv


def gen_lambda_omega(grid_n=32, steps=2000, dt=0.05, d1=0.1, d2=0.1, seed=0, beta=1.0,
                     length=20.0, save_every=10, initial="spiral", noise=0.0,
                     return_v=False) -> Dataset:
    """Integrate the lambda-omega system on a periodic square with RK4.

    ``lambda(r) = 1 - r^2``, ``omega(r) = -beta r^2``, 5-point Laplacian. Each
    saved snapshot is the flattened ``u`` field; its time derivative goes to
    ``time_derivatives``. ``initial`` is ``"spiral"`` or ``"zero"``.
    """
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    h = length / grid_n
    # RK4 is stable on the negative real axis up to |z| ~ 2.78; the 5-point
    # Laplacian's most negative eigenvalue is -8/h^2.
    if dt * max(d1, d2) * 8.0 / (h * h) > 2.5 or dt > 0.5:
        raise StabilityError(
            f"dt={dt} too large for grid spacing {h:.4g} (diffusion number "
            f"{dt * max(d1, d2) / h ** 2:.4g})")
    rng = np.random.default_rng(seed)
    xs = np.linspace(-length / 2, length / 2, grid_n, endpoint=False)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    if initial == "spiral":
        R = np.sqrt(X**2 + Y**2)
        ang = np.angle(X + 1j * Y)
        u = np.tanh(R * np.cos(ang - R))
        v = np.tanh(R * np.sin(ang - R))
    elif initial == "zero":
        u = np.zeros_like(X)
        v = np.zeros_like(X)
    else:
        raise ValueError(f"unknown initial condition {initial!r}")
    if noise:
        u = u + noise * rng.standard_normal(u.shape)
        v = v + noise * rng.standard_normal(v.shape)

    f = lambda u_, v_: lambda_omega_rhs(u_, v_, h, d1, d2, beta)
    snaps, dsnaps, vs = [], [], []
    for k in range(steps + 1):
        if k % save_every == 0:
            du, _ = f(u, v)
            snaps.append(u.ravel().copy())
            dsnaps.append(du.ravel().copy())
            vs.append(v.ravel().copy())
        if k == steps:
            break
        k1 = f(u, v)
        k2 = f(u + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1])
        k3 = f(u + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1])
        k4 = f(u + dt * k3[0], v + dt * k3[1])
        u = u + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if not np.all(np.isfinite(u)):
            raise StabilityError(f"field diverged at step {k}")
    prov = {"generator": "lambda_omega", "grid_n": grid_n, "steps": steps, "dt": dt,
            "d1": d1, "d2": d2, "beta": beta, "length": length, "save_every": save_every,
            "initial": initial, "noise": noise, "seed": seed}
    times = dt * save_every * np.arange(len(snaps))
    ds = Dataset(np.array(snaps), time_derivatives=np.array(dsnaps), provenance=prov, times=times)
    if return_v:
        return ds, np.array(vs)
    return ds


# -- Gaussian mixture -----------------------------------------------------------------

def gen_gaussian_mixture(k=10, dim=32, n=1000, seed=0, separation=3.0, spread=1.0,
                         intrinsic_dim=None) -> Dataset:
    """``k`` seeded Gaussian clusters, labelled by component.

    Cluster means are drawn ``N(0, separation^2 / dim)`` per coordinate and then
    pushed apart until every pair is at least ``separation`` apart. Within-cluster
    noise has standard deviation ``spread / sqrt(dim)`` per coordinate and, if
    ``intrinsic_dim`` is given, lives in a random subspace of that dimension.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation / np.sqrt(dim), size=(k, dim))
    for _ in range(100):
        if k < 2:
            break
        d = np.linalg.norm(means[:, None] - means[None], axis=-1) + np.eye(k) * 1e9
        if d.min() >= separation:
            break
        means *= separation / d.min()
    labels = rng.integers(0, k, size=n)
    if intrinsic_dim is None:
        noise = rng.normal(0.0, spread / np.sqrt(dim), size=(n, dim))
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, intrinsic_dim)))
        noise = rng.normal(0.0, spread / np.sqrt(intrinsic_dim), size=(n, intrinsic_dim)) @ basis.T
    x = means[labels] + noise
    prov = {"generator": "gaussian_mixture", "k": k, "dim": dim, "n": n, "seed": seed,
            "separation": separation, "spread": spread, "intrinsic_dim": intrinsic_dim}
    return Dataset(x, labels=labels.astype(np.int64), provenance=prov)


def gen_correlated_gaussian(dim=2, n=200, seed=0, scales=None) -> Dataset:
    """Zero-mean Gaussian cloud with a seeded random rotation; a quadratic-loss toy."""
    rng = np.random.default_rng(seed)
    scales = np.linspace(1.0, 0.3, dim) if scales is None else np.asarray(scales, dtype=np.float64)
    rot, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    x = rng.standard_normal((n, dim)) * scales @ rot.T
    prov = {"generator": "correlated_gaussian", "dim": dim, "n": n, "seed": seed,
            "scales": [float(s) for s in scales]}
    return Dataset(x, provenance=prov)


# -- splitting and caching ----------------------------------------------------------

def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded permutation cut into contiguous slices.

    Slice sizes are ``floor(f * n)`` except the last, which takes the remainder.
    A slice with a positive fraction that comes out empty is an error.
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitConfigError(f"fractions must be non-negative and sum to 1, got {fractions}")
    n = len(dataset)
    sizes = [int(np.floor(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    for f, s in zip(fractions, sizes):
        if f > 0 and s == 0:
            raise SplitConfigError(f"fraction {f} of {n} rows gives an empty slice")
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    pos = 0
    for s in sizes:
        out.append(dataset.subset(np.sort(perm[pos : pos + s])))
        pos += s
    return tuple(out)


def save_dataset(path, ds: Dataset):
    arrays = {"inputs": ds.inputs}
    for name in ("labels", "time_derivatives", "latents", "latent_derivatives", "times"):
        v = getattr(ds, name)
        if v is not None:
            arrays[name] = np.asarray(v, dtype=np.float64)
    write_container(path, {"format": "eae-dataset", "provenance": ds.provenance}, arrays)


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path)
    if header.get("format") != "eae-dataset":
        raise ValueError(f"{path}: not a dataset file")
    labels = arrays.get("labels")
    return Dataset(
        arrays["inputs"],
        None if labels is None else labels.astype(np.int64),
        arrays.get("time_derivatives"),
        arrays.get("latents"),
        arrays.get("latent_derivatives"),
        header.get("provenance", {}),
        arrays.get("times"),
    )
