"""Dense multilayer-perceptron evaluation and differentiation.

Parameters of a network live in one flat float64 vector. Layer ``l`` owns a
weight block of shape ``(n_in, n_out)`` (row-major) followed by a bias block
of length ``n_out``; a layer maps ``h -> act(h @ W + b)``. A spec built with
``output_bias=False`` has no bias block on its last layer.

Besides plain forward evaluation this module provides reverse-mode
(``vjp``) and forward-mode (``jvp``) products, and a differentiable
forward-mode pass (``tangent_forward`` / ``tangent_backward``) used when a
loss depends on a Jacobian-vector product and must itself be differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("linear", "relu", "elu", "sigmoid")


class DimensionError(ValueError):
    """Raised when an array does not fit the network it is fed to."""


@dataclass(frozen=True)
class NetworkSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    output_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_widths) < 2:
            raise ValueError("a network needs at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if len(self.activations) != len(self.layer_widths) - 1:
            raise ValueError(
                f"expected {len(self.layer_widths) - 1} activations, got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; choose from {ACTIVATIONS}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        n = sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))
        return n if self.output_bias else n - w[-1]

    def offsets(self) -> list[tuple[int, int, int]]:
        """Per layer ``(weight_start, bias_start, bias_end)`` into the flat vector."""
        out = []
        pos = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            wstart = pos
            bstart = wstart + w[i] * w[i + 1]
            last = i == len(w) - 2
            bend = bstart if (last and not self.output_bias) else bstart + w[i + 1]
            out.append((wstart, bstart, bend))
            pos = bend
        return out

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activations": list(self.activations),
                "output_bias": self.output_bias}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["layer_widths"]), tuple(d["activations"]), bool(d.get("output_bias", True)))


def mlp_spec(widths, hidden_activation="relu", output_activation="linear",
             output_bias=True) -> NetworkSpec:
    widths = tuple(widths)
    acts = (hidden_activation,) * (len(widths) - 2) + (output_activation,)
    return NetworkSpec(widths, acts, output_bias)


def unflatten(spec: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer ``(W, b)`` views."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise DimensionError(
            f"parameter vector has shape {params.shape}, network expects ({spec.n_params},)"
        )
    w = spec.layer_widths
    layers = []
    for i, (ws, bs, be) in enumerate(spec.offsets()):
        b = params[bs:be] if be > bs else np.zeros(w[i + 1])
        layers.append((params[ws:bs].reshape(w[i], w[i + 1]), b))
    return layers


def flatten(layers, spec: NetworkSpec | None = None) -> np.ndarray:
    """Inverse of ``unflatten``; pass ``spec`` to drop a missing output bias."""
    parts = []
    for W, b in layers:
        parts += [W.ravel(), b.ravel()]
    if spec is not None and not spec.output_bias:
        parts.pop()
    return np.concatenate(parts)


def init_params(spec: NetworkSpec, rng: np.random.Generator | int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    w = spec.layer_widths
    parts = []
    for i in range(len(w) - 1):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        parts.append(rng.uniform(-limit, limit, size=w[i] * w[i + 1]))
        if spec.output_bias or i < len(w) - 2:
            parts.append(np.zeros(w[i + 1]))
    return np.concatenate(parts)


# -- activations: value, first and second derivative -------------------------

def _act(name, a):
    if name == "linear":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "elu":
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))
    # sigmoid, evaluated without overflow for large |a|
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _dact(name, a, out):
    if name == "linear":
        return np.ones_like(a)
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "elu":
        return np.where(a > 0, 1.0, out + 1.0)
    return out * (1.0 - out)


def _d2act(name, a, out):
    if name in ("linear", "relu"):
        return np.zeros_like(a)
    if name == "elu":
        return np.where(a > 0, 0.0, out + 1.0)
    return out * (1.0 - out) * (1.0 - 2.0 * out)


# -- evaluation ----------------------------------------------------------------

def _as_batch(spec: NetworkSpec, x, what="input"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"{what} must be 1-D or 2-D, got shape {x.shape}")
    if x.shape[1] != spec.n_in:
        raise DimensionError(
            f"layer 0 expects {what} width {spec.n_in}, got {x.shape[1]}"
        )
    return x, single


def _run(spec, params, x):
    """Forward pass keeping the per-layer inputs and pre-activations."""
    layers = unflatten(spec, params)
    hs, pres = [], []
    h = x
    for (W, b), act in zip(layers, spec.activations):
        hs.append(h)
        a = h @ W + b
        pres.append(a)
        h = _act(act, a)
    return layers, hs, pres, h


def forward(spec: NetworkSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate the network on a single row or a batch of rows."""
    xb, single = _as_batch(spec, x)
    h = xb
    for (W, b), act in zip(unflatten(spec, params), spec.activations):
        h = _act(act, h @ W + b)
    return h[0] if single else h


def vjp(spec: NetworkSpec, params: np.ndarray, x, upstream):
    """Reverse-mode product ``upstream^T J``.

    Returns ``(grad_params, grad_input)`` where ``grad_params`` is flat and
    ``grad_input`` has the shape of ``x``.
    """
    xb, single = _as_batch(spec, x)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], spec.n_out):
        raise DimensionError(
            f"upstream has shape {np.shape(upstream)}, output is {(xb.shape[0], spec.n_out)}"
        )
    layers, hs, pres, out = _run(spec, params, xb)
    grads = [None] * len(layers)
    outs = hs[1:] + [out]
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        act = spec.activations[l]
        ga = g * _dact(act, pres[l], outs[l])
        grads[l] = (hs[l].T @ ga, ga.sum(axis=0))
        g = ga @ W.T
    gx = g[0] if single else g
    return flatten(grads, spec), gx


def jvp(spec: NetworkSpec, params: np.ndarray, x, tangent_x) -> np.ndarray:
    """Forward-mode product ``J_x f(x) . tangent_x``."""
    xb, single = _as_batch(spec, x)
    t = np.asarray(tangent_x, dtype=np.float64)
    if t.shape != np.shape(x):
        raise DimensionError(f"tangent has shape {t.shape}, input has shape {np.shape(x)}")
    t = t[None, :] if single else t
    h = xb
    for (W, b), act in zip(unflatten(spec, params), spec.activations):
        a = h @ W + b
        h = _act(act, a)
        t = _dact(act, a, h) * (t @ W)
    return t[0] if single else t


@dataclass
class TangentCache:
    layers: list
    hs: list
    ts: list
    pres: list
    tpres: list
    outs: list


def tangent_forward(spec: NetworkSpec, params: np.ndarray, x: np.ndarray, tx: np.ndarray):
    """Joint primal/tangent pass: returns ``(f(x), J f(x) tx, cache)``.

    ``tangent_backward`` differentiates both outputs with respect to the
    parameters, the primal input and the tangent input.
    """
    x = np.asarray(x, dtype=np.float64)
    tx = np.asarray(tx, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise DimensionError(f"layer 0 expects input width {spec.n_in}, got shape {x.shape}")
    if tx.shape != x.shape:
        raise DimensionError(f"tangent has shape {tx.shape}, input has shape {x.shape}")
    layers = unflatten(spec, params)
    hs, ts, pres, tpres, outs = [], [], [], [], []
    h, t = x, tx
    for (W, b), act in zip(layers, spec.activations):
        hs.append(h)
        ts.append(t)
        a = h @ W + b
        ta = t @ W
        h = _act(act, a)
        t = _dact(act, a, h) * ta
        pres.append(a)
        tpres.append(ta)
        outs.append(h)
    return h, t, TangentCache(layers, hs, ts, pres, tpres, outs)


def tangent_backward(spec: NetworkSpec, cache: TangentCache, g_out, g_tout):
    """Pull cotangents of ``(f(x), J tx)`` back to ``(params, x, tx)``."""
    g = np.asarray(g_out, dtype=np.float64)
    gt = np.asarray(g_tout, dtype=np.float64)
    grads = [None] * len(cache.layers)
    for l in range(len(cache.layers) - 1, -1, -1):
        W, _ = cache.layers[l]
        act = spec.activations[l]
        a, out, ta = cache.pres[l], cache.outs[l], cache.tpres[l]
        d1 = _dact(act, a, out)
        ga = g * d1 + gt * ta * _d2act(act, a, out)
        gta = gt * d1
        grads[l] = (cache.hs[l].T @ ga + cache.ts[l].T @ gta, ga.sum(axis=0))
        g = ga @ W.T
        gt = gta @ W.T
    return flatten(grads, spec), g, gt
