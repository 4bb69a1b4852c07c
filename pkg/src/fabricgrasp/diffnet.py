"""Minimal differentiable feedforward networks on numpy.

Provides exactly the derivative surface the fabric policies need: values,
parameter gradients of upstream'f(x), input gradients of scalar nets, and the
mixed second-order quantity d/dtheta (v' d_x f) computed by
forward-over-reverse. Everything is float64 and batched internally; single
sample entry points wrap the batched kernels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .core import EPS_P, ContractError, FormatError, InvalidArgumentError

MAGIC = b"DNET1"


class Activation(str, Enum):
    ELU = "elu"
    RELU = "relu"
    LINEAR = "linear"
    POSITIVE_ELU = "positive_elu"


def _act(kind: Activation, u: np.ndarray) -> np.ndarray:
    if kind == Activation.ELU:
        return np.where(u > 0.0, u, np.expm1(np.minimum(u, 0.0)))
    if kind == Activation.RELU:
        return np.maximum(u, 0.0)
    if kind == Activation.LINEAR:
        return u
    # ELU shifted to be strictly positive for all finite preactivations.
    return np.where(u > 0.0, u, np.expm1(np.minimum(u, 0.0))) + (1.0 + EPS_P)


def _dact(kind: Activation, u: np.ndarray) -> np.ndarray:
    if kind in (Activation.ELU, Activation.POSITIVE_ELU):
        return np.where(u > 0.0, 1.0, np.exp(np.minimum(u, 0.0)))
    if kind == Activation.RELU:
        return (u > 0.0).astype(np.float64)
    return np.ones_like(u)


def _ddact(kind: Activation, u: np.ndarray) -> np.ndarray:
    if kind in (Activation.ELU, Activation.POSITIVE_ELU):
        return np.where(u > 0.0, 0.0, np.exp(np.minimum(u, 0.0)))
    return np.zeros_like(u)


@dataclass
class RffState:
    """Fixed random Fourier feature bank: phi(x) = sqrt(2/R) cos(Omega x + b).

    Omega entries are N(0, 1/sigma^2), phases uniform on [0, 2pi). The bank is
    drawn once from `seed` and never trained; serialization stores only
    (seed, sigma, count) and regenerates the bank on load.
    """

    seed: int
    sigma: float
    count: int
    omega: np.ndarray
    phase: np.ndarray

    @staticmethod
    def create(seed: int, sigma: float, count: int, n_in: int) -> "RffState":
        if sigma <= 0.0 or count < 1:
            raise InvalidArgumentError("rff needs sigma > 0 and count >= 1")
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        omega = rng.normal(0.0, 1.0 / sigma, size=(count, n_in))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return RffState(int(seed), float(sigma), int(count), omega, phase)


def rff_features(x: np.ndarray, rff: RffState) -> np.ndarray:
    """Feature map for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(2.0 / rff.count) * np.cos(rff.omega @ x + rff.phase)


class DiffNet:
    """Feedforward net with one hidden activation and one output activation.

    layer_sizes = [n_in, h_1, ..., n_out]. When an RFF bank is attached the
    first weight matrix consumes the R feature outputs instead of x itself.
    """

    def __init__(self, layer_sizes, hidden_activation, output_activation,
                 weights, biases, rff=None):
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.hidden_activation = Activation(hidden_activation)
        self.output_activation = Activation(output_activation)
        self.weights = weights
        self.biases = biases
        self.rff = rff
        self._check_shapes()

    # -- construction -------------------------------------------------------

    @staticmethod
    def create(layer_sizes, rng: np.random.Generator,
               hidden_activation=Activation.ELU,
               output_activation=Activation.LINEAR,
               rff_seed: int | None = None, rff_sigma: float = 1.0,
               rff_count: int = 1000) -> "DiffNet":
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise InvalidArgumentError(f"bad layer sizes {sizes}")
        rff = None
        fan_ins = list(sizes[:-1])
        if rff_seed is not None:
            rff = RffState.create(rff_seed, rff_sigma, rff_count, sizes[0])
            fan_ins[0] = rff.count
        weights, biases = [], []
        for fan_in, fan_out in zip(fan_ins, sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return DiffNet(sizes, hidden_activation, output_activation,
                       weights, biases, rff)

    def _check_shapes(self):
        fan = self.rff.count if self.rff is not None else self.layer_sizes[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i + 1], fan) or b.shape != (w.shape[0],):
                raise InvalidArgumentError(
                    f"layer {i}: weight {w.shape} does not chain from {fan}")
            fan = w.shape[0]
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise InvalidArgumentError("layer count mismatch")

    # -- shape info ---------------------------------------------------------

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def _activation_for(self, layer: int) -> Activation:
        last = layer == self.n_layers - 1
        return self.output_activation if last else self.hidden_activation

    # -- batched kernels ----------------------------------------------------

    def _features_batch(self, X: np.ndarray) -> np.ndarray:
        if self.rff is None:
            return X
        return np.sqrt(2.0 / self.rff.count) * np.cos(
            X @ self.rff.omega.T + self.rff.phase)

    def _feature_jvp_batch(self, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Tangent of the feature map along V, per row."""
        if self.rff is None:
            return V
        s = np.sin(X @ self.rff.omega.T + self.rff.phase)
        return -np.sqrt(2.0 / self.rff.count) * s * (V @ self.rff.omega.T)

    def _feature_vjp_batch(self, X: np.ndarray, Fbar: np.ndarray) -> np.ndarray:
        """Pull a feature cotangent back to the raw input, per row."""
        if self.rff is None:
            return Fbar
        s = np.sin(X @ self.rff.omega.T + self.rff.phase)
        return (-np.sqrt(2.0 / self.rff.count) * s * Fbar) @ self.rff.omega

    def forward_batch(self, X: np.ndarray, _cache: list | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_in:
            raise InvalidArgumentError(
                f"input width {X.shape[1]}, expected {self.n_in}")
        h = self._features_batch(X)
        if _cache is not None:
            _cache.append(h)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            u = h @ w.T + b
            h = _act(self._activation_for(i), u)
            if _cache is not None:
                _cache.append(u)
        return h

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_batch(np.asarray(x, dtype=np.float64)[None, :])[0]


@dataclass
class GradBundle:
    """Parameter gradients mirroring a DiffNet layout, plus an optional
    gradient with respect to the raw input."""

    weights: list
    biases: list
    input_grad: np.ndarray | None = None

    @staticmethod
    def zeros_like(net: DiffNet) -> "GradBundle":
        return GradBundle([np.zeros_like(w) for w in net.weights],
                          [np.zeros_like(b) for b in net.biases])

    def add_scaled(self, other: "GradBundle", scale: float = 1.0) -> "GradBundle":
        for w, ow in zip(self.weights, other.weights):
            w += scale * ow
        for b, ob in zip(self.biases, other.biases):
            b += scale * ob
        return self

    def scale(self, factor: float) -> "GradBundle":
        for w in self.weights:
            w *= factor
        for b in self.biases:
            b *= factor
        return self

    def norm(self) -> float:
        total = sum(float(np.sum(w * w)) for w in self.weights)
        total += sum(float(np.sum(b * b)) for b in self.biases)
        return float(np.sqrt(total))

    def is_finite(self) -> bool:
        return (all(np.all(np.isfinite(w)) for w in self.weights)
                and all(np.all(np.isfinite(b)) for b in self.biases))


def param_grad_batch(net: DiffNet, X: np.ndarray, upstream: np.ndarray,
                     want_input: bool = False) -> GradBundle:
    """Gradient of sum_i upstream_i' f(x_i) over all parameters.

    With want_input, also returns the per-row input gradients (B x n_in).
    The RFF bank contributes no parameter entries.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    cache: list = []
    net.forward_batch(X, _cache=cache)
    feats, us = cache[0], cache[1:]
    hs = [feats] + [_act(net._activation_for(i), u) for i, u in enumerate(us[:-1])]

    gw = [None] * net.n_layers
    gb = [None] * net.n_layers
    hbar = upstream
    for i in reversed(range(net.n_layers)):
        ubar = _dact(net._activation_for(i), us[i]) * hbar
        gw[i] = ubar.T @ hs[i]
        gb[i] = ubar.sum(axis=0)
        hbar = ubar @ net.weights[i]
    ig = net._feature_vjp_batch(X, hbar) if want_input else None
    return GradBundle(gw, gb, ig)


def param_grad(net: DiffNet, x: np.ndarray, upstream: np.ndarray,
               want_input: bool = False) -> GradBundle:
    g = param_grad_batch(net, np.asarray(x, dtype=np.float64)[None, :],
                         np.asarray(upstream, dtype=np.float64)[None, :],
                         want_input=want_input)
    if g.input_grad is not None:
        g.input_grad = g.input_grad[0]
    return g


def input_grad_batch(net: DiffNet, X: np.ndarray) -> np.ndarray:
    """Input gradients of a scalar-output net, one row per sample."""
    if net.n_out != 1:
        raise ContractError("input_grad requires a scalar output")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    ones = np.ones((X.shape[0], 1))
    cache: list = []
    net.forward_batch(X, _cache=cache)
    us = cache[1:]
    hbar = ones
    for i in reversed(range(net.n_layers)):
        ubar = _dact(net._activation_for(i), us[i]) * hbar
        hbar = ubar @ net.weights[i]
    return net._feature_vjp_batch(X, hbar)


def input_grad(net: DiffNet, x: np.ndarray) -> np.ndarray:
    return input_grad_batch(net, np.asarray(x, dtype=np.float64)[None, :])[0]


def mixed_second_order_batch(net: DiffNet, X: np.ndarray,
                             V: np.ndarray) -> GradBundle:
    """Parameter gradient of sum_i v_i' d_x f(x_i) for a scalar net.

    Forward-over-reverse: a tangent pass along v rides the forward pass, and
    one reverse sweep differentiates the resulting directional derivative with
    respect to every weight and bias.
    """
    if net.n_out != 1:
        raise ContractError("mixed_second_order requires a scalar output")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if V.shape != X.shape:
        raise InvalidArgumentError("tangent batch must match input batch")

    cache: list = []
    net.forward_batch(X, _cache=cache)
    feats, us = cache[0], cache[1:]
    hs = [feats] + [_act(net._activation_for(i), u) for i, u in enumerate(us[:-1])]

    # Forward tangent sweep: t_l tracks d/de h_l(x + e v).
    ts = [net._feature_jvp_batch(X, V)]
    tus = []
    for i in range(net.n_layers):
        tu = ts[-1] @ net.weights[i].T
        tus.append(tu)
        ts.append(_dact(net._activation_for(i), us[i]) * tu)

    # Reverse sweep over the combined (value, tangent) graph.
    gw = [None] * net.n_layers
    gb = [None] * net.n_layers
    B = X.shape[0]
    tbar = np.ones((B, 1))
    hbar = np.zeros((B, 1))
    for i in reversed(range(net.n_layers)):
        d1 = _dact(net._activation_for(i), us[i])
        d2 = _ddact(net._activation_for(i), us[i])
        tubar = d1 * tbar
        ubar = d1 * hbar + d2 * tus[i] * tbar
        gw[i] = ubar.T @ hs[i] + tubar.T @ ts[i]
        gb[i] = ubar.sum(axis=0)
        hbar = ubar @ net.weights[i]
        tbar = tubar @ net.weights[i]
    return GradBundle(gw, gb)


def mixed_second_order(net: DiffNet, x: np.ndarray, v: np.ndarray) -> GradBundle:
    return mixed_second_order_batch(net, np.asarray(x, dtype=np.float64)[None, :],
                                    np.asarray(v, dtype=np.float64)[None, :])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class SgdMomentum:
    """SGD with classical momentum over one or more nets."""

    def __init__(self, nets: list, lr: float, momentum: float = 0.9):
        if lr <= 0.0 or not 0.0 <= momentum < 1.0:
            raise InvalidArgumentError("need lr > 0 and momentum in [0, 1)")
        self.nets = nets
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.vel = [GradBundle.zeros_like(n) for n in nets]

    def step(self, grads: list):
        if len(grads) != len(self.nets):
            raise InvalidArgumentError("one gradient bundle per net")
        for net, v, g in zip(self.nets, self.vel, grads):
            for vw, gw, w in zip(v.weights, g.weights, net.weights):
                vw *= self.momentum
                vw -= self.lr * gw
                w += vw
            for vb, gb, b in zip(v.biases, g.biases, net.biases):
                vb *= self.momentum
                vb -= self.lr * gb
                b += vb


class Adam:
    """Adam (Kingma & Ba) over one or more nets, bias-corrected moments.

    The per-parameter step normalization matters here: the composite policy
    losses have gradient scales spanning several orders of magnitude across
    sub-networks and input slots, which stalls plain SGD.
    """

    def __init__(self, nets: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0 or not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise InvalidArgumentError("need lr > 0 and betas in [0, 1)")
        if eps <= 0.0:
            raise InvalidArgumentError("need eps > 0")
        self.nets = nets
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m = [GradBundle.zeros_like(n) for n in nets]
        self.v = [GradBundle.zeros_like(n) for n in nets]

    def _update(self, p, m, v, g):
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        mhat = m / (1.0 - self.beta1 ** self.t)
        vhat = v / (1.0 - self.beta2 ** self.t)
        p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def step(self, grads: list):
        if len(grads) != len(self.nets):
            raise InvalidArgumentError("one gradient bundle per net")
        self.t += 1
        for net, m, v, g in zip(self.nets, self.m, self.v, grads):
            for w, mw, vw, gw in zip(net.weights, m.weights, v.weights,
                                     g.weights):
                self._update(w, mw, vw, gw)
            for b, mb, vb, gb in zip(net.biases, m.biases, v.biases, g.biases):
                self._update(b, mb, vb, gb)


def make_optimizer(name: str, nets: list, lr: float, momentum: float = 0.9):
    """Optimizer factory for the trainers; name is 'sgd' or 'adam'."""
    if name == "sgd":
        return SgdMomentum(nets, lr, momentum)
    if name == "adam":
        return Adam(nets, lr)
    raise InvalidArgumentError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# Serialization (DNET1)
# ---------------------------------------------------------------------------

def _flatten_params(net: DiffNet) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts) if parts else np.zeros(0)


def save_net(net: DiffNet, path) -> None:
    header = {
        "layer_sizes": net.layer_sizes,
        "hidden_activation": net.hidden_activation.value,
        "output_activation": net.output_activation.value,
        "rff": None if net.rff is None else {
            "seed": net.rff.seed, "sigma": net.rff.sigma, "count": net.rff.count,
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = _flatten_params(net)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(params.astype("<f8").tobytes())


def net_to_bytes(net: DiffNet) -> bytes:
    import io
    buf = io.BytesIO()
    header = {
        "layer_sizes": net.layer_sizes,
        "hidden_activation": net.hidden_activation.value,
        "output_activation": net.output_activation.value,
        "rff": None if net.rff is None else {
            "seed": net.rff.seed, "sigma": net.rff.sigma, "count": net.rff.count,
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(_flatten_params(net).astype("<f8").tobytes())
    return buf.getvalue()


def net_from_bytes(data: bytes) -> DiffNet:
    if data[:5] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(data) < 9:
        raise FormatError("truncated header length", 5)
    (hlen,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + hlen:
        raise FormatError("truncated header", 9)
    try:
        header = json.loads(data[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("unparseable header", 9) from None
    try:
        sizes = [int(s) for s in header["layer_sizes"]]
        hidden = Activation(header["hidden_activation"])
        output = Activation(header["output_activation"])
        rff_hdr = header["rff"]
    except (KeyError, ValueError, TypeError):
        raise FormatError("invalid header fields", 9) from None
    rff = None
    if rff_hdr is not None:
        rff = RffState.create(rff_hdr["seed"], rff_hdr["sigma"],
                              rff_hdr["count"], sizes[0])
    fan = rff.count if rff is not None else sizes[0]
    shapes = []
    for out in sizes[1:]:
        shapes.append((out, fan))
        fan = out
    n_params = sum(o * i + o for o, i in shapes)
    body = data[9 + hlen:]
    if len(body) != n_params * 8:
        raise FormatError(
            f"parameter block has {len(body)} bytes, expected {n_params * 8}",
            9 + hlen)
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    weights, biases, k = [], [], 0
    for out, fin in shapes:
        weights.append(flat[k:k + out * fin].reshape(out, fin).copy())
        k += out * fin
        biases.append(flat[k:k + out].copy())
        k += out
    return DiffNet(sizes, hidden, output, weights, biases, rff)


def load_net(path) -> DiffNet:
    return net_from_bytes(Path(path).read_bytes())
