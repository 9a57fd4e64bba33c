"""Dense feed-forward networks with hand-written reverse mode and Adam.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of shape
``(N, fan_in)`` maps through ``x @ W + b``. Every routine also accepts a single
1-D input vector.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import jsonio
from .errors import DimensionMismatch, InvalidInput, NonFiniteActivation, ShapeMismatch, TapeMismatch

FORMAT_VERSION = 1
LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "tanh", "identity")


def activate(tag, a):
    if tag == "leaky_relu":
        return np.where(a > 0, a, LEAKY_SLOPE * a)
    if tag == "tanh":
        return np.tanh(a)
    if tag == "identity":
        return a
    raise InvalidInput(f"unknown activation {tag!r}")


def activate_grad(tag, a, out):
    """Derivative of the activation at pre-activation ``a`` (``out`` = activate(a))."""
    if tag == "leaky_relu":
        return np.where(a > 0, 1.0, LEAKY_SLOPE)
    if tag == "tanh":
        return 1.0 - out * out
    if tag == "identity":
        return np.ones_like(a)
    raise InvalidInput(f"unknown activation {tag!r}")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeMismatch("bias length must equal the weight matrix fan-out")
        if self.activation not in ACTIVATIONS:
            raise InvalidInput(f"unknown activation {self.activation!r}")


@dataclass
class Mlp:
    layers: List[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise ShapeMismatch("consecutive layer dimensions do not chain")

    @property
    def in_dim(self):
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].W.shape[1]

    def parameters(self):
        """Parameter arrays in a fixed order; the arrays are live references."""
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "dims": [self.in_dim] + [l.W.shape[1] for l in self.layers],
            "activations": [l.activation for l in self.layers],
            "weights": [l.W.ravel().tolist() for l in self.layers],
            "biases": [l.b.tolist() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        if int(d.get("format_version", -1)) != FORMAT_VERSION:
            raise InvalidInput(f"unsupported network format version {d.get('format_version')}")
        dims = d["dims"]
        layers = []
        for i, act in enumerate(d["activations"]):
            W = np.asarray(d["weights"][i], float).reshape(dims[i], dims[i + 1])
            layers.append(Layer(W, np.asarray(d["biases"][i], float), act))
        return cls(layers)

    def save(self, path):
        jsonio.dump(self.to_dict(), path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(jsonio.load(path))


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng, zero_last=False):
    """Glorot-uniform weights, zero biases; optionally a zeroed output layer."""
    if len(activations) != len(sizes) - 1:
        raise InvalidInput("need one activation per layer")
    layers = []
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            W = np.zeros((fi, fo))
        else:
            lim = np.sqrt(6.0 / (fi + fo))
            W = rng.uniform(-lim, lim, size=(fi, fo))
        layers.append(Layer(W, np.zeros(fo), activations[i]))
    return Mlp(layers)


@dataclass
class Tape:
    net_id: int
    single: bool
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activations
    out: list = field(default_factory=list)  # post-activations


def mlp_forward(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None] if single else x
    if h.shape[-1] != net.in_dim:
        raise DimensionMismatch(f"network expects input dimension {net.in_dim}, got {h.shape[-1]}")
    tape = Tape(id(net), single)
    for layer in net.layers:
        tape.inputs.append(h)
        a = h @ layer.W + layer.b
        h = activate(layer.activation, a)
        tape.pre.append(a)
        tape.out.append(h)
    if not np.all(np.isfinite(h)):
        raise NonFiniteActivation("non-finite network output")
    return (h[0] if single else h), tape


def mlp_backward(net: Mlp, tape: Tape, upstream):
    """Gradients of sum_n <upstream_n, y_n> w.r.t. every parameter and the input.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
    ``net.parameters()``.
    """
    if tape.net_id != id(net) or len(tape.pre) != len(net.layers):
        raise TapeMismatch("tape was not produced by this network")
    g = np.asarray(upstream, dtype=float)
    if tape.single:
        g = g[None]
    if g.shape != tape.out[-1].shape:
        raise TapeMismatch(f"upstream shape {g.shape} does not match output {tape.out[-1].shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = g * activate_grad(layer.activation, tape.pre[i], tape.out[i])
        grads[2 * i] = tape.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.W.T
    return grads, (g[0] if tape.single else g)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr=1e-3):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and Adam moments must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape mismatch {p.shape} vs {np.shape(g)}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(net: Mlp, x, h=1e-5, upstream=None, max_per_array: Optional[int] = None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    The scalar checked is ``<upstream, net(x)>`` (upstream defaults to ones).
    The difference quotients are evaluated in extended precision so round-off
    does not swamp parameters whose gradient is itself tiny. With
    ``max_per_array`` set, only that many randomly chosen entries of each
    parameter array are probed.
    """
    if h <= 0:
        raise InvalidInput("finite-difference step must be positive")
    x = np.asarray(x, float)
    y, tape = mlp_forward(net, x)
    u = np.ones_like(y) if upstream is None else np.asarray(upstream, float)
    grads, _ = mlp_backward(net, tape, u)
    rng = rng or np.random.default_rng(0)

    ext = np.longdouble
    params = [p.astype(ext) for p in net.parameters()]
    xe, ue = x.astype(ext), u.astype(ext)
    acts = [l.activation for l in net.layers]

    def f():
        hid = xe
        for i, act in enumerate(acts):
            a = hid @ params[2 * i] + params[2 * i + 1]
            hid = np.tanh(a) if act == "tanh" else activate(act, a)
        return np.sum(ue * hid)

    worst = 0.0
    for p, g in zip(params, grads):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        idx = np.arange(flat_p.size)
        if max_per_array is not None and idx.size > max_per_array:
            idx = rng.choice(idx.size, size=max_per_array, replace=False)
        for j in idx:
            old = flat_p[j]
            flat_p[j] = old + ext(h)
            fp = f()
            flat_p[j] = old - ext(h)
            fm = f()
            flat_p[j] = old
            fd = float((fp - fm) / (2 * ext(h)))
            worst = max(worst, abs(flat_g[j] - fd) / (abs(flat_g[j]) + 1e-12))
    return worst
