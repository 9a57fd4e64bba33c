"""Real NVP flow built from affine coupling layers.

Each layer copies its pass-through coordinates and maps the remaining ones as
``y = x * exp(alpha(x_pass)) + mu(x_pass)``. The forward direction goes from
data to the standard-normal latent; sampling uses the exact algebraic inverse.
"""

import copy
import logging
import os
from dataclasses import dataclass
from typing import List

import numpy as np

from . import jsonio
from .errors import DimensionMismatch, DivergedLoss, EmptyData, InvalidInput, NonFinite
from .nn import LEAKY_SLOPE, AdamState, Mlp, adam_step, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_2PI = np.log(2.0 * np.pi)
EVAL_CHUNK = 8192


@dataclass
class CouplingLayer:
    mask: np.ndarray  # 1 = pass-through, 0 = transformed
    scale_net: Mlp
    shift_net: Mlp
    clamp: float = 5.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=int)
        if self.mask.min() != 0 or self.mask.max() != 1:
            raise InvalidInput("mask needs at least one pass-through and one transformed coordinate")
        self.pass_idx = np.flatnonzero(self.mask == 1)
        self.trans_idx = np.flatnonzero(self.mask == 0)
        for net in (self.scale_net, self.shift_net):
            if net.in_dim != self.pass_idx.size or net.out_dim != self.trans_idx.size:
                raise DimensionMismatch("coupling network shapes do not match the mask split")

    def parameters(self):
        return self.scale_net.parameters() + self.shift_net.parameters()


@dataclass
class Flow:
    layers: List[CouplingLayer]
    dim: int

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    clamp: float = 5.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.clamp <= 0:
            raise InvalidInput("TrainConfig values must be positive")


def cycling_masks(dim, n_layers):
    """One transformed coordinate per layer, cycling 0, 1, ..., dim-1, 0, ..."""
    if dim < 2:
        raise InvalidInput("a coupling flow needs dimension >= 2")
    masks = []
    for k in range(n_layers):
        m = np.ones(dim, dtype=int)
        m[k % dim] = 0
        masks.append(m)
    return masks


def make_flow(dim, n_layers=8, hidden=(512, 512), activations=("leaky_relu", "tanh"), seed=0, clamp=5.0,
              masks=None):
    """Fresh flow whose coupling layers all start as the identity map."""
    rng = np.random.default_rng(seed)
    masks = cycling_masks(dim, n_layers) if masks is None else masks
    acts = list(activations) + ["identity"]
    layers = []
    for m in masks:
        m = np.asarray(m, int)
        n_in, n_out = int(m.sum()), int((m == 0).sum())
        sizes = [n_in, *hidden, n_out]
        layers.append(CouplingLayer(
            m,
            init_mlp(sizes, acts, rng, zero_last=True),
            init_mlp(sizes, acts, rng, zero_last=True),
            clamp,
        ))
    return Flow(layers, dim)


def _soft_clamp(raw, c):
    t = np.tanh(raw / c)
    return c * t, 1.0 - t * t


def coupling_forward(layer: CouplingLayer, x, _keep=False):
    """Returns ``(y, logdet)``; logdet is the sum of the clamped log-scales."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    xp = xb[:, layer.pass_idx]
    raw, tape_a = mlp_forward(layer.scale_net, xp)
    mu, tape_m = mlp_forward(layer.shift_net, xp)
    alpha, dalpha = _soft_clamp(raw, layer.clamp)
    e = np.exp(alpha)
    y = xb.copy()
    y[:, layer.trans_idx] = xb[:, layer.trans_idx] * e + mu
    logdet = alpha.sum(axis=1)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(logdet))):
        raise NonFinite("non-finite coupling output")
    if _keep:
        return y, logdet, (xb, e, dalpha, tape_a, tape_m)
    return (y[0], float(logdet[0])) if single else (y, logdet)


def coupling_inverse(layer: CouplingLayer, y):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    yb = y[None] if single else y
    yp = yb[:, layer.pass_idx]
    raw, _ = mlp_forward(layer.scale_net, yp)
    mu, _ = mlp_forward(layer.shift_net, yp)
    alpha, _ = _soft_clamp(raw, layer.clamp)
    x = yb.copy()
    x[:, layer.trans_idx] = (yb[:, layer.trans_idx] - mu) * np.exp(-alpha)
    if not np.all(np.isfinite(x)):
        raise NonFinite("non-finite coupling inverse")
    return x[0] if single else x


def flow_forward(flow: Flow, x):
    """Data -> latent. Returns ``(z, total_logdet)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != flow.dim:
        raise DimensionMismatch(f"flow dimension is {flow.dim}, got {x.shape[-1]}")
    single = x.ndim == 1
    h = x[None] if single else x
    total = np.zeros(h.shape[0])
    for layer in flow.layers:
        h, ld = coupling_forward(layer, h)
        total += ld
    return (h[0], float(total[0])) if single else (h, total)


def flow_inverse(flow: Flow, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != flow.dim:
        raise DimensionMismatch(f"flow dimension is {flow.dim}, got {z.shape[-1]}")
    h = z
    for layer in reversed(flow.layers):
        h = coupling_inverse(layer, h)
    return h


def standard_normal_log_pdf(z):
    z = np.asarray(z, float)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def flow_log_pdf(flow: Flow, x):
    """log q(x) = log N(F(x); 0, I) + sum of layer log-determinants."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        z, ld = flow_forward(flow, x)
        return float(standard_normal_log_pdf(z) + ld)
    out = np.empty(x.shape[0])
    for i in range(0, x.shape[0], EVAL_CHUNK):
        z, ld = flow_forward(flow, x[i:i + EVAL_CHUNK])
        out[i:i + EVAL_CHUNK] = standard_normal_log_pdf(z) + ld
    return out


def flow_sample(flow: Flow, rng, size=None):
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, flow.dim))
    x = flow_inverse(flow, z)
    return x[0] if size is None else x


def weighted_nll_and_grad(flow: Flow, x, w, normalizer=None):
    """Batch loss ``sum_n w_n * NLL(x_n) / normalizer`` and its parameter gradient.

    ``normalizer`` defaults to the batch size (gradient averaged over the batch).
    Gradients are aligned with ``flow.parameters()``.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    B = x.shape[0]
    norm = float(B if normalizer is None else normalizer)
    h = x
    total = np.zeros(B)
    caches = []
    for layer in flow.layers:
        h, ld, cache = coupling_forward(layer, h, _keep=True)
        total += ld
        caches.append(cache)
    z = h
    nll = 0.5 * np.sum(z * z, axis=1) + 0.5 * flow.dim * LOG_2PI - total
    loss = float(np.sum(w * nll) / norm)

    g = (w / norm)[:, None] * z  # d loss / d z
    g_ld = -(w / norm)  # d loss / d logdet of every layer
    grads_rev = []
    for layer, (xb, e, dalpha, tape_a, tape_m) in zip(reversed(flow.layers), reversed(caches)):
        gy_t = g[:, layer.trans_idx]
        gx = g.copy()
        gx[:, layer.trans_idx] = gy_t * e
        g_alpha = gy_t * xb[:, layer.trans_idx] * e + g_ld[:, None]
        ga, dxa = mlp_backward(layer.scale_net, tape_a, g_alpha * dalpha)
        gm, dxm = mlp_backward(layer.shift_net, tape_m, gy_t)
        gx[:, layer.pass_idx] += dxa + dxm
        grads_rev.append(ga + gm)
        g = gx
    grads = []
    for gl in reversed(grads_rev):
        grads.extend(gl)
    return loss, grads


def _weighted_nll_ext(flow: Flow, params, x, w):
    """Extended-precision forward of the weighted loss for ``params`` laid out as ``flow.parameters()``."""
    h = x
    total = np.zeros(x.shape[0], dtype=x.dtype)
    k = 0
    for layer in flow.layers:
        outs = []
        for net in (layer.scale_net, layer.shift_net):
            a = h[:, layer.pass_idx]
            for lyr in net.layers:
                a = a @ params[k] + params[k + 1]
                k += 2
                if lyr.activation == "tanh":
                    a = np.tanh(a)
                elif lyr.activation == "leaky_relu":
                    a = np.where(a > 0, a, LEAKY_SLOPE * a)
            outs.append(a)
        alpha = layer.clamp * np.tanh(outs[0] / layer.clamp)
        h = h.copy()
        h[:, layer.trans_idx] = h[:, layer.trans_idx] * np.exp(alpha) + outs[1]
        total += alpha.sum(axis=1)
    nll = 0.5 * np.sum(h * h, axis=1) + 0.5 * flow.dim * np.log(2 * np.pi * np.ones((), x.dtype)) - total
    return np.sum(w * nll) / x.shape[0]


def flow_grad_check(flow: Flow, x, w, h=1e-5):
    """Max relative error of :func:`weighted_nll_and_grad` against central differences.

    Every parameter entry is probed, with the difference quotients evaluated
    in extended precision (see :func:`rareflow.nn.grad_check`). Meant for
    small flows.
    """
    _, grads = weighted_nll_and_grad(flow, x, w)
    ext = np.longdouble
    params = [p.astype(ext) for p in flow.parameters()]
    xe, we = np.asarray(x, float).astype(ext), np.asarray(w, float).astype(ext)
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for j in range(flat_p.size):
            old = flat_p[j]
            flat_p[j] = old + ext(h)
            fp = _weighted_nll_ext(flow, params, xe, we)
            flat_p[j] = old - ext(h)
            fm = _weighted_nll_ext(flow, params, xe, we)
            flat_p[j] = old
            fd = float((fp - fm) / (2 * ext(h)))
            worst = max(worst, abs(flat_g[j] - fd) / (abs(flat_g[j]) + 1e-12))
    return worst


def train_flow(flow: Flow, samples, weights, cfg: TrainConfig = TrainConfig()):
    """Minimise the risk-weighted negative log-likelihood with Adam.

    Returns ``(trained_flow, loss_trace)``; the input flow is left untouched.
    ``loss_trace[e]`` is the sample-mean weighted NLL over epoch ``e``.
    """
    x = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    if x.shape[0] == 0:
        raise EmptyData("no training samples")
    if x.shape[0] != w.shape[0]:
        raise InvalidInput("samples and weights must have equal length")
    if np.any(w <= 0) or np.any(w > 1):
        raise InvalidInput("weights must lie in (0, 1]")
    if x.shape[1] != flow.dim:
        raise DimensionMismatch(f"flow dimension is {flow.dim}, got {x.shape[1]}")
    flow = copy.deepcopy(flow)
    for layer in flow.layers:
        layer.clamp = cfg.clamp
    rng = np.random.default_rng(cfg.seed)
    params = flow.parameters()
    state = AdamState.for_params(params)
    trace = []
    N = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        acc = 0.0
        for i in range(0, N, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            try:
                loss, grads = weighted_nll_and_grad(flow, x[idx], w[idx])
            except NonFinite as exc:
                raise DivergedLoss(f"non-finite values at epoch {epoch}: {exc}", epoch) from exc
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergedLoss(f"loss diverged at epoch {epoch}", epoch)
            adam_step(params, grads, state, cfg.lr)
            acc += loss * idx.size
        trace.append(acc / N)
        log.info("epoch %d loss %.6f", epoch, trace[-1])
    return flow, trace


# ---------------------------------------------------------------- persistence

def save_flow(flow: Flow, path):
    """Write ``path`` plus one network file per coupling net in ``<stem>.nets/``."""
    path = os.fspath(path)
    stem = os.path.splitext(os.path.basename(path))[0]
    net_dir = os.path.join(os.path.dirname(path) or ".", stem + ".nets")
    os.makedirs(net_dir, exist_ok=True)
    entries = []
    for i, layer in enumerate(flow.layers):
        names = {}
        for kind, net in (("scale", layer.scale_net), ("shift", layer.shift_net)):
            fname = f"layer{i:02d}_{kind}.json"
            net.save(os.path.join(net_dir, fname))
            names[kind] = os.path.join(stem + ".nets", fname)
        entries.append({"mask": layer.mask.tolist(), "clamp": layer.clamp,
                        "scale_net": names["scale"], "shift_net": names["shift"]})
    jsonio.dump({"format_version": FORMAT_VERSION, "dim": flow.dim, "layers": entries}, path)


def load_flow(path):
    d = jsonio.load(path)
    if int(d.get("format_version", -1)) != FORMAT_VERSION:
        raise InvalidInput(f"unsupported flow format version {d.get('format_version')}")
    base = os.path.dirname(os.fspath(path)) or "."
    layers = []
    for e in d["layers"]:
        layers.append(CouplingLayer(np.asarray(e["mask"], int),
                                    Mlp.load(os.path.join(base, e["scale_net"])),
                                    Mlp.load(os.path.join(base, e["shift_net"])),
                                    float(e["clamp"])))
    return Flow(layers, int(d["dim"]))
