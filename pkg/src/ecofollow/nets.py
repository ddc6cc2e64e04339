"""Minimal MLP machinery with three gradient surfaces.

The learner needs, besides the usual parameter gradients:

* exact input gradients dV/dx (the costate estimate), and
* the parameter gradient of <c, dV/dx> for an arbitrary cotangent c,
  computed forward-over-reverse.  This is what lets the critic be trained
  on the differentiated Bellman residual, and it requires a C^2 activation,
  hence tanh by default and a hard rejection of piecewise-linear kinds.

Inputs are affinely scaled to roughly [-1, 1] before the first layer; the
scaling Jacobian is folded into the input-gradient surfaces so callers
always see derivatives in original state units.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

SMOOTH_ACTIVATIONS = ("tanh",)
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    sizes: tuple
    weights: list            # per layer, shape (out, in)
    biases: list             # per layer, shape (out,)
    activation: str = "tanh"
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        if self.activation not in SMOOTH_ACTIVATIONS:
            raise ValueError(
                f"activation {self.activation!r} is not twice-differentiable; "
                f"supported: {SMOOTH_ACTIVATIONS}")
        din = self.sizes[0]
        if self.input_offset is None:
            self.input_offset = np.zeros(din)
        if self.input_scale is None:
            self.input_scale = np.ones(din)

    @property
    def n_layers(self):
        return len(self.weights)

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        return Mlp(sizes=self.sizes,
                   weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases],
                   activation=self.activation,
                   input_offset=self.input_offset.copy(),
                   input_scale=self.input_scale.copy())


def init_mlp(sizes, rng: np.random.Generator, activation="tanh",
             input_offset=None, input_scale=None) -> Mlp:
    """Scaled-uniform fan-in initialization."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes=tuple(sizes), weights=weights, biases=biases,
               activation=activation,
               input_offset=None if input_offset is None else np.asarray(input_offset, float),
               input_scale=None if input_scale is None else np.asarray(input_scale, float))


def _as_batch(x, din):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != din:
            raise ValueError(f"input dim {x.shape[0]} != {din}")
        return x[None, :], True
    if x.shape[1] != din:
        raise ValueError(f"input dim {x.shape[1]} != {din}")
    return x, False


def forward(net: Mlp, x):
    """Forward pass; returns (y, tape).  y is squeezed for 1-D inputs."""
    x2, single = _as_batch(x, net.sizes[0])
    a = (x2 - net.input_offset) / net.input_scale
    acts = [a]
    zs = []
    for li in range(net.n_layers):
        z = a @ net.weights[li].T + net.biases[li]
        zs.append(z)
        a = np.tanh(z) if li < net.n_layers - 1 else z
        acts.append(a)
    tape = {"acts": acts, "zs": zs, "single": single}
    y = acts[-1]
    return (y[0] if single else y), tape


def grad_params(net: Mlp, tape, upstream):
    """Gradients of sum_b <upstream_b, y_b> w.r.t. every weight and bias."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.ndim == 1:
        upstream = upstream[None, :] if tape["single"] else upstream[:, None]
    acts = tape["acts"]
    if upstream.shape[0] != acts[0].shape[0]:
        raise ValueError("upstream batch does not match tape")
    grads = [None] * net.n_layers
    delta = upstream
    for li in range(net.n_layers - 1, -1, -1):
        if li < net.n_layers - 1:
            delta = delta * (1.0 - acts[li + 1] ** 2)  # tanh'
        grads[li] = (delta.T @ acts[li], delta.sum(axis=0))
        delta = delta @ net.weights[li]
    return grads


def grad_input(net: Mlp, tape):
    """Exact dy/dx in original input units; shape (B, dout, din)."""
    acts = tape["acts"]
    batch = acts[0].shape[0]
    dout = net.sizes[-1]
    g = np.broadcast_to(net.weights[-1], (batch, dout, net.sizes[-2])).copy()
    for li in range(net.n_layers - 2, -1, -1):
        sprime = 1.0 - acts[li + 1] ** 2
        g = (g * sprime[:, None, :]) @ net.weights[li]
    g = g / net.input_scale
    return g[0] if tape["single"] else g


def value_and_grad(net: Mlp, x):
    """Convenience for scalar-output nets: (values (B,), gradients (B, din))."""
    if net.sizes[-1] != 1:
        raise ValueError("value_and_grad needs a scalar output head")
    y, tape = forward(net, x)
    g = grad_input(net, tape)
    if tape["single"]:
        return float(y[0]), g[0]
    return y[:, 0], g[:, 0, :]


def grad_params_of_input_grad(net: Mlp, x, cotangent):
    """Parameter gradient of sum_b <cotangent_b, dy/dx|_{x_b}>.

    Forward-over-reverse: the forward pass carries the input tangent
    c / input_scale, whose output is exactly <c, dy/dx>; a reverse pass
    over that augmented computation yields the parameter gradients.
    Scalar output heads only.
    """
    if net.sizes[-1] != 1:
        raise ValueError("second-order pass supports scalar outputs only")
    x2, _ = _as_batch(x, net.sizes[0])
    c2, _ = _as_batch(cotangent, net.sizes[0])
    if c2.shape != x2.shape:
        raise ValueError("cotangent shape must match input shape")

    a = (x2 - net.input_offset) / net.input_scale
    t = c2 / net.input_scale
    acts, tangents, tzs, zs = [a], [t], [], []
    for li in range(net.n_layers - 1):
        z = a @ net.weights[li].T + net.biases[li]
        tz = t @ net.weights[li].T
        a = np.tanh(z)
        t = (1.0 - a ** 2) * tz
        zs.append(z)
        tzs.append(tz)
        acts.append(a)
        tangents.append(t)

    grads = [None] * net.n_layers
    # output layer: ty = t_{L-1} @ W_L^T ; upstream scalar is 1 per sample
    w_last = net.weights[-1]
    grads[-1] = (tangents[-1].sum(axis=0)[None, :], np.zeros(1))
    a_bar = np.zeros_like(acts[-1])
    t_bar = np.broadcast_to(w_last[0], tangents[-1].shape).copy()

    for li in range(net.n_layers - 2, -1, -1):
        a_l = acts[li + 1]
        sprime = 1.0 - a_l ** 2
        sdouble = -2.0 * a_l * sprime  # tanh''
        z_bar = a_bar * sprime + t_bar * sdouble * tzs[li]
        tz_bar = t_bar * sprime
        dw = z_bar.T @ acts[li] + tz_bar.T @ tangents[li]
        db = z_bar.sum(axis=0)
        grads[li] = (dw, db)
        a_bar = z_bar @ net.weights[li]
        t_bar = tz_bar @ net.weights[li]
    return grads


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    skipped: int = 0


def adam_init(net: Mlp) -> AdamState:
    return AdamState(
        m=[(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)],
        v=[(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)])


def adam_step(net: Mlp, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place Adam update (gradient-descent direction).

    Non-finite gradients skip the update (counted in state.skipped) but
    still decay the moments, keeping the trajectory deterministic.
    """
    finite = all(np.all(np.isfinite(dw)) and np.all(np.isfinite(db))
                 for dw, db in grads)
    state.t += 1
    if not finite:
        state.skipped += 1
        grads = [(np.zeros_like(dw), np.zeros_like(db)) for dw, db in grads]
    corr1 = 1.0 - beta1 ** state.t
    corr2 = 1.0 - beta2 ** state.t
    for li, (dw, db) in enumerate(grads):
        mw, mb = state.m[li]
        vw, vb = state.v[li]
        mw *= beta1; mw += (1 - beta1) * dw
        mb *= beta1; mb += (1 - beta1) * db
        vw *= beta2; vw += (1 - beta2) * dw * dw
        vb *= beta2; vb += (1 - beta2) * db * db
        if finite:
            net.weights[li] -= lr * (mw / corr1) / (np.sqrt(vw / corr2) + eps)
            net.biases[li] -= lr * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
    return finite


def polyak_update(target: Mlp, online: Mlp, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - tau
        tw += tau * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - tau
        tb += tau * ob


def save_mlp(net: Mlp, path) -> None:
    """Self-describing single-file checkpoint, bit-exact on round trip."""
    meta = {"version": CHECKPOINT_VERSION, "sizes": list(net.sizes),
            "activation": net.activation}
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
              "input_offset": net.input_offset, "input_scale": net.input_scale}
    for li in range(net.n_layers):
        arrays[f"w{li}"] = net.weights[li]
        arrays[f"b{li}"] = net.biases[li]
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_mlp(path) -> Mlp:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        sizes = tuple(meta["sizes"])
        n_layers = len(sizes) - 1
        return Mlp(sizes=sizes,
                   weights=[data[f"w{li}"].copy() for li in range(n_layers)],
                   biases=[data[f"b{li}"].copy() for li in range(n_layers)],
                   activation=meta["activation"],
                   input_offset=data["input_offset"].copy(),
                   input_scale=data["input_scale"].copy())
