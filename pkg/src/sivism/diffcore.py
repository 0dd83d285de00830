"""Fixed-topology MLPs with hand-written backward passes, plus Adam/RMSProp.

Parameters live in one flat float64 vector.  The layout is, layer by layer,
the weight matrix of shape (fan_in, fan_out) in row-major order followed by
its bias vector.  Every forward/backward accepts either one input vector or
a batch of row vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when an array does not match the width an MLP expects."""

    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected width {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class NonFiniteError(FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple
    hidden_activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def in_width(self):
        return self.layer_widths[0]

    @property
    def out_width(self):
        return self.layer_widths[-1]

    @property
    def n_params(self):
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths),
                "hidden_activation": self.hidden_activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_widths"]), d.get("hidden_activation", "relu"))


def unpack(spec, params):
    """Return [(W, b), ...] as views into the flat parameter vector."""
    params = np.asarray(params)
    if params.shape != (spec.n_params,):
        raise ShapeError("parameter vector", spec.n_params, params.shape)
    layers = []
    off = 0
    w = spec.layer_widths
    for i in range(len(w) - 1):
        n_in, n_out = w[i], w[i + 1]
        W = params[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        layers.append((W, b))
    return layers


def init_params(spec, rng):
    """Glorot-uniform weights, zero biases."""
    parts = []
    w = spec.layer_widths
    for i in range(len(w) - 1):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        parts.append(rng.uniform(-limit, limit, size=w[i] * w[i + 1]))
        parts.append(np.zeros(w[i + 1]))
    return np.concatenate(parts)


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _act_grad(name, a, h):
    if name == "relu":
        # subgradient at exactly 0 is taken as 0
        return (a > 0.0).astype(a.dtype)
    return 1.0 - h * h


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.in_width:
        raise ShapeError("MLP input", spec.in_width, x.shape[-1] if x.ndim else x.shape)
    return X, single


def forward_cached(spec, params, x):
    """Forward pass keeping what the backward pass needs.

    Returns (output batch, cache).  Output is always 2-D here.
    """
    X, _ = _as_batch(spec, x)
    layers = unpack(spec, params)
    inputs = [X]
    pre = []
    h = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        a = h @ W + b
        if i < last:
            pre.append(a)
            h = _act(spec.hidden_activation, a)
            inputs.append(h)
        else:
            h = a
    return h, (layers, inputs, pre)


def mlp_forward(spec, params, x):
    out, _ = forward_cached(spec, params, x)
    return out[0] if np.asarray(x).ndim == 1 else out


def backward_cached(spec, cache, cotangent, need_params=True):
    """Vector-Jacobian product given a cache from forward_cached.

    `cotangent` has one row per input row.  Parameter gradients are summed
    over the batch; input gradients are returned per row.
    """
    layers, inputs, pre = cache
    G = np.asarray(cotangent, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape != (inputs[0].shape[0], spec.out_width):
        raise ShapeError("cotangent", spec.out_width, G.shape)
    grads = [None] * (2 * len(layers))
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if need_params:
            grads[2 * i] = (inputs[i].T @ G).ravel()
            grads[2 * i + 1] = G.sum(axis=0)
        G = G @ W.T
        if i > 0:
            G = G * _act_grad(spec.hidden_activation, pre[i - 1], inputs[i])
            if not np.all(np.isfinite(G)):
                raise NonFiniteError("non-finite gradient", layer=i)
    grad_params = np.concatenate(grads) if need_params else None
    return grad_params, G


def mlp_vjp(spec, params, x, cotangent):
    """(d(c.f)/dparams, d(c.f)/dx) for input x and cotangent c."""
    single = np.asarray(x).ndim == 1
    _, cache = forward_cached(spec, params, x)
    gp, gx = backward_cached(spec, cache, cotangent)
    return gp, (gx[0] if single else gx)


def mlp_input_jacobian(spec, params, x):
    """Per-row Jacobian d f / d x with shape (n, out, in), by one VJP per output."""
    X, single = _as_batch(spec, x)
    _, cache = forward_cached(spec, params, X)
    n = X.shape[0]
    J = np.empty((n, spec.out_width, spec.in_width))
    for k in range(spec.out_width):
        C = np.zeros((n, spec.out_width))
        C[:, k] = 1.0
        _, gx = backward_cached(spec, cache, C, need_params=False)
        J[:, k, :] = gx
    return J[0] if single else J


@dataclass
class MLP:
    """An MLPSpec together with its current flat parameter vector."""

    spec: MLPSpec
    params: np.ndarray

    @classmethod
    def init(cls, widths, rng, activation="relu"):
        spec = MLPSpec(tuple(widths), activation)
        return cls(spec, init_params(spec, rng))

    @classmethod
    def zeros(cls, widths, activation="relu"):
        spec = MLPSpec(tuple(widths), activation)
        return cls(spec, np.zeros(spec.n_params))

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x)

    def forward(self, x):
        return forward_cached(self.spec, self.params, x)

    def backward(self, cache, cotangent, need_params=True):
        return backward_cached(self.spec, cache, cotangent, need_params)

    def copy(self):
        return MLP(self.spec, self.params.copy())

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(MLPSpec.from_dict(d["spec"]), np.array(d["params"], dtype=np.float64))


# --- optimizers ---------------------------------------------------------------

OPTIMIZERS = ("adam", "rmsprop")


@dataclass
class OptimizerState:
    kind: str
    step_size: float
    n: int
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)

    def to_dict(self):
        return {"kind": self.kind, "step_size": self.step_size, "n": self.n,
                "beta1": self.beta1, "beta2": self.beta2, "decay": self.decay,
                "eps": self.eps, "t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["m"] = np.array(d["m"], dtype=np.float64)
        d["v"] = np.array(d["v"], dtype=np.float64)
        return cls(**d)


def make_optimizer(kind, step_size, n, **kw):
    return OptimizerState(kind=kind, step_size=float(step_size), n=int(n), **kw)


def optimizer_step(state, params, grad):
    """One descent step along `grad`.  Mutates `state`, returns new params.

    Non-finite gradients raise before anything is touched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or params.shape != (state.n,):
        raise ShapeError("gradient", state.n, grad.shape)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to optimizer")
    state.t += 1
    if state.kind == "adam":
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
        m_hat = state.m / (1.0 - state.beta1 ** state.t)
        v_hat = state.v / (1.0 - state.beta2 ** state.t)
        return params - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    state.v = state.decay * state.v + (1.0 - state.decay) * grad * grad
    return params - state.step_size * grad / (np.sqrt(state.v) + state.eps)
