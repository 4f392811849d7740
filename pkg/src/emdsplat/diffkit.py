"""Small from-scratch differentiation toolkit: MLPs with manual backprop,
an Adam optimizer, and a central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, NumericError, ShapeError

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre, post: 1.0 - post * post),
    "identity": (lambda x: x, lambda pre, post: np.ones_like(pre)),
}


@dataclass
class MlpParams:
    """Weights ``(out, in)`` and biases per layer; activation after every layer but the last."""

    weights: list
    biases: list
    activation: str = "tanh"
    zero_init_last: bool = False

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: bias {b.shape} incompatible with weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous emits {self.weights[i - 1].shape[0]}")

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, sizes, rng, activation="tanh", zero_last=True, dtype=np.float64):
        """Xavier-uniform hidden layers; last layer zeroed when ``zero_last``."""
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((n_out, n_in))
            else:
                bound = np.sqrt(6.0 / (n_in + n_out))
                w = rng.uniform(-bound, bound, size=(n_out, n_in))
            weights.append(w.astype(dtype))
            biases.append(np.zeros(n_out, dtype=dtype))
        return cls(weights, biases, activation, zero_last)

    def named_arrays(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation, self.zero_init_last)


@dataclass
class MlpCache:
    inputs: list
    outputs: list
    params_id: int = 0


def mlp_forward(params: MlpParams, x):
    """Run the network on ``x`` (a vector or a ``(B, in)`` batch)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None] if single else x
    if h.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"input width {h.shape[1]} != first layer width {params.weights[0].shape[1]}")
    act = _ACTIVATIONS[params.activation][0]
    inputs, outputs = [], []
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        pre = h @ w.T.astype(np.float64) + b
        h = pre if i == n - 1 else act(pre)
        outputs.append(h)
    cache = MlpCache(inputs, outputs, id(params))
    return (h[0] if single else h), cache


def mlp_backward(params: MlpParams, cache: MlpCache, d_out):
    """Reverse-mode gradients; returns ``(d_weights, d_biases, d_input)``."""
    if cache.params_id != id(params) or len(cache.inputs) != len(params.weights):
        raise ConsistencyError("cache does not belong to these parameters")
    d_out = np.asarray(d_out, dtype=np.float64)
    single = d_out.ndim == 1
    g = d_out[None] if single else d_out
    if g.shape != cache.outputs[-1].shape:
        raise ConsistencyError(f"d_out shape {g.shape} does not match cached output {cache.outputs[-1].shape}")
    deriv = _ACTIVATIONS[params.activation][1]
    n = len(params.weights)
    d_w = [None] * n
    d_b = [None] * n
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            g = g * deriv(None, cache.outputs[i])
        d_w[i] = g.T @ cache.inputs[i]
        d_b[i] = g.sum(axis=0)
        g = g @ params.weights[i].astype(np.float64)
    return d_w, d_b, (g[0] if single else g)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                              {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def optimizer_step(state: OptimizerState, params: dict, grads: dict):
    """One bias-corrected Adam update. Inputs are left untouched.

    Moments and parameters keep their storage dtype; the arithmetic is float64.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name!r}", tensor=name)
        if name in params and np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {np.shape(params[name])}")
    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = dict(params), {}, {}
    for name, p in params.items():
        if name not in grads:
            if name in state.m:
                new_m[name], new_v[name] = state.m[name], state.v[name]
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        m0 = state.m.get(name)
        v0 = state.v.get(name)
        m = state.beta1 * (0.0 if m0 is None else m0.astype(np.float64)) + (1.0 - state.beta1) * g
        v = state.beta2 * (0.0 if v0 is None else v0.astype(np.float64)) + (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = (p.astype(np.float64) - update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, OptimizerState(state.lr, state.beta1, state.beta2, state.eps, step, new_m, new_v)


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst: tuple
    per_tensor: dict
    checked: int

    def __str__(self):
        name, idx, analytic, numeric = self.worst
        return (f"max rel err {self.max_rel_error:.3e} at {name}{list(idx)} "
                f"(analytic {analytic:.6e}, numeric {numeric:.6e}) over {self.checked} coords")


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(f, params: dict, analytic: dict, h=1e-4, floor=1e-6, indices=None):
    """Compare ``analytic`` gradients of scalar ``f(params)`` against central differences.

    ``params`` arrays are perturbed in place and restored. ``indices`` optionally
    maps a tensor name to the subset of flat indices to check. Relative error
    uses ``max(|a|, |n|, floor)`` as denominator.
    """
    per_tensor = {}
    worst = (None, (), 0.0, 0.0)
    max_err = -1.0
    checked = 0
    for name, arr in params.items():
        grad = np.asarray(analytic[name])
        flat_idx = range(arr.size) if indices is None or name not in indices else indices[name]
        tensor_max = 0.0
        for flat in flat_idx:
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            fp = f(params)
            arr[idx] = old - h
            fm = f(params)
            arr[idx] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"f is non-finite when perturbing {name}{list(idx)}", tensor=name, index=idx)
            numeric = (fp - fm) / (2.0 * h)
            a = float(grad[idx])
            err = relative_error(a, numeric, floor)
            checked += 1
            tensor_max = max(tensor_max, err)
            if err > max_err:
                max_err = err
                worst = (name, tuple(int(i) for i in idx), a, numeric)
        per_tensor[name] = tensor_max
    return FiniteDiffReport(max(max_err, 0.0), worst, per_tensor, checked)
