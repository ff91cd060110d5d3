"""Dense-network substrate: flat-parameter MLPs with hand-rolled reverse-mode
gradients, plus the AdamW update rule.

Everything is float64 and functional: forward/backward never mutate inputs,
and the optimizer returns a fresh parameter vector. Parameters live in a
single flat array laid out layer-major (weight matrix row-major, then bias,
for each layer in order), so snapshots and parameter averaging are trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output) of a LeakyReLU MLP."""

    widths: tuple[int, ...]
    negative_slope: float = 0.01

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("all layer widths must be >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def layer_slices(self) -> list[tuple[slice, slice, int, int]]:
        """Per layer: (weight slice, bias slice, fan_in, fan_out) into the flat vector."""
        out = []
        pos = 0
        for i, o in zip(self.widths[:-1], self.widths[1:]):
            w = slice(pos, pos + o * i)
            pos += o * i
            b = slice(pos, pos + o)
            pos += o
            out.append((w, b, i, o))
        return out


def mlp_init(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, as one flat float64 vector."""
    params = np.zeros(spec.n_params)
    for w, b, fan_in, fan_out in spec.layer_slices():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[w] = rng.uniform(-bound, bound, size=fan_out * fan_in)
        params[b] = 0.0
    return params


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Evaluate the network; returns (output, cache) with cache reusable by
    :func:`mlp_backward`. Accepts a single input vector or a (batch, in) matrix.
    """
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
    single = x.ndim == 1
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {h.shape[1]} != spec input {spec.widths[0]}")
    slices = spec.layer_slices()
    inputs = []  # per-layer input activations
    preacts = []  # per-layer pre-activations (None for the final linear layer)
    for li, (w, b, fan_in, fan_out) in enumerate(slices):
        W = params[w].reshape(fan_out, fan_in)
        inputs.append(h)
        z = h @ W.T + params[b]
        if li < len(slices) - 1:
            preacts.append(z)
            h = np.where(z > 0, z, spec.negative_slope * z)
        else:
            preacts.append(None)
            h = z
    cache = (inputs, preacts)
    return (h[0] if single else h), cache


def mlp_backward(spec: MlpSpec, params: np.ndarray, cache, dout: np.ndarray):
    """Reverse accumulation through the cached forward pass.

    Returns (flat parameter gradient, input gradient). `dout` must match the
    shape the forward call produced.
    """
    inputs, preacts = cache
    single = dout.ndim == 1
    g = np.atleast_2d(np.asarray(dout, dtype=np.float64))
    if g.shape[0] != inputs[0].shape[0]:
        raise ValueError("gradient batch does not match cached forward batch")
    slices = spec.layer_slices()
    if g.shape[1] != spec.widths[-1]:
        raise ValueError("gradient width does not match network output")
    grad = np.zeros(spec.n_params)
    for li in reversed(range(len(slices))):
        w, b, fan_in, fan_out = slices[li]
        if preacts[li] is not None:
            z = preacts[li]
            g = g * np.where(z > 0, 1.0, spec.negative_slope)
        h = inputs[li]
        grad[w] = (g.T @ h).ravel()
        grad[b] = g.sum(axis=0)
        W = params[w].reshape(fan_out, fan_in)
        g = g @ W
    return grad, (g[0] if single else g)


@dataclass
class ParamGroup:
    """A contiguous slice of the flat parameter vector with its own settings."""

    name: str
    size: int
    lr: float | None = None  # None -> optimizer default
    weight_decay: float | None = None  # None -> optimizer default


@dataclass
class AdamWState:
    """Moments and hyperparameters for decoupled-weight-decay Adam."""

    groups: list[ParamGroup]
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    step: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        n = sum(g.size for g in self.groups)
        self.m = np.zeros(n)
        self.v = np.zeros(n)

    @property
    def n_params(self) -> int:
        return self.m.shape[0]

    def group_slices(self) -> list[tuple[ParamGroup, slice]]:
        out, pos = [], 0
        for g in self.groups:
            out.append((g, slice(pos, pos + g.size)))
            pos += g.size
        return out


def adamw_step(state: AdamWState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One AdamW update; mutates the moment state, returns new parameters."""
    if params.shape != (state.n_params,) or grad.shape != (state.n_params,):
        raise ValueError("parameter/gradient shape does not match optimizer state")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adamw_step")
    if state.clip_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > state.clip_norm:
            grad = grad * (state.clip_norm / norm)
    state.step += 1
    t = state.step
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1**t)
    vhat = state.v / (1 - state.beta2**t)
    new = params.copy()
    for g, sl in state.group_slices():
        lr = state.lr if g.lr is None else g.lr
        wd = state.weight_decay if g.weight_decay is None else g.weight_decay
        new[sl] -= lr * mhat[sl] / (np.sqrt(vhat[sl]) + state.eps)
        if wd:
            new[sl] -= lr * wd * params[sl]
    return new
