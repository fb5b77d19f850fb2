"""Dense numerics shared by every model in the package.

Feed-forward networks carry their own reverse-mode backward pass so that
gradients can flow through chains of networks (decoder -> operator ->
encoder) without an autodiff framework. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, OptimizerError, ShapeError

EMBED_DIM = 16


def silu(x):
    """x * sigmoid(x), numerically stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return x * _sigmoid(x)


def _sigmoid(x):
    # tanh form: stable for any |x| and faster than exp-based variants
    s = np.tanh(0.5 * x)
    s += 1.0
    s *= 0.5
    return s


def _silu_grad(x, s=None):
    s = _sigmoid(x) if s is None else s
    return s * (1.0 + x * (1.0 - s))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))


def sinusoidal_embedding(values, dim: int = EMBED_DIM) -> np.ndarray:
    """Sin/cos features of a scalar per row; returns shape (len(values), dim).

    Frequencies run geometrically from 1 to 32 so inputs of order one are resolved.
    """
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = 32.0 ** (np.arange(half) / max(half - 1, 1))
    args = values[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``, optionally on an independent substream.

    ``make_rng(seed, i)`` is the same stream whether it is created serially
    or from a worker thread, which is what keeps parallel work reproducible.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Mlp:
    """SiLU feed-forward net; weights are stored (out, in).

    ``embed_dim`` columns of the first layer read a conditioning vector that
    is concatenated after the state input.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embed_dim: int = 0

    def __post_init__(self):
        if not self.weights:
            raise ShapeError("an Mlp needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases differ in length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")
        if self.embed_dim < 0 or self.embed_dim > self.weights[0].shape[1]:
            raise ShapeError("embed_dim exceeds first-layer width")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, embed_dim: int = 0) -> "Mlp":
        """He-normal weights, zero biases. ``sizes[0]`` excludes the embedding."""
        sizes = list(sizes)
        widths = [sizes[0] + embed_dim] + sizes[1:]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, embed_dim)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1] - self.embed_dim

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self, prefix: str = "") -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"{prefix}layer{i}.weight", f"{prefix}layer{i}.bias"]
        return names

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return dict(zip(self.param_names(prefix + "."), self.params()))

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str, embed_dim: int) -> "Mlp":
        weights, biases = [], []
        while f"{prefix}.layer{len(weights)}.weight" in arrays:
            i = len(weights)
            weights.append(np.array(arrays[f"{prefix}.layer{i}.weight"]))
            biases.append(np.array(arrays[f"{prefix}.layer{i}.bias"]))
        return cls(weights, biases, embed_dim)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.embed_dim)


def _join_input(net: Mlp, x, embed):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if embed is None:
        e = np.zeros((x2.shape[0], 0))
    else:
        e = np.asarray(embed, dtype=np.float64)
        if e.ndim == 1:
            e = np.broadcast_to(e, (x2.shape[0], e.shape[0]))
        elif e.shape[0] != x2.shape[0]:
            raise ShapeError(f"embed rows {e.shape[0]} != input rows {x2.shape[0]}")
    if x2.shape[1] != net.in_dim or e.shape[1] != net.embed_dim:
        raise ShapeError(f"input {x2.shape[1]} + embed {e.shape[1]} does not match "
                         f"net widths {net.in_dim} + {net.embed_dim}")
    return (np.concatenate([x2, e], axis=1) if e.shape[1] else x2), single


def mlp_forward(net: Mlp, x, embed=None, cache: list | None = None) -> np.ndarray:
    """Evaluate ``net`` on one vector or a batch of rows.

    When ``cache`` is a list it receives the per-layer activations needed by
    ``mlp_backward``.
    """
    h, single = _join_input(net, x, embed)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w.T + b
        s = None if i == last else _sigmoid(a)
        if cache is not None:
            cache.append((h, a, s))
        h = a if i == last else a * s
    return h[0] if single else h


def mlp_backward(net: Mlp, x, embed, output_grad, cache: list | None = None):
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    ``net.params()`` and ``input_grad`` covering the state input only.
    The forward pass is recomputed unless a cache from ``mlp_forward`` is given.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    if g.shape[1] != net.out_dim:
        raise ShapeError(f"output_grad width {g.shape[1]} != net output {net.out_dim}")
    if cache is None:
        cache = []
        mlp_forward(net, x, embed, cache=cache)
    if cache[0][0].shape[0] != g.shape[0]:
        raise ShapeError("output_grad rows do not match the forward batch")
    grads = [None] * (2 * len(net.weights))
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        h_in, a, s = cache[i]
        if i != last:
            g = g * _silu_grad(a, s)
        grads[2 * i] = g.T @ h_in
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i]
    input_grad = g[:, :net.in_dim]
    return grads, (input_grad[0] if single else input_grad)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list[str] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, names=None, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   names=list(names) if names else [], **kw)


def adam_to_arrays(state: AdamState, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}.step_count": np.array(float(state.step_count))}
    for i, (m, v) in enumerate(zip(state.first_moment, state.second_moment)):
        out[f"{prefix}.m{i}"] = m
        out[f"{prefix}.v{i}"] = v
    return out


def adam_from_arrays(arrays, prefix: str, names=None) -> AdamState:
    m, v = [], []
    while f"{prefix}.m{len(m)}" in arrays:
        m.append(np.array(arrays[f"{prefix}.m{len(m)}"]))
        v.append(np.array(arrays[f"{prefix}.v{len(v)}"]))
    return AdamState(m, v, int(arrays[f"{prefix}.step_count"]), names=list(names or []))


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update applied in place; returns (params, state)."""
    if lr <= 0:
        raise OptimizerError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("params, grads and optimizer state differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} shape {g.shape} != param {params[i].shape}")
        if not np.all(np.isfinite(g)):
            name = state.names[i] if i < len(state.names) else f"param[{i}]"
            raise OptimizerError(f"non-finite gradient for {name}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def lstsq(A, B, ridge: float = 1e-10) -> np.ndarray:
    """Ridge-damped least squares, argmin ||AX - B||^2 + ridge ||X||^2.

    Solved through an SVD of ``A`` so that ill-conditioned feature matrices
    keep their accuracy; ``ridge=0`` gives the minimum-norm solution and
    refuses rank-deficient ``A``.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    if A.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ShapeError(f"lstsq: A {A.shape} and B {B.shape} row counts differ")
    if ridge < 0:
        raise ConditioningError("ridge must be non-negative")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if ridge == 0:
        tol = s.max(initial=0.0) * max(A.shape) * np.finfo(float).eps
        if s.size == 0 or s.min() <= tol:
            raise ConditioningError("lstsq: A is rank deficient and no ridge damping was given")
        filt = 1.0 / s
    else:
        filt = s / (s * s + ridge)
    X = Vt.T @ (filt[:, None] * (U.T @ B))
    return X[:, 0] if vec else X
