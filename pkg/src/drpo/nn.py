"""Dense two-hidden-layer perceptron with exact backprop, plus Adam.

Parameters live in one flat float64 buffer; per-layer weights and biases are
views into it. Gradients use the same layout, so an optimizer only ever sees
flat vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN = (128, 128)


class ConfigurationError(ValueError):
    """Shapes or hyperparameters that cannot work together."""


class MlpParams:
    """Weights and biases of a ReLU MLP stored in a single flat buffer.

    ``sizes`` lists the layer widths, e.g. ``(10, 128, 128, 10)``. The flat
    ordering is W0, b0, W1, b1, ..., each weight row-major with shape
    ``(fan_in, fan_out)``.
    """

    def __init__(self, sizes, flat: np.ndarray | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ConfigurationError(f"invalid layer sizes {self.sizes}")
        n = param_count(self.sizes)
        if flat is None:
            flat = np.zeros(n)
        if flat.shape != (n,) or flat.dtype != np.float64:
            raise ConfigurationError(f"flat buffer must be float64 of length {n}")
        self.flat = flat
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out))
            off += fan_in * fan_out
            self.biases.append(flat[off:off + fan_out])
            off += fan_out

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "MlpParams":
        # Glorot-uniform weights, zero biases.
        p = cls(sizes)
        for w in p.weights:
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return p

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.sizes, self.flat.copy())

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.sizes)


# Gradients share the parameter layout.
GradBundle = MlpParams


def param_count(sizes) -> int:
    sizes = tuple(sizes)
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def mlp_sizes(n_in: int, n_out: int, hidden=HIDDEN) -> tuple[int, ...]:
    return (n_in, *hidden, n_out)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise ConfigurationError(
            f"expected input of shape (batch, {params.n_in}), got {x.shape}"
        )
    return x


def forward_with_cache(params: MlpParams, x: np.ndarray):
    """Forward pass that also returns the post-activation of every layer."""
    x = _check_input(params, x)
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            np.maximum(h, 0.0, out=h)
        acts.append(h)
    return h, acts


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return forward_with_cache(params, x)[0]


def mlp_backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray,
                 cache=None, out: MlpParams | None = None) -> GradBundle:
    """Reverse-mode gradient of ``sum(upstream * mlp_forward(params, x))``.

    Pass the ``cache`` from :func:`forward_with_cache` to skip the recompute.
    """
    if cache is None:
        _, cache = forward_with_cache(params, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache[-1].shape:
        raise ConfigurationError(
            f"upstream shape {upstream.shape} != output shape {cache[-1].shape}"
        )
    grads = out if out is not None else params.zeros_like()
    g = upstream
    for i in range(len(params.weights) - 1, -1, -1):
        a_in = cache[i]
        np.matmul(a_in.T, g, out=grads.weights[i])
        np.sum(g, axis=0, out=grads.biases[i])
        if i > 0:
            g = g @ params.weights[i].T
            g *= cache[i] > 0.0
    return grads


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    overflow_count: int = 0

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> bool:
    """In-place Adam update of ``theta``. Returns False on a rejected step.

    A gradient containing NaN or inf leaves ``theta`` and the moments intact
    and bumps ``state.overflow_count``.
    """
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ConfigurationError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        state.overflow_count += 1
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True
