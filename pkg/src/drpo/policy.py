"""Diagonal Gaussian policy with an MLP mean and a global log-std vector."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import (ConfigurationError, MlpParams, forward_with_cache, mlp_backward,
                 mlp_sizes, param_count)

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_MIN = -10.0
LOG_STD_MAX = 5.0
_MAGIC = b"drpo-policy v1"


@dataclass
class ScoreVector:
    """Closed-form score of a diagonal Gaussian, one row per sample."""

    d_mu: np.ndarray
    d_xi: np.ndarray


class GaussianPolicy:
    """pi(a|s) = N(mu(s), diag(exp(2 xi))).

    ``theta`` is the single flat parameter vector: the MLP buffer followed by
    the ``action_dim`` log-std entries. ``mean_net`` and ``log_std`` are views,
    so an optimizer stepping ``theta`` updates both.
    """

    def __init__(self, sizes, theta: np.ndarray | None = None):
        sizes = tuple(int(s) for s in sizes)
        n_mlp = param_count(sizes)
        if theta is None:
            theta = np.zeros(n_mlp + sizes[-1])
        if theta.shape != (n_mlp + sizes[-1],):
            raise ConfigurationError("theta length does not match network sizes")
        self.theta = theta
        self.mean_net = MlpParams(sizes, theta[:n_mlp])
        self.log_std = theta[n_mlp:]
        self.clamp_events = 0

    @classmethod
    def init(cls, state_dim: int, action_dim: int, rng: np.random.Generator,
             hidden=(128, 128), log_std: float = 0.0) -> "GaussianPolicy":
        sizes = mlp_sizes(state_dim, action_dim, hidden)
        pol = cls(sizes)
        pol.mean_net.flat[:] = MlpParams.init(sizes, rng).flat
        pol.log_std[:] = log_std
        return pol

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.mean_net.sizes

    @property
    def action_dim(self) -> int:
        return self.sizes[-1]

    @property
    def state_dim(self) -> int:
        return self.sizes[0]

    def copy(self) -> "GaussianPolicy":
        pol = GaussianPolicy(self.sizes, self.theta.copy())
        pol.clamp_events = self.clamp_events
        return pol

    def mean(self, states: np.ndarray) -> np.ndarray:
        return forward_with_cache(self.mean_net, np.atleast_2d(states))[0]

    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def clamp_log_std(self) -> int:
        """Clip xi into [LOG_STD_MIN, LOG_STD_MAX]; returns the number clipped."""
        bad = (self.log_std < LOG_STD_MIN) | (self.log_std > LOG_STD_MAX)
        n = int(bad.sum())
        if n:
            np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)
            self.clamp_events += n
        return n

    def _check_actions(self, actions: np.ndarray) -> np.ndarray:
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if actions.shape[1] != self.action_dim:
            raise ConfigurationError(
                f"action dim {actions.shape[1]} != policy action dim {self.action_dim}"
            )
        return actions

    def log_prob(self, states, actions) -> np.ndarray:
        """Per-sample log density, summed over action dimensions."""
        return self.log_prob_from_mean(self.mean(states), self._check_actions(actions))

    def log_prob_from_mean(self, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
        z = (actions - mu) * np.exp(-self.log_std)
        return np.sum(-self.log_std - 0.5 * z * z - 0.5 * LOG_2PI, axis=1)

    def score(self, states, actions) -> ScoreVector:
        actions = self._check_actions(actions)
        mu = self.mean(states)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = actions - mu
        return ScoreVector(diff * inv_var, diff * diff * inv_var - 1.0)

    def weighted_loglik_grad(self, states, actions, coef, cache=None):
        """Value and gradient (flat, theta layout) of sum_i coef_i * log pi(a_i|s_i).

        Returns ``(value, grad, log_probs)``. ``coef`` may contain zeros; rows
        with zero coefficient contribute nothing to either output.
        """
        actions = self._check_actions(actions)
        states = np.atleast_2d(states)
        coef = np.asarray(coef, dtype=np.float64)
        if cache is None:
            mu, cache = forward_with_cache(self.mean_net, states)
        else:
            mu = cache[-1]
        inv_var = np.exp(-2.0 * self.log_std)
        diff = actions - mu
        sq = diff * diff * inv_var
        logp = np.sum(-self.log_std - 0.5 * sq - 0.5 * LOG_2PI, axis=1)
        value = float(coef @ logp)
        grad = np.empty_like(self.theta)
        n_mlp = self.mean_net.flat.size
        upstream = (coef[:, None] * diff) * inv_var
        mlp_backward(self.mean_net, states, upstream, cache=cache,
                     out=MlpParams(self.sizes, grad[:n_mlp]))
        grad[n_mlp:] = coef @ (sq - 1.0)
        return value, grad, logp

    def full_score_backprop(self, state, action) -> np.ndarray:
        """Gradient of log pi(a|s) w.r.t. every parameter, for one sample."""
        return self.weighted_loglik_grad(np.atleast_2d(state), np.atleast_2d(action),
                                         np.ones(1))[1]

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(states)
        return mu + self.std() * rng.standard_normal(mu.shape)

    # -- checkpoints -------------------------------------------------------

    def save(self, path) -> None:
        """Write ``drpo-policy v1 sizes=<csv>`` then theta as little-endian float64."""
        header = _MAGIC + b" sizes=" + ",".join(map(str, self.sizes)).encode() + b"\n"
        Path(path).write_bytes(header + self.theta.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GaussianPolicy":
        raw = Path(path).read_bytes()
        header, _, body = raw.partition(b"\n")
        if not header.startswith(_MAGIC + b" sizes="):
            raise ConfigurationError(f"{path}: not a policy checkpoint")
        sizes = [int(s) for s in header.split(b"=", 1)[1].split(b",")]
        theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
        return cls(sizes, theta)
