"""Numerical checks of how advantage sign shapes Gaussian-policy dynamics.

The scalar system tracks one mean ``mu`` and one log-std ``xi`` pulled toward
(positive advantage) or pushed away from (negative advantage) a fixed anchor
action by plain gradient steps on ``A * log pi(anchor)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .algorithms import AlgoConfig, decompose_gradient, sample_batch
from .nn import AdamState, adam_step
from .policy import GaussianPolicy
from .recsim import Dataset

OVERFLOW = 1e12

__all__ = ["DynState", "Trajectory", "hessian_closed_form", "linearized_factors",
           "simulate_dynamics", "fit_explosion_exponent", "fragility_sweep",
           "onpolicy_invariance_check", "phantom_monitor", "PhantomReport",
           "decompose_gradient", "update_jacobian"]


@dataclass
class DynState:
    mu: float
    xi: float
    anchor: float
    advantage: float
    lr: float
    learn_variance: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class Trajectory:
    mu: np.ndarray
    xi: np.ndarray
    grad_mu: np.ndarray
    grad_xi: np.ndarray
    delta: np.ndarray
    overflow: bool

    @property
    def grad_norm(self) -> np.ndarray:
        return np.hypot(self.grad_mu, self.grad_xi)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.xi)

    def __len__(self) -> int:
        return len(self.mu)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "mu", "xi", "grad_mu", "grad_xi", "delta_norm"])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.mu[i])), repr(float(self.xi[i])),
                            repr(float(self.grad_mu[i])), repr(float(self.grad_xi[i])),
                            repr(float(self.delta[i]))])


def hessian_closed_form(sigma: float) -> np.ndarray:
    """Expected NLL Hessian in (mu, xi) coordinates: diag(1/sigma^2, 2)."""
    return np.diag([1.0 / sigma ** 2, 2.0])


def linearized_factors(sigma: float, lr: float, advantage: float) -> np.ndarray:
    """Eigenvalues of I - lr * A * H near the anchor (> 1 means expansion)."""
    return np.linalg.eigvalsh(np.eye(2) - lr * advantage * hessian_closed_form(sigma))


def _scores(mu, xi, a):
    inv_var = np.exp(-2.0 * xi)
    d = a - mu
    return d * inv_var, d * d * inv_var - 1.0


def update_jacobian(mu: float, xi: float, anchor: float, advantage: float, lr: float,
                    h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of one exact update step (mu, xi) -> (mu', xi')."""
    def step(m, x):
        gm, gx = _scores(m, x, anchor)
        return np.array([m + lr * advantage * gm, x + lr * advantage * gx])

    cols = [(step(mu + h, xi) - step(mu - h, xi)) / (2 * h),
            (step(mu, xi + h) - step(mu, xi - h)) / (2 * h)]
    return np.column_stack(cols)


def simulate_dynamics(init: DynState, steps: int) -> Trajectory:
    """Iterate theta <- theta + lr * A * score(anchor) and record the path.

    ``delta`` is |mu - anchor|. The run stops early once any tracked
    magnitude exceeds ``OVERFLOW``. With ``learn_variance=False`` the
    log-std stays at its initial value.
    """
    mu, xi = float(init.mu), float(init.xi)
    a, adv, lr = init.anchor, init.advantage, init.lr
    rows = []
    overflow = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps + 1):
            gm, gx = _scores(mu, xi, a)
            vals = (mu, xi, gm, gx, abs(a - mu))
            if not all(np.isfinite(v) and abs(v) <= OVERFLOW for v in vals):
                overflow = True
                break
            rows.append(vals)
            mu += lr * adv * gm
            if init.learn_variance:
                xi += lr * adv * gx
    arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return Trajectory(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], overflow)


@dataclass
class ExponentFit:
    rho: float
    slope_delta: float
    slope_grad: float

    @property
    def ratio(self) -> float:
        return self.slope_grad / self.slope_delta


def fit_explosion_exponent(traj, window: slice | None = None) -> ExponentFit:
    """Least-squares log-slopes of displacement and gradient norm against step.

    ``traj`` is a :class:`Trajectory` or a plain displacement sequence (then
    the gradient slope is fitted on the same series). By default the second
    half of the run is used so the linear term of the score has died out.
    """
    if isinstance(traj, Trajectory):
        delta, grad = traj.delta, traj.grad_norm
    else:
        delta = grad = np.asarray(traj, dtype=np.float64)
    n = len(delta)
    if window is None:
        window = slice(n // 2, n)
    t = np.arange(n, dtype=np.float64)[window]
    sd = np.polyfit(t, np.log(delta[window]), 1)[0]
    sg = np.polyfit(t, np.log(grad[window]), 1)[0]
    return ExponentFit(float(np.exp(sd)), float(sd), float(sg))


@dataclass
class FragilityRow:
    sigma: float
    d_mu: float
    d_xi: float

    @property
    def norm(self) -> float:
        return float(np.hypot(self.d_mu, self.d_xi))


def fragility_sweep(distance: float, sigmas) -> list[FragilityRow]:
    """Score of a fixed off-mean action at distance ``distance`` as sigma shrinks."""
    out = []
    for s in sigmas:
        gm, gx = _scores(0.0, np.log(s), distance)
        out.append(FragilityRow(float(s), float(gm), float(gx)))
    return out


@dataclass
class OnPolicyEstimate:
    position: float
    mean: float
    stderr: float


def onpolicy_invariance_check(sigma: float, d: int, positions, n_samples: int,
                              seed: int = 0) -> list[OnPolicyEstimate]:
    """Monte-Carlo E||grad_mu log pi||^2 for actions drawn from the policy itself.

    Each position gets an independent stream. The exact value is d / sigma^2.
    """
    out = []
    for k, pos in enumerate(positions):
        rng = np.random.default_rng([seed, k])
        mu = np.full(d, float(pos))
        a = mu + sigma * rng.standard_normal((n_samples, d))
        g = (a - mu) / sigma ** 2
        sq = np.sum(g * g, axis=1)
        out.append(OnPolicyEstimate(float(pos), float(sq.mean()),
                                    float(sq.std(ddof=1) / np.sqrt(n_samples))))
    return out


# -- phantom gradients on a trained network -----------------------------------

@dataclass
class PhantomReport:
    steps: np.ndarray
    applied_mu: np.ndarray
    applied_xi: np.ndarray
    phantom_mu: np.ndarray
    phantom_xi: np.ndarray
    sigma_mean: np.ndarray = field(default=None)

    @property
    def applied_total(self) -> np.ndarray:
        return np.hypot(self.applied_mu, self.applied_xi)

    @property
    def phantom_total(self) -> np.ndarray:
        return np.hypot(self.phantom_mu, self.phantom_xi)

    def ratio(self, part: str = "total", smooth: int = 1) -> np.ndarray:
        num = getattr(self, f"phantom_{part}")
        den = getattr(self, f"applied_{part}")
        return _block_mean(num, smooth) / _block_mean(den, smooth)

    def final_ratios(self, tail: int = 250) -> dict:
        """Phantom/applied ratios of the mean norms over the last ``tail`` steps."""
        out = {}
        for part in ("total", "mu", "xi"):
            num = getattr(self, f"phantom_{part}")[-tail:].mean()
            out[part] = float(num / getattr(self, f"applied_{part}")[-tail:].mean())
        return out

    def is_increasing(self, part: str, transient: int = 500, block: int = 500) -> bool:
        """Block-averaged ratio never decreases once the transient is over."""
        sl = slice(transient, None)
        num = _block_mean(getattr(self, f"phantom_{part}")[sl], block)
        den = _block_mean(getattr(self, f"applied_{part}")[sl], block)
        return bool(np.all(np.diff(num / den) > 0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "applied_mu", "applied_xi", "phantom_mu", "phantom_xi", "sigma_mean"])
            for row in zip(self.steps, self.applied_mu, self.applied_xi, self.phantom_mu,
                           self.phantom_xi, self.sigma_mean):
                w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])


def _block_mean(x: np.ndarray, block: int) -> np.ndarray:
    if block <= 1:
        return x
    n = len(x) // block
    return x[: n * block].reshape(n, block).mean(axis=1)


def phantom_monitor(dataset: Dataset, config: AlgoConfig | None = None,
                    steps: int | None = None) -> PhantomReport:
    """Train on above-mean samples only while measuring the unapplied below-mean gradient.

    Each batch is split at its mean reward. The applied objective is the
    advantage-weighted log-likelihood of the positive rows; the phantom
    gradient is the same weighted score sum over the negative rows (weights
    |A|), computed at the same parameters and discarded. Both are averaged
    over the full batch size, as they would enter a plain policy gradient.
    """
    cfg = config or AlgoConfig(algorithm="apg")
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed)
    d = dataset.config
    policy = GaussianPolicy.init(d.state_dim, d.action_dim, rng, cfg.hidden, cfg.init_log_std)
    adam = AdamState.zeros(policy.theta.size)
    n_mlp = policy.mean_net.flat.size
    cols = np.zeros((steps, 4))
    sig = np.zeros(steps)
    for t in range(steps):
        b = sample_batch(dataset, cfg.batch_size, rng)
        adv = b.rewards - b.rewards.mean()
        pos = adv > 0
        n = len(adv)
        _, g_pos, _ = policy.weighted_loglik_grad(b.states, b.actions, np.where(pos, adv, 0.0))
        _, g_neg, _ = policy.weighted_loglik_grad(b.states, b.actions, np.where(pos, 0.0, -adv))
        g_pos /= n
        g_neg /= n
        cols[t] = (np.linalg.norm(g_pos[:n_mlp]), np.linalg.norm(g_pos[n_mlp:]),
                   np.linalg.norm(g_neg[:n_mlp]), np.linalg.norm(g_neg[n_mlp:]))
        sig[t] = float(np.exp(policy.log_std).mean())
        if adam_step(policy.theta, -g_pos, adam, cfg.lr):
            policy.clamp_log_std()
    return PhantomReport(np.arange(1, steps + 1), cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], sig)

