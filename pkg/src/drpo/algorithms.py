"""Offline contextual-bandit learners sharing one Gaussian policy backbone.

Every learner is split into two halves:

* ``prepare`` looks at a batch and produces per-row coefficients that do not
  depend on the policy parameters (hard filtering, advantage weights, critic
  updates, behaviour log-densities). It may mutate trainer state, e.g. the
  Top-P controller.
* ``policy_loss`` is a differentiable function of the policy parameters given
  that preparation. Its gradient is what Adam consumes, and it is what the
  finite-difference checks target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import dro
from .nn import (AdamState, ConfigurationError, MlpParams, adam_step, forward_with_cache,
                 mlp_backward, mlp_sizes)
from .policy import GaussianPolicy
from .recsim import ONLINE, Dataset, RecSim, evaluate_policy

log = logging.getLogger(__name__)

ALGORITHMS = ("bc", "apg", "awr", "asymre", "iql", "crr", "bppo", "adaptive_bc",
              "drpo", "drpo_exp")
# ablation-only learners; not part of the benchmark table
EXTRA_ALGORITHMS = ("hard_only",)
FILTERED = {"drpo", "drpo_exp", "adaptive_bc"}


@dataclass
class AlgoConfig:
    algorithm: str = "drpo"
    lr: float = 3e-4
    batch_size: int = 320
    steps: int = 5000
    temperature: float = 0.05
    asym_neg_weight: float = 0.1
    expectile: float = 0.7
    clip_eps: float = 0.2
    crr_beta: float = 1.0
    crr_mode: str = "binary"
    weight_clip: float = 20.0
    init_top_p: float = 0.5
    target_ratio: float = 0.5
    adaptive: bool = True
    bc_pretrain_steps: int = 2000
    eval_every: int = 250
    eval_users: int = 1000
    init_log_std: float = 0.0
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS + EXTRA_ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        positive = ("lr", "temperature", "weight_clip", "crr_beta", "clip_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.batch_size < 2 or self.steps < 0 or self.eval_every < 1:
            raise ConfigurationError("batch_size >= 2, steps >= 0 and eval_every >= 1 required")
        if not 0.0 < self.expectile < 1.0:
            raise ConfigurationError("expectile must lie in (0, 1)")
        if self.crr_mode not in ("binary", "exp"):
            raise ConfigurationError("crr_mode must be 'binary' or 'exp'")
        self.hidden = tuple(self.hidden)

    def with_(self, **kw) -> "AlgoConfig":
        return replace(self, **kw)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    sources: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_dataset(cls, ds: Dataset, idx: np.ndarray) -> "Batch":
        return cls(ds.states[idx], ds.actions[idx], ds.rewards[idx], ds.sources[idx])


@dataclass
class Prepared:
    """Parameter-independent half of a learner's objective for one batch.

    ``coef`` and ``adv`` cover the whole batch; ``rows`` lists the rows that
    enter the loss and ``denom`` is the averaging count. For the clipped
    surrogate (``kind == "ppo"``) ``coef`` holds the advantages and
    ``logp_ref`` the behaviour log-densities.
    """

    rows: np.ndarray
    coef: np.ndarray
    adv: np.ndarray
    denom: int
    kind: str = "weighted"
    logp_ref: np.ndarray | None = None
    clip_eps: float = 0.2
    stats: dict = field(default_factory=dict)


def policy_loss(policy: GaussianPolicy, batch: Batch, prep: Prepared):
    """Loss and its gradient (theta layout) for a prepared batch."""
    s, a = batch.states[prep.rows], batch.actions[prep.rows]
    if prep.kind == "weighted":
        value, grad, _ = policy.weighted_loglik_grad(s, a, prep.coef[prep.rows])
        return -value / prep.denom, grad * (-1.0 / prep.denom)
    # clipped likelihood-ratio surrogate: min(rho A, clip(rho) A)
    adv = prep.coef[prep.rows]
    _, cache = forward_with_cache(policy.mean_net, s)
    logp = policy.log_prob_from_mean(cache[-1], a)
    with np.errstate(over="ignore"):
        rho = np.exp(logp - prep.logp_ref[prep.rows])
    lo, hi = 1.0 - prep.clip_eps, 1.0 + prep.clip_eps
    unclipped = rho * adv
    clipped = np.clip(rho, lo, hi) * adv
    surr = np.minimum(unclipped, clipped)
    active = unclipped <= clipped
    _, grad, _ = policy.weighted_loglik_grad(s, a, np.where(active, rho * adv, 0.0), cache=cache)
    return -float(surr.sum()) / prep.denom, grad * (-1.0 / prep.denom)


# -- critics -----------------------------------------------------------------

def critic_predict(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return forward_with_cache(params, x)[0][:, 0]


def expectile_loss(params: MlpParams, states: np.ndarray, targets: np.ndarray, tau: float):
    """mean |tau - 1(u < 0)| u^2 with u = target - V(s); returns (loss, flat grad)."""
    out, cache = forward_with_cache(params, states)
    u = targets - out[:, 0]
    w = np.where(u < 0, 1.0 - tau, tau)
    n = len(targets)
    upstream = (-2.0 / n) * (w * u)[:, None]
    return float(np.mean(w * u * u)), mlp_backward(params, states, upstream, cache=cache).flat


def squared_loss(params: MlpParams, inputs: np.ndarray, targets: np.ndarray):
    """mean (Q(x) - target)^2; returns (loss, flat grad)."""
    out, cache = forward_with_cache(params, inputs)
    err = out[:, 0] - targets
    n = len(targets)
    upstream = (2.0 / n) * err[:, None]
    return float(np.mean(err * err)), mlp_backward(params, inputs, upstream, cache=cache).flat


# -- trainer -----------------------------------------------------------------

@dataclass
class RunMetrics:
    """Per-step controller traces plus periodic evaluation rows."""

    steps: list = field(default_factory=list)
    top_p: list = field(default_factory=list)
    nu_star: list = field(default_factory=list)
    sigma_ratio: list = field(default_factory=list)
    online_ratio: list = field(default_factory=list)
    n_selected: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def record(self, step: int, stats: dict) -> None:
        self.steps.append(step)
        self.top_p.append(stats.get("top_p", np.nan))
        self.nu_star.append(stats.get("nu_star", np.nan))
        self.sigma_ratio.append(stats.get("sigma_ratio", np.nan))
        self.online_ratio.append(stats.get("online_ratio", np.nan))
        self.n_selected.append(stats.get("n_selected", np.nan))
        self.loss.append(stats.get("loss", np.nan))

    @property
    def final(self) -> dict:
        return self.evals[-1] if self.evals else {}


class Trainer:
    """Owns the policy, optimizer and algorithm-specific state of one run."""

    def __init__(self, config: AlgoConfig, state_dim: int, action_dim: int,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.policy = GaussianPolicy.init(state_dim, action_dim, self.rng, config.hidden,
                                          config.init_log_std)
        self.adam = AdamState.zeros(self.policy.theta.size)
        self.filter = dro.FilterState(top_p=config.init_top_p, target_ratio=config.target_ratio,
                                      adaptive=config.adaptive)
        self.step_count = 0
        self.critic: MlpParams | None = None
        self.critic_adam: AdamState | None = None
        self.reference: GaussianPolicy | None = None
        algo = config.algorithm
        if algo in ("iql", "crr"):
            n_in = state_dim if algo == "iql" else state_dim + action_dim
            self.critic = MlpParams.init(mlp_sizes(n_in, 1, config.hidden), self.rng)
            self.critic_adam = AdamState.zeros(self.critic.flat.size)

    @property
    def overflow_count(self) -> int:
        n = self.adam.overflow_count
        if self.critic_adam is not None:
            n += self.critic_adam.overflow_count
        return n

    # - per-algorithm preparation -

    def prepare(self, batch: Batch) -> Prepared:
        cfg = self.config
        algo = cfg.algorithm
        r = batch.rewards
        n = len(r)
        all_rows = np.arange(n)
        centred = r - r.mean()
        stats: dict = {}

        if algo == "bc":
            prep = Prepared(all_rows, np.ones(n), centred, n)
        elif algo == "apg":
            prep = Prepared(all_rows, centred.copy(), centred, n)
        elif algo == "awr":
            prep = Prepared(all_rows, self._exp_weights(centred), centred, n)
        elif algo == "asymre":
            coef = np.where(centred > 0, centred, cfg.asym_neg_weight * centred)
            prep = Prepared(all_rows, coef, centred, n)
        elif algo in FILTERED:
            fb = dro.filter_and_update(r, self.filter)
            coef = np.zeros(n)
            if algo == "drpo":
                coef[fb.indices] = fb.normalized
            elif algo == "drpo_exp":
                coef[fb.indices] = dro.exp_tilt_weights(fb, cfg.temperature)
            else:
                coef[fb.indices] = 1.0
            # rows outside the filter sit at or below the threshold
            adv = r - fb.threshold
            outside = np.ones(n, dtype=bool)
            outside[fb.indices] = False
            adv[outside] = np.minimum(adv[outside], 0.0)
            assert np.all(coef >= 0.0), "filtered learners must never apply repulsive weights"
            prep = Prepared(fb.indices, coef, adv, len(fb.indices))
            stats.update(nu_star=fb.threshold, n_selected=len(fb.indices),
                         sigma_ratio=self.filter.sigma_ratio)
            stats["top_p"] = self.filter.top_p
        elif algo == "hard_only":
            idx = dro.select_top(r, dro.top_k_count(n, self.filter.top_p))
            inside = np.zeros(n, dtype=bool)
            inside[idx] = True
            # attractive updates only from the filtered set, repulsive ones from everywhere
            coef = np.where(inside, centred, np.minimum(centred, 0.0))
            prep = Prepared(all_rows, coef, centred, n)
            stats.update(nu_star=float(r[idx].min()), n_selected=len(idx),
                         top_p=self.filter.top_p)
        elif algo == "iql":
            _, g = expectile_loss(self.critic, batch.states, r, cfg.expectile)
            adam_step(self.critic.flat, g, self.critic_adam, cfg.lr)
            adv = r - critic_predict(self.critic, batch.states)
            prep = Prepared(all_rows, self._exp_weights(adv), adv, n)
        elif algo == "crr":
            x = np.hstack([batch.states, batch.actions])
            _, g = squared_loss(self.critic, x, r)
            adam_step(self.critic.flat, g, self.critic_adam, cfg.lr)
            mean_act = self.policy.mean(batch.states)
            adv = r - critic_predict(self.critic, np.hstack([batch.states, mean_act]))
            if cfg.crr_mode == "binary":
                coef = (adv > 0).astype(np.float64)
            else:
                coef = np.minimum(np.exp(np.minimum(adv / cfg.crr_beta, 50.0)), cfg.weight_clip)
            prep = Prepared(all_rows, coef, adv, n)
        elif algo == "bppo":
            if self.reference is None:
                raise ConfigurationError("BPPO needs a behaviour reference; call pretrain_reference first")
            logp_ref = self.reference.log_prob(batch.states, batch.actions)
            prep = Prepared(all_rows, centred.copy(), centred, n, kind="ppo",
                            logp_ref=logp_ref, clip_eps=cfg.clip_eps)
        else:  # pragma: no cover - guarded by AlgoConfig
            raise ConfigurationError(algo)

        if "online_ratio" not in stats and len(prep.rows):
            selected = prep.rows[prep.coef[prep.rows] > 0] if algo not in FILTERED else prep.rows
            if len(selected):
                stats["online_ratio"] = float(np.mean(batch.sources[selected] == ONLINE))
        prep.stats = stats
        return prep

    def _exp_weights(self, adv: np.ndarray) -> np.ndarray:
        cfg = self.config
        # cap the exponent before exp so huge advantages cannot overflow
        return np.minimum(np.exp(np.minimum(adv / cfg.temperature, 50.0)), cfg.weight_clip)

    # - stepping -

    def step(self, batch: Batch) -> dict:
        prep = self.prepare(batch)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = policy_loss(self.policy, batch, prep)
        applied = adam_step(self.policy.theta, grad, self.adam, self.config.lr)
        if applied:
            self.policy.clamp_log_std()
        self.step_count += 1
        stats = dict(prep.stats)
        stats["loss"] = loss
        self.last_batch, self.last_prep = batch, prep
        return stats

    def pretrain_reference(self, dataset: Dataset, steps: int) -> None:
        """Fit the BPPO behaviour policy by plain BC, then start the learner from it."""
        bc = Trainer(self.config.with_(algorithm="bc"), self.policy.state_dim,
                     self.policy.action_dim, rng=self.rng)
        bc.policy = self.policy
        bc.adam = AdamState.zeros(self.policy.theta.size)
        for _ in range(steps):
            bc.step(sample_batch(dataset, self.config.batch_size, self.rng))
        self.reference = self.policy.copy()
        self.adam = AdamState.zeros(self.policy.theta.size)

    def evaluate(self, env: RecSim, k: int) -> dict:
        res = evaluate_policy(self.policy, env, self.config.eval_users, env.eval_rng(k))
        return {"step": self.step_count, "reward": res.reward, "ecpm": res.ecpm, "dist": res.dist,
                "eval_overflow": res.overflow}


def sample_batch(dataset: Dataset, size: int, rng: np.random.Generator) -> Batch:
    return Batch.from_dataset(dataset, rng.integers(0, len(dataset), size=size))


def decompose_gradient(policy: GaussianPolicy, batch: Batch, prep: Prepared):
    """Norms of the weighted score sums over the positive- and non-positive-advantage rows.

    The split uses each learner's own advantage (``prep.adv``). Returns
    ``(signal_norm, noise_norm)``.
    """
    coef = prep.coef if prep.kind == "weighted" else _ppo_coef(policy, batch, prep)
    pos = prep.adv > 0
    norms = []
    for mask in (pos, ~pos):
        rows = np.flatnonzero(mask & (coef != 0))
        if len(rows) == 0:
            norms.append(0.0)
            continue
        _, g, _ = policy.weighted_loglik_grad(batch.states[rows], batch.actions[rows], coef[rows])
        norms.append(float(np.linalg.norm(g)))
    return norms[0], norms[1]


def _ppo_coef(policy, batch, prep) -> np.ndarray:
    logp = policy.log_prob(batch.states, batch.actions)
    rho = np.exp(logp - prep.logp_ref)
    adv = prep.coef
    clipped = np.clip(rho, 1 - prep.clip_eps, 1 + prep.clip_eps) * adv
    return np.where(rho * adv <= clipped, rho * adv, 0.0)


@dataclass
class TrainResult:
    policy: GaussianPolicy
    metrics: RunMetrics
    trainer: Trainer


def run_loop(trainer: Trainer, next_batch, steps: int, env: RecSim | None,
             metrics: RunMetrics | None = None, eval_offset: int = 0) -> RunMetrics:
    """Step ``steps`` times, evaluating every ``eval_every`` steps when ``env`` is given."""
    metrics = metrics if metrics is not None else RunMetrics()
    cfg = trainer.config
    for _ in range(steps):
        stats = trainer.step(next_batch())
        metrics.record(trainer.step_count, stats)
        if env is not None and trainer.step_count % cfg.eval_every == 0:
            row = trainer.evaluate(env, eval_offset + trainer.step_count // cfg.eval_every)
            sig, noise = decompose_gradient(trainer.policy, trainer.last_batch, trainer.last_prep)
            row.update(grad_norm_signal=sig, grad_norm_noise=noise,
                       overflow_count=trainer.overflow_count)
            metrics.evals.append(row)
    return metrics


def train(config: AlgoConfig, dataset: Dataset, env: RecSim | None = None) -> TrainResult:
    """Train ``config.algorithm`` on ``dataset`` with uniform batch sampling."""
    env = env if env is not None else RecSim(dataset.config)
    d = dataset.config
    trainer = Trainer(config, d.state_dim, d.action_dim)
    if config.algorithm == "bppo":
        trainer.pretrain_reference(dataset, config.bc_pretrain_steps)
    metrics = RunMetrics()
    row = trainer.evaluate(env, 0)
    row.update(grad_norm_signal=np.nan, grad_norm_noise=np.nan, overflow_count=trainer.overflow_count)
    metrics.evals.append(row)
    run_loop(trainer, lambda: sample_batch(dataset, config.batch_size, trainer.rng),
             config.steps, env, metrics)
    if config.steps % config.eval_every and config.steps > 0:
        row = trainer.evaluate(env, config.steps // config.eval_every + 1)
        row.update(grad_norm_signal=np.nan, grad_norm_noise=np.nan,
                   overflow_count=trainer.overflow_count)
        metrics.evals.append(row)
    return TrainResult(trainer.policy, metrics, trainer)
