"""Synthetic recommendation environment.

Items live in R^d as a mixture of Gaussian topic clusters. A user is a unit
interest vector; the true value of an item is an RBF of its cosine to that
interest, and logged rewards add clipped Gaussian noise. Logs are produced by
a mixture of an expert, a Zipf popularity policy and uniform random picks.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nn import ConfigurationError

ECPM_SCALE = 5.0
SOURCES = ("expert", "popularity", "random", "online")
EXPERT, POPULARITY, RANDOM, ONLINE = range(4)

# rng stream ids, combined with the scenario seed
_CATALOG_STREAM = 0
_DATASET_STREAM = 1
_EVAL_STREAM = 2


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "medium_quality"
    state_dim: int = 10
    action_dim: int = 10
    n_items: int = 500
    n_clusters: int = 5
    # (expert, popularity, random)
    weights: tuple[float, float, float] = (0.10, 0.60, 0.30)
    reward_noise: float = 0.1
    context_noise: float = 0.3
    delta: float = 0.5
    dataset_size: int = 50_000
    seed: int = 0
    cluster_scale: float = 2.0
    item_spread: float = 0.5
    expert_jitter: float = 0.1
    zipf_exponent: float = 1.1

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != 3 or min(w) < 0 or max(w) > 1 or abs(sum(w) - 1.0) > 1e-12:
            raise ConfigurationError(f"mixture weights must be 3 probabilities summing to 1, got {w}")
        if min(self.state_dim, self.action_dim, self.n_items, self.n_clusters) < 1:
            raise ConfigurationError("all dimensions and counts must be >= 1")
        if self.state_dim != self.action_dim:
            raise ConfigurationError("states and item embeddings share one space: state_dim must equal action_dim")
        if self.n_clusters > self.n_items:
            raise ConfigurationError("n_items must be >= n_clusters")
        if self.delta <= 0 or self.reward_noise < 0 or self.context_noise < 0:
            raise ConfigurationError("delta must be > 0 and noise levels >= 0")

    @property
    def d(self) -> int:
        return self.state_dim

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


SCENARIOS = {
    "medium_quality": ScenarioConfig(name="medium_quality", weights=(0.10, 0.60, 0.30)),
    "extreme_noisy": ScenarioConfig(name="extreme_noisy", weights=(0.05, 0.05, 0.90)),
}


def scenario(name: str, **overrides) -> ScenarioConfig:
    try:
        base = SCENARIOS[name]
    except KeyError:
        raise ConfigurationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return base.with_(**overrides) if overrides else base


def quality_weights(noise_weight: float, expert_share: float = 1.0 / 7.0):
    """Mixture with the given random share; the rest split expert:popularity 1:6."""
    rest = 1.0 - noise_weight
    expert = rest * expert_share
    return (expert, rest - expert, noise_weight)


@dataclass(frozen=True)
class ItemCatalog:
    embeddings: np.ndarray
    cluster_id: np.ndarray
    zipf_rank: np.ndarray
    centers: np.ndarray
    unit: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, embeddings, cluster_id, zipf_rank, centers) -> "ItemCatalog":
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(norms > 0, embeddings / norms, 0.0)
        return cls(embeddings, cluster_id, zipf_rank, centers, unit)

    def __len__(self) -> int:
        return len(self.embeddings)


@dataclass(frozen=True)
class UserModel:
    interest: np.ndarray
    delta: float = 0.5

    def __post_init__(self):
        if self.delta <= 0 or not np.linalg.norm(self.interest) > 0:
            raise DomainError("user interest must be nonzero and delta positive")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    source: str


@dataclass
class Dataset:
    """Column store of logged transitions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    sources: np.ndarray
    config: ScenarioConfig
    latent: np.ndarray | None = None

    def __post_init__(self):
        if len(self.rewards) == 0:
            raise ConfigurationError("a dataset must be nonempty")

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          SOURCES[self.sources[i]])

    def source_mean_reward(self, source: str) -> float:
        mask = self.sources == SOURCES.index(source)
        return float(self.rewards[mask].mean())

    def to_csv(self, path) -> None:
        d, k = self.states.shape[1], self.actions.shape[1]
        header = ([f"state_{i}" for i in range(d)] + [f"action_{i}" for i in range(k)]
                  + ["reward", "source"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for s, a, r, src in zip(self.states, self.actions, self.rewards, self.sources):
                w.writerow([*map(repr, s.tolist()), *map(repr, a.tolist()), repr(float(r)), SOURCES[src]])

    @classmethod
    def from_csv(cls, path, config: ScenarioConfig) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(h.startswith("state_") for h in header)
        num = np.array([[float(x) for x in row[:-1]] for row in body])
        sources = np.array([SOURCES.index(row[-1]) for row in body], dtype=np.int64)
        return cls(num[:, :d], num[:, d:-1], num[:, -1], sources, config)


# -- elementary pieces -------------------------------------------------------

def random_unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_catalog(config: ScenarioConfig, rng: np.random.Generator) -> ItemCatalog:
    """Cluster centers on the sphere of radius ``cluster_scale``; items scatter around them.

    Items are laid out cluster by cluster, so zipf rank (1-based) is the item
    index plus one and cluster 0 holds the most popular items.
    """
    d, n, k = config.d, config.n_items, config.n_clusters
    centers = random_unit(rng, k, d) * config.cluster_scale
    cluster_id = (np.arange(n) * k) // n
    emb = centers[cluster_id] + config.item_spread * rng.standard_normal((n, d))
    return ItemCatalog.build(emb, cluster_id, np.arange(1, n + 1), centers)


def latent_reward(user: UserModel, item_embedding) -> float:
    e = np.asarray(item_embedding, dtype=np.float64)
    ne, nu = np.linalg.norm(e), np.linalg.norm(user.interest)
    if ne == 0 or nu == 0:
        raise DomainError("latent reward is undefined for zero-norm vectors")
    cos = float(e @ user.interest) / (ne * nu)
    return float(np.exp(-(1.0 - cos) / (2.0 * user.delta ** 2)))


def latent_rewards(interests: np.ndarray, embeddings: np.ndarray, delta: float) -> np.ndarray:
    """Row-wise latent reward for paired interest/embedding rows."""
    ne = np.linalg.norm(embeddings, axis=1)
    nu = np.linalg.norm(interests, axis=1)
    if np.any(ne == 0) or np.any(nu == 0):
        raise DomainError("latent reward is undefined for zero-norm vectors")
    cos = np.einsum("ij,ij->i", embeddings, interests) / (ne * nu)
    return np.exp(-(1.0 - cos) / (2.0 * delta ** 2))


def observe_reward(r_latent, sigma_noise: float, rng: np.random.Generator):
    r = np.asarray(r_latent, dtype=np.float64)
    noisy = r + sigma_noise * rng.standard_normal(r.shape) if sigma_noise > 0 else r.copy()
    out = np.clip(noisy, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def zipf_probs(n_items: int, exponent: float) -> np.ndarray:
    p = np.arange(1, n_items + 1, dtype=np.float64) ** -exponent
    return p / p.sum()


def knn_retrieve(catalog: ItemCatalog, action_vector) -> int:
    """Index of the catalog item with the highest cosine to the action; lowest index wins ties."""
    return int(knn_retrieve_batch(catalog, np.atleast_2d(action_vector))[0])


def knn_retrieve_batch(catalog: ItemCatalog, actions: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(actions, axis=1)
    if np.any(norms == 0):
        raise DomainError("cannot retrieve for a zero-norm action")
    # dividing by the action norm does not change the argmax
    return np.argmax(actions @ catalog.unit.T, axis=1)


def best_items(catalog: ItemCatalog, interests: np.ndarray) -> np.ndarray:
    return np.argmax(interests @ catalog.unit.T, axis=1)


# -- environment -------------------------------------------------------------

class RecSim:
    """A scenario with its catalog materialized."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.catalog = generate_catalog(config, np.random.default_rng([config.seed, _CATALOG_STREAM]))
        self._zipf = zipf_probs(config.n_items, config.zipf_exponent)
        self._by_rank = np.argsort(self.catalog.zipf_rank)

    def eval_rng(self, k: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, _EVAL_STREAM, k])

    def sample_users(self, n: int, rng: np.random.Generator):
        """Fresh users: unit interests and their noisy context states."""
        interests = random_unit(rng, n, self.config.d)
        states = interests + self.config.context_noise * rng.standard_normal(interests.shape)
        return interests, states

    def choose_items(self, sources: np.ndarray, interests: np.ndarray,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Item index and logged action for each (source, user) pair."""
        n = len(sources)
        cfg = self.config
        items = np.empty(n, dtype=np.int64)
        m_exp = sources == EXPERT
        m_pop = sources == POPULARITY
        m_rnd = sources == RANDOM
        items[m_exp] = best_items(self.catalog, interests[m_exp])
        items[m_pop] = self._by_rank[rng.choice(cfg.n_items, size=int(m_pop.sum()), p=self._zipf)]
        items[m_rnd] = rng.integers(0, cfg.n_items, size=int(m_rnd.sum()))
        actions = self.catalog.embeddings[items].copy()
        if cfg.expert_jitter > 0:
            actions[m_exp] += cfg.expert_jitter * rng.standard_normal((int(m_exp.sum()), cfg.d))
        return items, actions

    def log(self, n: int, rng: np.random.Generator, weights=None):
        """Draw ``n`` logged interactions; returns (states, actions, observed, latent, sources, interests)."""
        cfg = self.config
        w = cfg.weights if weights is None else weights
        interests, states = self.sample_users(n, rng)
        sources = rng.choice(3, size=n, p=np.asarray(w))
        _, actions = self.choose_items(sources, interests, rng)
        latent = latent_rewards(interests, actions, cfg.delta)
        observed = observe_reward(latent, cfg.reward_noise, rng)
        return states, actions, np.atleast_1d(observed), latent, sources, interests

    def generate_dataset(self) -> Dataset:
        cfg = self.config
        if cfg.dataset_size < 1:
            raise ConfigurationError("dataset_size must be >= 1")
        rng = np.random.default_rng([cfg.seed, _DATASET_STREAM])
        states, actions, observed, latent, sources, _ = self.log(cfg.dataset_size, rng)
        return Dataset(states, actions, observed, sources.astype(np.int64), cfg, latent)

    def online_batch(self, policy, n: int, rng: np.random.Generator):
        """Fresh users served by sampling from ``policy``.

        The sampled action is decoded to its nearest catalog item, and the
        item embedding is what gets logged, keeping online and offline
        actions on the same manifold.
        """
        interests, states = self.sample_users(n, rng)
        raw = policy.sample(states, rng)
        items = knn_retrieve_batch(self.catalog, raw)
        actions = self.catalog.embeddings[items].copy()
        latent = latent_rewards(interests, actions, self.config.delta)
        observed = np.atleast_1d(observe_reward(latent, self.config.reward_noise, rng))
        return states, actions, observed, latent

    def inject_random(self, dataset: Dataset, ratio: float, rng: np.random.Generator) -> Dataset:
        """Replace a ``ratio`` share of rows with fresh uniform-random interactions."""
        if not 0.0 <= ratio <= 1.0:
            raise ConfigurationError("noise ratio must lie in [0, 1]")
        n = len(dataset)
        k = int(round(ratio * n))
        out = Dataset(dataset.states.copy(), dataset.actions.copy(), dataset.rewards.copy(),
                      dataset.sources.copy(), dataset.config,
                      None if dataset.latent is None else dataset.latent.copy())
        if k == 0:
            return out
        idx = np.sort(rng.choice(n, size=k, replace=False))
        states, actions, observed, latent, sources, _ = self.log(k, rng, weights=(0.0, 0.0, 1.0))
        out.states[idx], out.actions[idx], out.rewards[idx] = states, actions, observed
        out.sources[idx] = sources
        if out.latent is not None:
            out.latent[idx] = latent
        return out


def logging_agent(config: ScenarioConfig, user: UserModel, catalog: ItemCatalog,
                  rng: np.random.Generator) -> Transition:
    """One logged interaction for ``user`` under the scenario's mixed strategy."""
    if len(catalog) == 0:
        raise ConfigurationError("catalog is empty")
    src = int(rng.choice(3, p=np.asarray(config.weights)))
    state = user.interest + config.context_noise * rng.standard_normal(config.d)
    if src == EXPERT:
        item = int(best_items(catalog, user.interest[None, :])[0])
    elif src == POPULARITY:
        ranks = rng.choice(len(catalog), p=zipf_probs(len(catalog), config.zipf_exponent))
        item = int(np.argsort(catalog.zipf_rank)[ranks])
    else:
        item = int(rng.integers(0, len(catalog)))
    action = catalog.embeddings[item].copy()
    if src == EXPERT and config.expert_jitter > 0:
        action += config.expert_jitter * rng.standard_normal(config.d)
    r = observe_reward(latent_reward(user, action), config.reward_noise, rng)
    return Transition(state, action, float(r), SOURCES[src])


def generate_dataset(config: ScenarioConfig) -> Dataset:
    return RecSim(config).generate_dataset()


# -- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    reward: float
    ecpm: float
    dist: float
    overflow: bool = False


def evaluate_actions(env: RecSim, interests: np.ndarray, actions: np.ndarray) -> EvalResult:
    finite = np.all(np.isfinite(actions), axis=1)
    rewards = np.zeros(len(actions))
    dists = np.full(len(actions), np.inf)
    # a zero action retrieves nothing: reward 0, distance to the closest item
    zero = finite & ~np.any(actions, axis=1)
    dists[zero] = np.linalg.norm(env.catalog.embeddings, axis=1).min()
    ok = finite & ~zero
    if ok.any():
        acts = actions[ok]
        items = knn_retrieve_batch(env.catalog, acts)
        emb = env.catalog.embeddings[items]
        rewards[ok] = latent_rewards(interests[ok], emb, env.config.delta)
        dists[ok] = np.linalg.norm(acts - emb, axis=1)
    reward = float(rewards.mean())
    return EvalResult(reward, ECPM_SCALE * reward, float(dists.mean()), not bool(finite.all()))


def evaluate_policy(policy, env: RecSim, n_users: int, rng: np.random.Generator) -> EvalResult:
    """Mean latent reward of the item retrieved from the policy mean for fresh users."""
    if n_users < 1:
        raise ConfigurationError("n_users must be >= 1")
    interests, states = env.sample_users(n_users, rng)
    with np.errstate(over="ignore", invalid="ignore"):
        actions = policy.mean(states)
    return evaluate_actions(env, interests, actions)


def export_catalog(catalog: ItemCatalog, path) -> None:
    d = catalog.embeddings.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "cluster", "zipf_rank"] + [f"emb_{i}" for i in range(d)])
        for i, (e, c, r) in enumerate(zip(catalog.embeddings, catalog.cluster_id, catalog.zipf_rank)):
            w.writerow([i, int(c), int(r), *map(repr, e.tolist())])

