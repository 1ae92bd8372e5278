"""Optimistic-DRO threshold, hard Top-K filtering and the Top-P controller."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .recsim import DomainError

NORM_EPS = 1e-8


def dual_objective(rewards, nu: float, kappa: float) -> float:
    """nu + E[(R - nu)_+] / kappa."""
    r = np.asarray(rewards, dtype=np.float64)
    return float(nu + np.maximum(r - nu, 0.0).mean() / kappa)


def _check_kappa(rewards, kappa) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise DomainError("rewards must be nonempty")
    if not 0.0 < kappa <= 1.0:
        raise DomainError(f"kappa must lie in (0, 1], got {kappa}")
    return r


def solve_dual_threshold(rewards, kappa: float) -> float:
    """Minimizer of the dual objective: the smallest reward in the top ceil(kappa*N)."""
    r = _check_kappa(rewards, kappa)
    k = max(1, math.ceil(kappa * r.size - 1e-12))
    return float(np.sort(r)[::-1][k - 1])


def dual_minimum(rewards, kappa: float) -> tuple[float, float]:
    """Scan every observed reward as a candidate nu; returns (nu, objective).

    The dual is piecewise linear and convex with kinks at the samples, so
    the minimum over the sorted rewards is the global minimum.
    """
    r = _check_kappa(rewards, kappa)
    cands = np.unique(r)
    vals = [dual_objective(r, c, kappa) for c in cands]
    i = int(np.argmin(vals))
    return float(cands[i]), float(vals[i])


@dataclass
class LpSolution:
    weights: np.ndarray
    value: float


def lp_oracle(rewards, kappa: float) -> LpSolution:
    """Exact optimum of max sum(w r)/N s.t. 0 <= w <= 1/kappa, sum(w)/N = 1.

    Greedy fill from the highest reward; the boundary sample takes the
    fractional remainder. Ties are filled in ascending index order.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise DomainError("rewards must be nonempty")
    if kappa > 1.0 or kappa <= 0.0:
        raise DomainError(f"infeasible kappa {kappa}: need 0 < kappa <= 1")
    n = r.size
    cap = 1.0 / kappa
    order = np.argsort(-r, kind="stable")
    # count full slots directly so an integer kappa*N leaves no float residue
    full = min(n, int(math.floor(n * kappa + 1e-9)))
    rest = n - full * cap
    w = np.zeros(n)
    w[order[:full]] = cap
    if full < n and rest > 1e-9 * cap:
        w[order[full]] = rest
    return LpSolution(w, float(w @ r) / n)


@dataclass
class FilterState:
    top_p: float = 0.5
    target_ratio: float = 0.5
    expand_rate: float = 1.02
    shrink_rate: float = 0.98
    min_p: float = 0.05
    max_p: float = 1.0
    adaptive: bool = True
    last_threshold: float = float("nan")
    sigma_subset: float = float("nan")
    sigma_batch: float = float("nan")

    def __post_init__(self):
        if self.expand_rate <= 0 or self.shrink_rate <= 0:
            raise ValueError("controller rates must be positive")
        self.top_p = min(self.max_p, max(self.min_p, self.top_p))

    @property
    def sigma_ratio(self) -> float:
        if not self.sigma_batch > 0:
            return float("nan")
        return self.sigma_subset / self.sigma_batch


@dataclass
class FilteredBatch:
    indices: np.ndarray
    threshold: float
    advantages: np.ndarray
    normalized: np.ndarray


def top_k_count(n: int, top_p: float) -> int:
    # int() truncation as in K <- int(N * P); the 1e-9 absorbs float error in N*P
    return max(1, int(n * top_p + 1e-9))


def select_top(rewards: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest rewards, ties to the lower index, in index order."""
    order = np.argsort(-rewards, kind="stable")
    return np.sort(order[:k])


def hard_filter(rewards, state: FilterState) -> FilteredBatch:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise DomainError("batch must be nonempty")
    idx = select_top(r, top_k_count(r.size, state.top_p))
    sel = r[idx]
    nu = float(sel.min())
    adv = sel - nu
    return FilteredBatch(idx, nu, adv, adv / (adv.std() + NORM_EPS))


def variance_feedback_update(state: FilterState, sigma_subset: float, sigma_batch: float) -> FilterState:
    """Multiplicative Top-P update; strict ``<`` expands, everything else shrinks."""
    if sigma_subset < 0 or sigma_batch < 0:
        raise DomainError("standard deviations must be nonnegative")
    state.sigma_subset, state.sigma_batch = float(sigma_subset), float(sigma_batch)
    if not state.adaptive:
        return state
    if sigma_subset < state.target_ratio * sigma_batch:
        state.top_p = min(state.max_p, state.top_p * state.expand_rate)
    else:
        state.top_p = max(state.min_p, state.top_p * state.shrink_rate)
    return state


def filter_and_update(rewards, state: FilterState) -> FilteredBatch:
    """One filtering step: select with the current P, then adjust P for the next batch."""
    r = np.asarray(rewards, dtype=np.float64)
    fb = hard_filter(r, state)
    state.last_threshold = fb.threshold
    variance_feedback_update(state, float(r[fb.indices].std()), float(r.std()))
    return fb


def exp_tilt_weights(filtered, temperature: float) -> np.ndarray:
    """exp(r/tau) over the samples that passed the filter, rescaled to mean 1.

    Accepts a :class:`FilteredBatch` (its advantages differ from the rewards
    by a constant, which the max-shift removes) or a plain reward array.
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    if isinstance(filtered, FilteredBatch):
        filtered = filtered.advantages
    r = np.asarray(filtered, dtype=np.float64)
    if r.size == 0:
        raise DomainError("filtered batch is empty")
    w = np.exp((r - r.max()) / temperature)
    return w / w.mean()
