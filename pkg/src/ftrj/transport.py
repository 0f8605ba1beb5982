"""Minibatch OT couplings under asymmetric costs and W1 evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

logger = logging.getLogger(__name__)


class TransportError(RuntimeError):
    pass


@dataclass
class Coupling:
    """Sparse plan: ``weight[k]`` mass moves from ``source[k]`` to ``target[k]``."""

    source: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    shape: tuple[int, int]

    def dense(self) -> np.ndarray:
        p = np.zeros(self.shape)
        np.add.at(p, (self.source, self.target), self.weight)
        return p

    def sample_pairs(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        k = rng.choice(len(self.weight), size=n, p=self.weight / self.weight.sum())
        return self.source[k], self.target[k]

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return self.source, self.target


def build_cost(batch0, batch1, cost_fn: Callable, pairwise: bool = False) -> np.ndarray:
    """``C[i, j] = cost_fn(batch0[i], batch1[j])``; rows are the source (earlier) batch.

    With ``pairwise=True`` the function receives both batches and returns the
    whole matrix.
    """
    b0, b1 = np.asarray(batch0, dtype=np.float64), np.asarray(batch1, dtype=np.float64)
    if len(b0) == 0 or len(b1) == 0:
        raise TransportError("empty batch")
    if pairwise:
        c = np.asarray(cost_fn(b0, b1), dtype=np.float64)
    else:
        c = np.array([[cost_fn(x, y) for y in b1] for x in b0], dtype=np.float64)
    if not np.isfinite(c).all():
        raise TransportError("non-finite cost")
    return c


def _assignment(cost: np.ndarray) -> np.ndarray:
    if np.ptp(cost) == 0:
        return np.arange(cost.shape[0])
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def sinkhorn_plan(cost: np.ndarray, eps: float, n_iter: int = 500, tol: float = 1e-6,
                  a=None, b=None) -> np.ndarray:
    """Log-domain entropic plan with uniform (or given) marginals."""
    m, k = cost.shape
    log_a = np.log(np.full(m, 1.0 / m) if a is None else np.asarray(a))
    log_b = np.log(np.full(k, 1.0 / k) if b is None else np.asarray(b))
    log_k = -cost / eps
    f = np.zeros(m)
    g = np.zeros(k)
    for it in range(n_iter):
        f = log_a - logsumexp(log_k + g[None, :], axis=1)
        g = log_b - logsumexp(log_k + f[:, None], axis=0)
        if it % 10 == 9 or it == n_iter - 1:
            plan = np.exp(log_k + f[:, None] + g[None, :])
            if np.abs(plan.sum(1) - np.exp(log_a)).max() <= tol:
                return plan
    plan = np.exp(log_k + f[:, None] + g[None, :])
    logger.warning("sinkhorn did not reach marginal tolerance %.1e in %d iterations", tol, n_iter)
    return plan


def ot_coupling(cost, sinkhorn_iters: int = 500) -> Coupling:
    """Exact assignment for square costs, entropic plan otherwise."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise TransportError("cost must be a non-empty matrix")
    if not np.isfinite(cost).all():
        raise TransportError("non-finite cost")
    m, k = cost.shape
    if m == k:
        perm = _assignment(cost)
        return Coupling(np.arange(m), perm, np.full(m, 1.0 / m), (m, k))
    eps = 0.05 * max(cost.mean(), 1e-12)
    plan = sinkhorn_plan(cost, eps, sinkhorn_iters)
    src, dst = np.nonzero(plan > 0)
    w = plan[src, dst]
    return Coupling(src, dst, w / w.sum(), (m, k))


def assignment_cost(cost) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    perm = _assignment(cost)
    return float(cost[np.arange(len(perm)), perm].mean())


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def wasserstein1(a, b, eps_fraction: float = 0.01) -> float:
    """W1 with Euclidean ground cost.

    Equal sizes use the exact assignment. Unequal sizes fall back to a
    debiased Sinkhorn estimate, which is approximate.
    """
    a, b = np.atleast_2d(np.asarray(a, dtype=np.float64)), np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise TransportError("empty point set")
    if a.shape[1] != b.shape[1]:
        raise TransportError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == len(b):
        return assignment_cost(_euclidean(a, b))
    cab = _euclidean(a, b)
    eps = eps_fraction * max(cab.mean(), 1e-12)

    def ent(c):
        return float((sinkhorn_plan(c, eps, n_iter=2000) * c).sum())

    return max(ent(cab) - 0.5 * ent(_euclidean(a, a)) - 0.5 * ent(_euclidean(b, b)), 0.0)


def evaluate_marginals(sim: Mapping[float, np.ndarray], truth: Mapping[float, np.ndarray]) -> dict:
    """Per-timepoint W1 between generated and observed marginals plus their mean."""
    missing = set(truth) - set(sim)
    if missing:
        raise TransportError(f"no generated samples for timepoints {sorted(missing)}")
    per_t = {float(t): wasserstein1(sim[t], truth[t]) for t in sorted(truth)}
    return {"per_t": per_t, "mean": float(np.mean(list(per_t.values())))}
