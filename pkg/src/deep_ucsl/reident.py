"""Bijective matching of subgroup labels between consecutive epochs."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .clustering import Centroids, PseudoLabelMatrix, SkConfig, sinkhorn_knopp

BRUTE_FORCE_MAX_K = 8


@dataclass(frozen=True)
class Permutation:
    """``sigma[k] = j``: new cluster ``j`` inherits the previous label ``k``."""

    sigma: tuple[int, ...]

    def __post_init__(self):
        sigma = tuple(int(s) for s in self.sigma)
        if sorted(sigma) != list(range(len(sigma))):
            raise ValueError(f"not a permutation: {sigma}")
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def identity(cls, k):
        return cls(tuple(range(k)))

    @property
    def k(self):
        return len(self.sigma)

    def inverse(self) -> "Permutation":
        inv = [0] * self.k
        for i, s in enumerate(self.sigma):
            inv[s] = i
        return Permutation(tuple(inv))

    def is_identity(self) -> bool:
        return self.sigma == tuple(range(self.k))

    def __str__(self):
        return "-".join(map(str, self.sigma))


def centroid_similarity(mu_prev, mu_next) -> np.ndarray:
    """Cosine similarity, entry (i, j) between previous centroid i and new centroid j."""
    a = np.asarray(mu_prev, dtype=np.float64)
    b = np.asarray(mu_next, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"centroid shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("degenerate centroid: zero norm")
    return (a @ b.T) / np.outer(na, nb)


def _brute_force(sim):
    k = sim.shape[0]
    rows = np.arange(k)
    best = max(itertools.permutations(range(k)), key=lambda p: sim[rows, list(p)].sum())
    return Permutation(best)


def _greedy_round(plan):
    plan = plan.copy()
    k = plan.shape[0]
    sigma = [0] * k
    for _ in range(k):
        i, j = np.unravel_index(np.argmax(plan), plan.shape)
        sigma[i] = int(j)
        plan[i, :] = -np.inf
        plan[:, j] = -np.inf
    return Permutation(tuple(sigma))


def reidentify(mu_prev, mu_next, epsilon=0.01, n_iters=1000) -> Permutation:
    """Match new centroids to previous labels.

    For each new centroid the previous labels get a softmax over cosine
    similarities; the matrix is balanced by Sinkhorn-Knopp (unit marginals)
    and rounded to a permutation by repeatedly taking the global maximum.
    """
    sim = centroid_similarity(_means(mu_prev), _means(mu_next))
    k = sim.shape[0]
    # rows: previous labels, columns: new centroids; normalized over previous labels
    e = np.exp(sim - sim.max(axis=0, keepdims=True))
    prob = e / e.sum(axis=0, keepdims=True)
    plan, converged = sinkhorn_knopp(prob, SkConfig(epsilon=epsilon, n_sk_iters=n_iters, tol=1e-9))
    if not converged:
        if k <= BRUTE_FORCE_MAX_K:
            return _brute_force(sim)
        raise RuntimeError(f"Sinkhorn did not converge for K={k} and K! search is too large")
    return _greedy_round(plan)


def _means(x):
    return x.means if isinstance(x, Centroids) else x


def apply_permutation(sigma: Permutation, target):
    """Reorder the cluster axis so that index ``k`` holds what was at ``sigma[k]``.

    Accepts Centroids (rows), PseudoLabelMatrix or a plain N x K array (columns),
    or a head ``(weight, bias)`` tuple (rows).
    """
    idx = list(sigma.sigma)
    if isinstance(target, Centroids):
        _check_k(sigma, target.means.shape[0])
        return Centroids(target.means[idx].copy(), target.epoch_tag)
    if isinstance(target, PseudoLabelMatrix):
        _check_k(sigma, target.q.shape[1])
        return PseudoLabelMatrix(target.q[:, idx].copy(), target.hardness)
    if isinstance(target, tuple):
        w, b = target
        _check_k(sigma, w.shape[0])
        return w[idx].copy(), b[idx].copy()
    arr = np.asarray(target)
    _check_k(sigma, arr.shape[1])
    return arr[:, idx].copy()


def _check_k(sigma, k):
    if sigma.k != k:
        raise ValueError(f"permutation has K={sigma.k}, target has K={k}")
