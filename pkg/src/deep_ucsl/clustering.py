"""Pseudo-label estimation: K-means++, soft K-means with Sinkhorn-Knopp balancing,
soft-to-hard interpolation and assembly of the full pseudo-label matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIST_FLOOR = 1e-12
SINKHORN_WARMUP = 10


class DegenerateClusteringError(RuntimeError):
    pass


@dataclass(frozen=True)
class SkConfig:
    epsilon: float = 0.05
    n_sk_iters: int = 100
    n_kmeans_iters: int = 10
    tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.n_sk_iters < 1 or self.n_kmeans_iters < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class Centroids:
    means: np.ndarray
    epoch_tag: int = 0

    @property
    def k(self) -> int:
        return self.means.shape[0]


@dataclass
class PseudoLabelMatrix:
    q: np.ndarray
    hardness: float = 0.0


def kmeanspp_init(reprs_pos, k: int, seed) -> Centroids:
    """K-means++ seeding: first center uniform, the rest drawn with probability
    proportional to the squared distance to the nearest chosen center."""
    z = np.asarray(reprs_pos, dtype=np.float64)
    m = z.shape[0]
    if m < k:
        raise ValueError(f"insufficient samples for K-means++: {m} rows < K={k}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(m))]
    d2 = ((z - z[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= DIST_FLOOR:
            raise DegenerateClusteringError(f"fewer than K={k} distinct representations")
        idx = int(rng.choice(m, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((z - z[idx]) ** 2).sum(axis=1))
    return Centroids(z[chosen].copy())


def _sq_dists(z, means):
    return ((z[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)


def soft_assign(reprs_pos, centroids: Centroids) -> np.ndarray:
    """Inverse squared distance to each centroid, normalized per row."""
    z = np.asarray(reprs_pos, dtype=np.float64)
    inv = 1.0 / np.maximum(_sq_dists(z, centroids.means), DIST_FLOOR)
    return inv / inv.sum(axis=1, keepdims=True)


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _row_log_plan(log_kernel, g):
    a = log_kernel + g
    return a - _lse(a, axis=1)[:, None]


def _newton_step(log_kernel, g, plan, target):
    """Damped Newton step on the column potentials ``g`` (rows kept normalized).

    Column sums c(g) have Jacobian diag(c) - P^T P, singular along g + const;
    adding the rank-one term on that direction makes it invertible.
    Returns None when no step reduces the residual.
    """
    k = g.size
    c = plan.sum(axis=0)
    if c.min() < 1e-3 * target:
        # far from balanced; plain rescaling moves mass more safely
        return None
    resid = c - target
    jac = np.diag(c) - plan.T @ plan + np.ones((k, k)) / k
    try:
        step = np.linalg.solve(jac, -resid)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    norm = np.abs(resid).max()
    t = 1.0
    for _ in range(30):
        cand = g + t * step
        log_plan = _row_log_plan(log_kernel, cand)
        new_plan = np.exp(log_plan)
        if np.abs(new_plan.sum(axis=0) - target).max() < norm:
            return cand, log_plan, new_plan
        t /= 2
    return None


def sinkhorn_knopp(q, cfg: SkConfig = SkConfig()):
    """Balance ``q`` so rows sum to 1 and columns to M/K.

    Entries are tempered as ``q ** (1 / epsilon)`` and then alternately row- and
    column-rescaled (in log space). Nearly decomposable kernels make plain
    alternation crawl, so after a short warm-up each iteration is a damped
    Newton step on the column scalings instead, falling back to a plain
    rescaling whenever Newton makes no progress. Both target the same unique
    balanced matrix. ``epsilon == 0`` returns ``q`` untouched.

    Returns ``(balanced, converged)``; on non-convergence the iterate with the
    smallest column-marginal error is returned.
    """
    q = np.asarray(q, dtype=np.float64)
    if cfg.epsilon == 0:
        return q.copy(), True
    if np.any(q <= 0):
        raise ValueError("sinkhorn_knopp needs strictly positive entries")
    m, k = q.shape
    target = m / k
    log_kernel = np.log(q) / cfg.epsilon
    g = np.zeros(k)
    log_plan = _row_log_plan(log_kernel, g)
    plan = np.exp(log_plan)
    best, best_err = None, np.inf
    for it in range(cfg.n_sk_iters):
        newton = _newton_step(log_kernel, g, plan, target) if it >= SINKHORN_WARMUP else None
        if newton is None:
            # column rescaling followed by the row step, so rows stay exact
            g = g + np.log(target) - _lse(log_plan, axis=0)
            log_plan = _row_log_plan(log_kernel, g)
            plan = np.exp(log_plan)
        else:
            g, log_plan, plan = newton
        err = np.abs(plan.sum(axis=0) - target).max()
        if err < best_err:
            best, best_err = plan, err
        if err < cfg.tol:
            return plan, True
    return best, False


def one_hot_argmax(q) -> np.ndarray:
    q = np.asarray(q)
    out = np.zeros_like(q, dtype=np.float64)
    # np.argmax picks the first maximum, i.e. the lowest index on ties
    out[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return out


def hard_objective(reprs_pos, centroids: Centroids, assignment) -> float:
    """Sum of squared distances of each point to its assigned centroid."""
    z = np.asarray(reprs_pos, dtype=np.float64)
    return float(((z - centroids.means[np.asarray(assignment)]) ** 2).sum())


def soft_kmeans_sk(reprs_pos, k: int, cfg: SkConfig = SkConfig(), seed=0, trace=None):
    """SK-regularized soft K-means.

    K-means++ seeding, then ``cfg.n_kmeans_iters`` rounds of
    soft assignment -> Sinkhorn balancing -> one-hot argmax -> centroid update.
    Returns the balanced soft matrix for the final centroids and the centroids.
    ``trace``, when a list, receives the hard objective after each round.
    """
    z = np.asarray(reprs_pos, dtype=np.float64)
    cents = kmeanspp_init(z, k, seed)
    for _ in range(cfg.n_kmeans_iters):
        q, _ = sinkhorn_knopp(soft_assign(z, cents), cfg)
        hot = one_hot_argmax(q)
        counts = hot.sum(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size and cfg.epsilon == 0:
            raise DegenerateClusteringError(f"cluster {int(empty[0])} received no samples")
        means = cents.means.copy()
        filled = counts > 0
        means[filled] = (hot[:, filled].T @ z) / counts[filled, None]
        cents = Centroids(means, cents.epoch_tag)
        if trace is not None:
            trace.append(hard_objective(z, cents, hot.argmax(axis=1)))
    q, _ = sinkhorn_knopp(soft_assign(z, cents), cfg)
    return q, cents


def interpolate_soft_hard(q_soft, t, total) -> np.ndarray:
    """Blend ``(1 - t/T) * q + (t/T) * onehot(argmax q)``: soft at t=0, hard at t=T."""
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={total}")
    q_soft = np.asarray(q_soft, dtype=np.float64)
    if t == total:
        return one_hot_argmax(q_soft)
    a = t / total
    return (1.0 - a) * q_soft + a * one_hot_argmax(q_soft)


def assemble_pseudo_labels(q_pos, pos_index, n_total, labels, hardness=0.0) -> PseudoLabelMatrix:
    """Place positive rows at ``pos_index``; every control row is exactly 1/K."""
    q_pos = np.asarray(q_pos, dtype=np.float64)
    labels = np.asarray(labels)
    pos_index = np.asarray(pos_index, dtype=int)
    if labels.shape[0] != n_total:
        raise ValueError(f"labels length {labels.shape[0]} != n_total {n_total}")
    expected = np.flatnonzero(labels == 1)
    if pos_index.shape[0] != q_pos.shape[0] or not np.array_equal(np.sort(pos_index), expected):
        raise ValueError("index map inconsistent with labels: positive rows do not match y == +1")
    k = q_pos.shape[1]
    q = np.full((n_total, k), 1.0 / k)
    q[pos_index] = q_pos
    return PseudoLabelMatrix(q, float(hardness))
