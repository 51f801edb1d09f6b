"""The two M-step losses, both averaged over the batch and minimized."""
import numpy as np

ROW_SUM_TOL = 1e-6
PROB_FLOOR = 1e-12


def _check_rows(q, name):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {q.shape}")
    sums = q.sum(axis=1)
    if np.any(q < 0) or np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"{name} rows must be probability vectors (row {bad} sums to {sums[bad]!r})")
    return q


def moe_loss(expert_p, labels, q) -> float:
    """Q-weighted binary cross-entropy of the K experts.

    ``-(1/B) sum_i sum_k q_ik [t_i log p_ik + (1 - t_i) log(1 - p_ik)]`` with ``t = (y + 1) / 2``.
    Controls take part with their uniform rows of ``q``.
    """
    q = _check_rows(q, "q")
    p = np.asarray(expert_p, dtype=np.float64)
    t = (np.asarray(labels, dtype=np.float64).reshape(-1, 1) + 1.0) / 2.0
    if p.shape != q.shape:
        raise ValueError(f"expert_p shape {p.shape} does not match q shape {q.shape}")
    ll = t * np.log(p) + (1.0 - t) * np.log1p(-p)
    return float(-(q * ll).sum() / p.shape[0])


def clustering_loss(cluster_p, q) -> float:
    """Mean per-sample KL(q_i || s_i), with 0 log 0 = 0 and ``s`` floored at 1e-12."""
    q = _check_rows(q, "q")
    s = _check_rows(cluster_p, "cluster_p")
    if s.shape != q.shape:
        raise ValueError(f"cluster_p shape {s.shape} does not match q shape {q.shape}")
    s = np.maximum(s, PROB_FLOOR)
    pos = q > 0
    kl = np.zeros_like(q)
    kl[pos] = q[pos] * (np.log(q[pos]) - np.log(s[pos]))
    return float(kl.sum() / q.shape[0])
