"""Dense feed-forward network with hand-written backpropagation.

The network has three parts that share one representation:

* an encoder (stack of affine layers, activation between them, final layer affine),
* a K-output expert head whose sigmoid outputs are per-subgroup P(y=+1),
* a K-output clustering head whose softmax outputs are subgroup probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    repr_dim: int = 32
    k_subgroups: int = 2
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.repr_dim, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.k_subgroups < 2:
            raise ValueError(f"k_subgroups must be >= 2, got {self.k_subgroups}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass
class ModelParams:
    """Weights of encoder, expert head and clustering head.

    Weight matrices are stored ``(out, in)``; a layer computes ``x @ W.T + b``.
    Row ``k`` of each head belongs to subgroup ``k``.
    """

    encoder: list[tuple[np.ndarray, np.ndarray]]
    expert_head: tuple[np.ndarray, np.ndarray]
    cluster_head: tuple[np.ndarray, np.ndarray]
    activation: str = "relu"

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.encoder:
            out += [w, b]
        out += list(self.expert_head) + list(self.cluster_head)
        return out

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.encoder)):
            out += [f"encoder.{i}.weight", f"encoder.{i}.bias"]
        return out + ["expert.weight", "expert.bias", "cluster.weight", "cluster.bias"]

    def with_arrays(self, arrays) -> "ModelParams":
        arrays = list(arrays)
        n = len(self.encoder)
        enc = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(n)]
        return ModelParams(
            enc,
            (arrays[2 * n], arrays[2 * n + 1]),
            (arrays[2 * n + 2], arrays[2 * n + 3]),
            self.activation,
        )

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    @property
    def k(self) -> int:
        return self.expert_head[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.encoder[0][0].shape[1]

    @property
    def repr_dim(self) -> int:
        return self.encoder[-1][0].shape[0]


# Gradients share the parameter shape-tree; the partial derivative of each
# array sits where the array itself sits.
Gradients = ModelParams


def init_params(config: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    widths = [config.input_dim, *config.hidden_dims, config.repr_dim]

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)

    encoder = [layer(a, b) for a, b in zip(widths[:-1], widths[1:])]
    expert = layer(config.repr_dim, config.k_subgroups)
    cluster = layer(config.repr_dim, config.k_subgroups)
    return ModelParams(encoder, expert, cluster, config.activation)


def _act(name, x):
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_grad(name, pre, post):
    return (pre > 0).astype(pre.dtype) if name == "relu" else 1.0 - post**2


def _check_width(batch, width, what):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ValueError(f"{what}: expected shape (B, {width}), got {batch.shape}")
    return batch


def _forward_encoder(params, batch):
    h = _check_width(batch, params.input_dim, "encode")
    cache = [(h, None)]
    last = len(params.encoder) - 1
    for i, (w, b) in enumerate(params.encoder):
        pre = h @ w.T + b
        h = pre if i == last else _act(params.activation, pre)
        cache.append((h, pre))
    return h, cache


def encode(params: ModelParams, batch) -> np.ndarray:
    return _forward_encoder(params, batch)[0]


def _logits(head, reprs, repr_dim):
    reprs = _check_width(reprs, repr_dim, "head")
    w, b = head
    return np.clip(reprs @ w.T + b, -LOGIT_CLAMP, LOGIT_CLAMP)


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(a):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def expert_probs(params: ModelParams, reprs) -> np.ndarray:
    """Per-expert P(y=+1 | x, c=k); rows are independent Bernoullis, not normalized."""
    return sigmoid(_logits(params.expert_head, reprs, params.repr_dim))


def cluster_probs(params: ModelParams, reprs) -> np.ndarray:
    return softmax(_logits(params.cluster_head, reprs, params.repr_dim))


def backward(params: ModelParams, batch, labels, q, loss_weights=(1.0, 1.0)):
    """Analytic gradient of ``w_moe * L_moe + w_clu * L_clu`` with ``q`` frozen.

    Returns ``(gradients, total_loss)``. Both heads backpropagate into the encoder.
    """
    w_moe, w_clu = (float(v) for v in loss_weights)
    if w_moe < 0 or w_clu < 0:
        raise ValueError("loss weights must be non-negative")
    q = np.asarray(q, dtype=np.float64)
    labels = np.asarray(labels)
    z, cache = _forward_encoder(params, batch)
    n = z.shape[0]

    we, be = params.expert_head
    wc, bc = params.cluster_head
    raw_e = z @ we.T + be
    raw_c = z @ wc.T + bc
    a_e = np.clip(raw_e, -LOGIT_CLAMP, LOGIT_CLAMP)
    a_c = np.clip(raw_c, -LOGIT_CLAMP, LOGIT_CLAMP)
    p = sigmoid(a_e)
    s = softmax(a_c)

    l_moe = losses.moe_loss(p, labels, q) if w_moe else 0.0
    l_clu = losses.clustering_loss(s, q) if w_clu else 0.0
    total = w_moe * l_moe + w_clu * l_clu
    for name, value in (("moe_loss", l_moe), ("clustering_loss", l_clu)):
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite {name}: {value}")

    y01 = (labels.reshape(-1, 1) + 1) / 2.0
    # clamped logits carry no gradient
    d_ae = w_moe * q * (p - y01) / n * (np.abs(raw_e) < LOGIT_CLAMP)
    d_ac = w_clu * (s - q) / n * (np.abs(raw_c) < LOGIT_CLAMP)

    g_expert = (d_ae.T @ z, d_ae.sum(axis=0))
    g_cluster = (d_ac.T @ z, d_ac.sum(axis=0))
    dh = d_ae @ we + d_ac @ wc

    g_encoder = []
    last = len(params.encoder) - 1
    for i in range(last, -1, -1):
        w, _ = params.encoder[i]
        h_in = cache[i][0]
        h_out, pre = cache[i + 1]
        d_pre = dh if i == last else dh * _act_grad(params.activation, pre, h_out)
        g_encoder.append((d_pre.T @ h_in, d_pre.sum(axis=0)))
        dh = d_pre @ w
    g_encoder.reverse()
    return ModelParams(g_encoder, g_expert, g_cluster, params.activation), float(total)


def grad_check(params, batch, labels, q, step=1e-4, loss_weights=(1.0, 1.0), grads=None):
    """Largest relative error between analytic and central-difference gradients.

    ``grads`` overrides the analytic gradient being checked.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    if grads is None:
        grads = backward(params, batch, labels, q, loss_weights)[0]
    base = [a.copy() for a in params.arrays()]
    worst = 0.0
    for idx, (arr, g) in enumerate(zip(base, grads.arrays())):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = _loss_only(params.with_arrays(base), batch, labels, q, loss_weights)
            flat[j] = orig - step
            lm = _loss_only(params.with_arrays(base), batch, labels, q, loss_weights)
            flat[j] = orig
            numeric = (lp - lm) / (2 * step)
            denom = max(abs(gflat[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[j] - numeric) / denom)
    return worst


def _loss_only(params, batch, labels, q, loss_weights):
    w_moe, w_clu = loss_weights
    z = encode(params, batch)
    total = 0.0
    if w_moe:
        total += w_moe * losses.moe_loss(expert_probs(params, z), labels, q)
    if w_clu:
        total += w_clu * losses.clustering_loss(cluster_probs(params, z), q)
    return total
