"""Expectation-Maximization training loop and the BCE + K-means baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, nn
from .clustering import (
    Centroids,
    PseudoLabelMatrix,
    SkConfig,
    assemble_pseudo_labels,
    interpolate_soft_hard,
    soft_kmeans_sk,
)
from .data import LabeledDataset
from .losses import clustering_loss, moe_loss
from .nn import ModelConfig, ModelParams
from .reident import Permutation, apply_permutation, reidentify

log = logging.getLogger(__name__)

MAX_HALVINGS = 30


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "adam"
    w_moe: float = 1.0
    w_clu: float = 1.0
    sk: SkConfig = field(default_factory=SkConfig)
    full_batch: bool = False
    reident_epsilon: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.w_moe < 0 or self.w_clu < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    moe_loss: float
    clustering_loss: float
    equidistance_ratio: float
    hardness: float
    permutation: Permutation


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    HEADER = "epoch,elbo,moe_loss,clustering_loss,equidistance_ratio,hardness"

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        rows = [self.HEADER]
        for r in self.records:
            vals = [r.elbo, r.moe_loss, r.clustering_loss, r.equidistance_ratio, r.hardness]
            rows.append(",".join([str(r.epoch)] + [repr(float(v)) for v in vals]))
        return "\n".join(rows) + "\n"


class Optimizer:
    """Adam or SGD with momentum over a flat list of arrays."""

    def __init__(self, kind="adam", lr=1e-3, momentum=0.9, beta2=0.999, eps=1e-8):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.beta2, self.eps = beta2, eps
        self.m = self.v = None
        self.steps = 0

    def step(self, arrays, grads):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.steps += 1
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            if self.kind == "adam":
                self.m[i] = self.momentum * self.m[i] + (1 - self.momentum) * g
                self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
                m_hat = self.m[i] / (1 - self.momentum**self.steps)
                v_hat = self.v[i] / (1 - self.beta2**self.steps)
                out.append(a - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
            else:
                self.m[i] = self.momentum * self.m[i] + g
                out.append(a - self.lr * self.m[i])
        return out


@dataclass
class EmState:
    params: ModelParams
    centroids: Centroids | None
    q: PseudoLabelMatrix | None
    epoch: int
    optimizer: Optimizer
    last_permutation: Permutation | None = None


def elbo_lower_bound(params: ModelParams, dataset: LabeledDataset, q) -> float:
    """Q-weighted expert log-likelihood minus summed KL(Q || clustering head), full dataset."""
    q = q.q if isinstance(q, PseudoLabelMatrix) else np.asarray(q)
    z = nn.encode(params, dataset.X)
    n = len(dataset)
    return -n * (moe_loss(nn.expert_probs(params, z), dataset.y, q) + clustering_loss(nn.cluster_probs(params, z), q))


def equidistance_ratio(params, dataset, centroids: Centroids) -> float:
    """Largest over smallest distance from the control mean to the subgroup centroids (>= 1)."""
    if dataset.controls.size == 0:
        return float("nan")
    z = nn.encode(params, dataset.X[dataset.controls])
    d = np.linalg.norm(centroids.means - z.mean(axis=0), axis=1)
    return float(d.max() / max(d.min(), 1e-300))


def _check_dataset(dataset, k):
    if dataset.positives.size < k:
        raise ValueError(f"need at least K={k} positive samples, got {dataset.positives.size}")
    if dataset.controls.size < 1:
        raise ValueError("need at least one control sample")


def e_step(state: EmState, dataset: LabeledDataset, t: int, total: int, cfg: TrainConfig) -> EmState:
    """Estimate pseudo-labels with the encoder frozen.

    New clusters are relabeled onto the previous epoch's labels so that the
    heads, which were trained against those labels, stay aligned with them.
    """
    params = state.params
    pos = dataset.positives
    z_pos = nn.encode(params, dataset.X[pos])
    q_soft, cents = soft_kmeans_sk(z_pos, params.k, cfg.sk, seed=[cfg.seed, 1, t])
    q_pos = interpolate_soft_hard(q_soft, t, max(total, 1))
    sigma = Permutation.identity(params.k)
    if t > 0 and state.centroids is not None:
        sigma = reidentify(state.centroids, cents, cfg.reident_epsilon)
        cents = apply_permutation(sigma, cents)
        q_pos = apply_permutation(sigma, q_pos)
    cents.epoch_tag = t
    q = assemble_pseudo_labels(q_pos, pos, len(dataset), dataset.y, hardness=t / max(total, 1))
    return replace(state, centroids=cents, q=q, epoch=t, last_permutation=sigma)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def m_step(state: EmState, dataset: LabeledDataset, cfg: TrainConfig, epoch: int | None = None) -> EmState:
    """One epoch of first-order updates on the weighted losses with Q frozen."""
    epoch = state.epoch if epoch is None else epoch
    weights = (cfg.w_moe, cfg.w_clu)
    q = state.q.q
    params = state.params
    if cfg.learning_rate == 0:
        return state
    if cfg.full_batch:
        params = _line_search_step(params, dataset.X, dataset.y, q, weights, cfg.learning_rate, epoch)
        return replace(state, params=params)
    rng = np.random.default_rng([cfg.seed, 2, epoch])
    for b, idx in enumerate(_batches(len(dataset), cfg.batch_size, rng)):
        try:
            grads, _ = nn.backward(params, dataset.X[idx], dataset.y[idx], q[idx], weights)
        except FloatingPointError as exc:
            raise FloatingPointError(f"epoch {epoch}, batch {b}: {exc}") from None
        params = params.with_arrays(state.optimizer.step(params.arrays(), grads.arrays()))
    return replace(state, params=params)


def _line_search_step(params, X, y, q, weights, lr, epoch):
    try:
        grads, loss = nn.backward(params, X, y, q, weights)
    except FloatingPointError as exc:
        raise FloatingPointError(f"epoch {epoch}, full batch: {exc}") from None
    base, g = params.arrays(), grads.arrays()
    step = lr
    for _ in range(MAX_HALVINGS + 1):
        cand = params.with_arrays([a - step * ga for a, ga in zip(base, g)])
        new_loss = nn._loss_only(cand, X, y, q, weights)
        if np.isfinite(new_loss) and new_loss <= loss:
            return cand
        step /= 2
    return params


def _record(state, dataset, t):
    params, q = state.params, state.q.q
    z = nn.encode(params, dataset.X)
    l_moe = moe_loss(nn.expert_probs(params, z), dataset.y, q)
    l_clu = clustering_loss(nn.cluster_probs(params, z), q)
    elbo = -len(dataset) * (l_moe + l_clu)
    if not np.isfinite(elbo):
        raise FloatingPointError(f"epoch {t}: non-finite lower bound")
    return EpochRecord(
        epoch=t,
        elbo=elbo,
        moe_loss=l_moe,
        clustering_loss=l_clu,
        equidistance_ratio=equidistance_ratio(params, dataset, state.centroids),
        hardness=state.q.hardness,
        permutation=state.last_permutation,
    )


def init_state(dataset, model_cfg: ModelConfig, cfg: TrainConfig) -> EmState:
    _check_dataset(dataset, model_cfg.k_subgroups)
    if dataset.X.shape[1] != model_cfg.input_dim:
        raise ValueError(f"dataset has {dataset.X.shape[1]} features, model expects {model_cfg.input_dim}")
    opt = Optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum)
    return EmState(nn.init_params(model_cfg), None, None, 0, opt)


def train(dataset: LabeledDataset, model_cfg: ModelConfig, cfg: TrainConfig, callback=None):
    """Initial E-step, then ``cfg.epochs`` rounds of (M-step, E-step).

    Returns ``(params, centroids, history)``; the history holds one record per
    epoch, taken right after that epoch's E-step. ``callback(state, record)``
    is invoked after each epoch when given.
    """
    total = cfg.epochs
    state = e_step(init_state(dataset, model_cfg, cfg), dataset, 0, total, cfg)
    history = TrainHistory()
    for t in range(1, total + 1):
        state = m_step(state, dataset, cfg, epoch=t)
        state = e_step(state, dataset, t, total, cfg)
        rec = _record(state, dataset, t)
        history.records.append(rec)
        log.debug("epoch %d elbo %.6f ratio %.3f", t, rec.elbo, rec.equidistance_ratio)
        if callback is not None:
            callback(state, rec)
    return state.params, state.centroids, history


def train_baseline_bce_kmeans(dataset: LabeledDataset, model_cfg: ModelConfig, cfg: TrainConfig):
    """Encoder plus one sigmoid classifier trained with plain BCE, then plain
    K-means (no Sinkhorn) on the representations of positive samples.

    The classifier is copied into every expert row, so the mixture prediction
    equals the single classifier whatever the gating.
    """
    k = model_cfg.k_subgroups
    _check_dataset(dataset, k)
    full = nn.init_params(model_cfg)
    we, be = full.expert_head
    wc, bc = full.cluster_head
    params = ModelParams(full.encoder, (we[:1], be[:1]), (wc[:1], bc[:1]), full.activation)
    ones = np.ones((len(dataset), 1))
    opt = Optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum)
    state = EmState(params, None, PseudoLabelMatrix(ones, 1.0), 0, opt)
    bce_cfg = replace(cfg, w_moe=1.0, w_clu=0.0)
    for t in range(1, cfg.epochs + 1):
        state = m_step(state, dataset, bce_cfg, epoch=t)
    params = state.params
    z_pos = nn.encode(params, dataset.X[dataset.positives])
    _, cents = soft_kmeans_sk(z_pos, k, replace(cfg.sk, epsilon=0.0), seed=[cfg.seed, 3])
    cents.epoch_tag = cfg.epochs
    w1, b1 = params.expert_head
    out = ModelParams(
        params.encoder,
        (np.repeat(w1, k, axis=0), np.repeat(b1, k)),
        (np.zeros((k, model_cfg.repr_dim)), np.zeros(k)),
        params.activation,
    )
    return out, cents
