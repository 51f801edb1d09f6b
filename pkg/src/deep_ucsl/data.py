"""Synthetic benchmark, dataset CSV files, checkpoints and PCA export."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ortho_group

from .clustering import Centroids
from .nn import ModelConfig, ModelParams

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "deep-ucsl-checkpoint"


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValueError(f"X must be a non-empty N x D matrix, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("y length does not match X")
        if not np.all(np.isin(self.y, (-1, 1))):
            raise ValueError("y must be -1 or +1")
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=int)
            if self.c.shape != self.y.shape:
                raise ValueError("c length does not match y")
            if np.any((self.c >= 0) & (self.y != 1)) or np.any(self.c < -1):
                raise ValueError("c must be -1 or a subgroup index, and >= 0 only for y = +1")

    def __len__(self):
        return self.X.shape[0]

    @property
    def positives(self):
        return np.flatnonzero(self.y == 1)

    @property
    def controls(self):
        return np.flatnonzero(self.y == -1)


@dataclass(frozen=True)
class SynthConfig:
    n_pos: int = 400
    n_neg: int = 400
    k: int = 2
    d_shared: int = 8
    d_spec: int = 2
    nuisance_scale: float = 3.0
    subgroup_separation: float = 1.0
    noise_sigma: float = 0.3
    mix: str = "random_rotation"
    seed: int = 0

    def __post_init__(self):
        if self.n_pos < 0 or self.n_neg < 0 or self.n_pos + self.n_neg < 1:
            raise ValueError("need n_pos, n_neg >= 0 and at least one sample")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.d_shared < 0 or self.d_spec < 1 or self.d_shared + self.d_spec < 2:
            raise ValueError("need d_spec >= 1 and d_shared + d_spec >= 2")
        if min(self.nuisance_scale, self.subgroup_separation, self.noise_sigma) <= 0:
            raise ValueError("scales must be > 0")
        if self.mix not in ("none", "random_rotation"):
            raise ValueError(f"unknown mix {self.mix!r}")
        if self.d_spec < self.k - 1:
            raise ValueError(
                f"simplex does not fit: {self.k} subgroups need d_spec >= {self.k - 1}, got {self.d_spec}"
            )

    @property
    def dim(self):
        return self.d_shared + self.d_spec


def simplex_vertices(k, dim, separation):
    """K centered regular-simplex vertices in ``dim`` coordinates, pairwise distance 2*separation."""
    centered = np.eye(k) - 1.0 / k
    # orthonormal coordinates of the (K-1)-dimensional affine hull
    u, s, _ = np.linalg.svd(centered)
    coords = u[:, : k - 1] * s[: k - 1]
    signs = np.sign(coords[np.argmax(np.abs(coords), axis=0), range(k - 1)])
    coords = coords * np.where(signs == 0, 1.0, signs)
    out = np.zeros((k, dim))
    out[:, : k - 1] = coords * (2.0 * separation / np.sqrt(2.0))
    return out


def mixing_matrix(cfg: SynthConfig) -> np.ndarray:
    """Orthogonal matrix R with X = [s, u] @ R.T (identity when mix is 'none')."""
    if cfg.mix == "none":
        return np.eye(cfg.dim)
    rot_seed = np.random.SeedSequence([cfg.seed, 0])
    return ortho_group.rvs(cfg.dim, random_state=np.random.default_rng(rot_seed))


def nuisance_direction(cfg: SynthConfig) -> np.ndarray:
    return np.ones(cfg.d_shared) / np.sqrt(cfg.d_shared)


def gen_synthetic(cfg: SynthConfig, stream: int = 1) -> LabeledDataset:
    """Draw a dataset whose dominant variation is shared by both classes.

    Shared coordinates: two-mode Gaussian mixture at +-nuisance_scale along a
    fixed direction. Disease-specific coordinates: subgroup simplex vertex plus
    noise for patients, noise around the simplex centroid for controls.
    ``stream`` selects the sample draw; the mixing rotation depends on the seed only,
    so train/test streams share one generative distribution.
    """
    if stream < 1:
        raise ValueError("stream must be >= 1 (stream 0 is reserved for the rotation)")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stream]))
    n = cfg.n_pos + cfg.n_neg
    y = np.concatenate([np.ones(cfg.n_pos, dtype=int), -np.ones(cfg.n_neg, dtype=int)])
    c = np.full(n, -1)
    c[: cfg.n_pos] = rng.permutation(np.arange(cfg.n_pos) % cfg.k)

    mode = rng.choice((-1.0, 1.0), size=n)
    shared = mode[:, None] * cfg.nuisance_scale * nuisance_direction(cfg)
    shared = shared + cfg.noise_sigma * rng.standard_normal((n, cfg.d_shared))

    vertices = simplex_vertices(cfg.k, cfg.d_spec, cfg.subgroup_separation)
    spec = cfg.noise_sigma * rng.standard_normal((n, cfg.d_spec))
    pos = c >= 0
    spec[pos] += vertices[c[pos]]

    latent = np.hstack([shared, spec])
    order = rng.permutation(n)
    X = latent @ mixing_matrix(cfg).T
    return LabeledDataset(X[order], y[order], c[order])


def save_dataset(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    d = dataset.X.shape[1]
    c = dataset.c if dataset.c is not None else np.full(len(dataset), -1)
    lines = [",".join(["y", "c"] + [f"x{j}" for j in range(d)])]
    for yi, ci, row in zip(dataset.y, c, dataset.X):
        lines.append(",".join([f"{yi:+d}", str(int(ci))] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path) -> LabeledDataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError("empty file", 1)
    header = text[0].strip().split(",")
    d = len(header) - 2
    if d < 1 or header[:2] != ["y", "c"] or header[2:] != [f"x{j}" for j in range(d)]:
        raise ParseError(f"malformed header {text[0]!r}; expected 'y,c,x0,...'", 1)
    ys, cs, rows = [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d + 2:
            raise ParseError(f"expected {d + 2} cells, got {len(cells)}", lineno)
        try:
            yv = int(cells[0])
            cv = int(cells[1])
            xv = [float(v) for v in cells[2:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", lineno) from None
        if yv not in (-1, 1):
            raise ParseError("y must be -1 or +1", lineno)
        if cv < -1:
            raise ParseError("c must be -1 or a non-negative subgroup index", lineno)
        if cv >= 0 and yv != 1:
            raise ParseError("c >= 0 is only allowed for y = +1", lineno)
        if not all(np.isfinite(xv)):
            raise ParseError("non-finite feature value", lineno)
        ys.append(yv)
        cs.append(cv)
        rows.append(xv)
    if not rows:
        raise ParseError("no data rows", len(text))
    return LabeledDataset(np.array(rows), np.array(ys), np.array(cs))


# --- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ModelParams
    centroids: Centroids
    mode: str = "deep-ucsl"
    train_digest: str = ""
    metrics: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @property
    def subgroup_source(self):
        # the baseline has no clustering head; its subgroups come from K-means
        return "centroids" if self.mode == "bce-kmeans" else "head"


def config_digest(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt_array(name, arr):
    arr = np.atleast_1d(np.asarray(arr, dtype=np.float64))
    rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
    out = [f"[array {name}]", "shape=" + ",".join(map(str, arr.shape))]
    out += [",".join(repr(float(v)) for v in row) for row in rows]
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg = ckpt.model_cfg
    lines = [
        CHECKPOINT_MAGIC,
        f"format_version={ckpt.format_version}",
        f"mode={ckpt.mode}",
        f"train_digest={ckpt.train_digest}",
        "[model]",
        f"input_dim={cfg.input_dim}",
        "hidden_dims=" + ",".join(map(str, cfg.hidden_dims)),
        f"repr_dim={cfg.repr_dim}",
        f"k_subgroups={cfg.k_subgroups}",
        f"activation={cfg.activation}",
        f"seed={cfg.seed}",
        "[metrics]",
    ]
    lines += [f"{k}={v}" for k, v in sorted(ckpt.metrics.items())]
    lines.append(f"[centroids epoch_tag={ckpt.centroids.epoch_tag}]")
    lines += _fmt_array("centroids", ckpt.centroids.means)[1:]
    for name, arr in zip(ckpt.params.names(), ckpt.params.arrays()):
        lines += _fmt_array(name, arr)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def _read_array(lines, pos):
    lineno = pos + 1
    if pos >= len(lines) or not lines[pos].startswith("shape="):
        raise ParseError("missing shape header", lineno)
    try:
        shape = tuple(int(s) for s in lines[pos][6:].split(","))
    except ValueError:
        raise ParseError(f"bad shape header {lines[pos]!r}", lineno) from None
    n_rows = shape[0] if len(shape) > 1 else 1
    width = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    values = []
    for r in range(n_rows):
        i = pos + 1 + r
        if i >= len(lines) or lines[i].startswith("[") or lines[i] == "end":
            raise ParseError(f"truncated array: expected {n_rows} rows of values", i + 1)
        cells = lines[i].split(",") if width else []
        if len(cells) != width:
            raise ParseError(f"shape header says {width} values per row, found {len(cells)}", i + 1)
        try:
            values += [float(v) for v in cells]
        except ValueError:
            raise ParseError("non-numeric array value", i + 1) from None
    return np.array(values, dtype=np.float64).reshape(shape), pos + 1 + n_rows


def load_checkpoint(path) -> Checkpoint:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ParseError("not a deep-ucsl checkpoint", 1)
    if len(lines) < 2 or not lines[1].startswith("format_version="):
        raise ParseError("missing format_version", 2)
    version = int(lines[1].split("=", 1)[1])
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint format_version {version} (expected {CHECKPOINT_VERSION})", 2)
    if lines[-1] != "end":
        raise ParseError("truncated checkpoint: missing end marker", len(lines))

    header, model, metrics = {}, {}, {}
    section = header
    arrays, centroids, epoch_tag = {}, None, 0
    pos = 2
    while pos < len(lines) - 1:
        line = lines[pos]
        if line == "[model]":
            section, pos = model, pos + 1
        elif line == "[metrics]":
            section, pos = metrics, pos + 1
        elif line.startswith("[centroids"):
            epoch_tag = int(line.split("epoch_tag=")[1].rstrip("]"))
            centroids, pos = _read_array(lines, pos + 1)
        elif line.startswith("[array "):
            name = line[len("[array ") : -1]
            arrays[name], pos = _read_array(lines, pos + 1)
        elif "=" in line:
            key, value = line.split("=", 1)
            section[key] = value
            pos += 1
        else:
            raise ParseError(f"unexpected line {line!r}", pos + 1)
    try:
        cfg = ModelConfig(
            input_dim=int(model["input_dim"]),
            hidden_dims=tuple(int(h) for h in model["hidden_dims"].split(",") if h),
            repr_dim=int(model["repr_dim"]),
            k_subgroups=int(model["k_subgroups"]),
            activation=model["activation"],
            seed=int(model["seed"]),
        )
    except KeyError as exc:
        raise ParseError(f"missing model field {exc}") from None
    n_layers = len(cfg.hidden_dims) + 1
    template = ModelParams([(None, None)] * n_layers, (None, None), (None, None), cfg.activation)
    try:
        params = template.with_arrays([arrays[n] for n in template.names()])
    except KeyError as exc:
        raise ParseError(f"missing array {exc}") from None
    _check_shapes(cfg, params)
    if centroids is None or centroids.shape != (cfg.k_subgroups, cfg.repr_dim):
        raise ParseError(f"centroid shape inconsistent with model config")
    parsed_metrics = {k: float(v) if _is_float(v) else v for k, v in metrics.items()}
    return Checkpoint(
        cfg,
        params,
        Centroids(centroids, epoch_tag),
        mode=header.get("mode", "deep-ucsl"),
        train_digest=header.get("train_digest", ""),
        metrics=parsed_metrics,
        format_version=version,
    )


def _is_float(v):
    try:
        float(v)
        return True
    except ValueError:
        return False


def _check_shapes(cfg, params):
    widths = [cfg.input_dim, *cfg.hidden_dims, cfg.repr_dim]
    for i, ((w, b), (a, o)) in enumerate(zip(params.encoder, zip(widths[:-1], widths[1:]))):
        if w.shape != (o, a) or b.shape != (o,):
            raise ParseError(f"encoder layer {i} shape {w.shape}/{b.shape} inconsistent with config")
    for name, (w, b) in (("expert", params.expert_head), ("cluster", params.cluster_head)):
        if w.shape != (cfg.k_subgroups, cfg.repr_dim) or b.shape != (cfg.k_subgroups,):
            raise ParseError(f"{name} head shape {w.shape} inconsistent with config")


# --- PCA -------------------------------------------------------------------


@dataclass
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # out_dims x R
    explained: np.ndarray

    def transform(self, z):
        return (np.asarray(z, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(z, out_dims=2) -> PcaProjection:
    """Principal axes from the covariance eigendecomposition.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    z = np.asarray(z, dtype=np.float64)
    if out_dims not in (2, 3):
        raise ValueError("out_dims must be 2 or 3")
    n, r = z.shape
    attainable = min(n - 1, r)
    if attainable < out_dims:
        raise ValueError(f"rank-deficient: attained rank {attainable} < out_dims {out_dims}")
    mean = z.mean(axis=0)
    cov = np.cov(z - mean, rowvar=False).reshape(r, r)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        raise ValueError("rank-deficient: attained rank 0 (all rows identical)")
    comps = evecs[:, :out_dims].T
    lead = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(out_dims), lead])[:, None]
    return PcaProjection(mean, comps, evals[:out_dims] / total)


def pca_project(z, out_dims=2, fit_on=None):
    """Project ``z`` on principal axes fitted on ``fit_on`` (default: ``z`` itself).

    Returns ``(coords, explained_variance_fractions)``.
    """
    pca = fit_pca(z if fit_on is None else fit_on, out_dims)
    return pca.transform(z), pca.explained


def save_projection(coords, dataset: LabeledDataset, path) -> None:
    dims = coords.shape[1]
    c = dataset.c if dataset.c is not None else np.full(len(dataset), -1)
    lines = [",".join([f"pc{j}" for j in range(dims)] + ["y", "c"])]
    for row, yi, ci in zip(coords, dataset.y, c):
        lines.append(",".join([repr(float(v)) for v in row] + [f"{yi:+d}", str(int(ci))]))
    Path(path).write_text("\n".join(lines) + "\n")
