"""Pseudo-labelling by k-means + AHC and supervised AAM-softmax retraining."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .corpus import AugmentPolicy, Corpus, augment, crop
from .dino import embed_corpus
from .errors import ConfigError, DataError
from .nn import Encoder, EncoderConfig, OptimizerState, Params
from .scoring import Trial, eer, preprocess, score_trials

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# k-means
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: tuple[float, ...]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:  # remaining points coincide with chosen centres
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt : nxt + 1]).ravel())
    return x[chosen].copy()


def kmeans(x: np.ndarray, k: int, iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are re-seeded with the point farthest from its centroid.
    Inertia is checked to be non-increasing after every iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"kmeans needs 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng([seed, 3])
    centroids = _kmeans_pp(x, k, rng)
    labels = None
    history: list[float] = []
    for _ in range(max(iters, 1)):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(axis=1)
        inertia = float(d[np.arange(n), new_labels].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            own = ((x - centroids[labels]) ** 2).sum(axis=1)
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(own))
                centroids[j] = x[far]
                own[far] = -1.0
    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(n), labels].sum())
    if inertia > history[-1] * (1 + 1e-12) + 1e-12:
        raise AssertionError("k-means inertia increased on final assignment")
    return KMeansResult(labels, centroids, inertia, tuple(history + [inertia]))


# ----------------------------------------------------------------------------
# Agglomerative clustering over centroids
# ----------------------------------------------------------------------------


def cosine_distance_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cosine distance of a zero vector")
    u = x / norms
    return 1.0 - np.clip(u @ u.T, -1.0, 1.0)


def ahc(centroids: np.ndarray, weights: Sequence[float], n_clusters: int, return_merges: bool = False):
    """Size-weighted average-linkage clustering under cosine distance.

    Returns ``mapping`` with ``mapping[i]`` the final group of input cluster
    ``i`` (groups numbered by first appearance). Merges are recorded as
    ``(kept_index, absorbed_index, distance)``; a merged group keeps the
    lower index, and ties go to the lowest ``(i, j)`` pair.
    """
    k = len(centroids)
    if not 1 <= n_clusters <= k:
        raise DataError(f"ahc needs 1 <= n_clusters <= k, got {n_clusters} for k={k}")
    w = np.asarray(weights, dtype=np.float64).copy()
    dist = cosine_distance_matrix(centroids)
    upper = np.triu(np.ones((k, k), bool), 1)
    masked = np.where(upper, dist, np.inf)
    alive = np.ones(k, bool)
    owner = np.arange(k)
    merges = []
    for _ in range(k - n_clusters):
        i, j = divmod(int(np.argmin(masked)), k)  # first minimum = lowest (i, j)
        merges.append((i, j, float(masked[i, j])))
        row = (w[i] * dist[i] + w[j] * dist[j]) / (w[i] + w[j])
        dist[i, :] = row
        dist[:, i] = row
        w[i] += w[j]
        alive[j] = False
        owner[owner == j] = i
        masked[j, :] = np.inf
        masked[:, j] = np.inf
        masked[i, i + 1 :] = np.where(alive[i + 1 :], row[i + 1 :], np.inf)
        masked[:i, i] = np.where(alive[:i], row[:i], np.inf)
    mapping = dense_relabel(owner)
    return (mapping, merges) if return_merges else mapping


def dense_relabel(labels: Sequence[int]) -> np.ndarray:
    """Renumber labels 0..n-1 in order of first appearance."""
    seen: dict = {}
    return np.array([seen.setdefault(l, len(seen)) for l in np.asarray(labels).tolist()], dtype=np.int64)


# ----------------------------------------------------------------------------
# Assignments and NMI
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    ids: tuple[str, ...]
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(labels) != len(self.ids):
            raise DataError("assignment ids and labels differ in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.k):
            raise DataError("cluster index out of range")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "labels", labels)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.ids, self.labels.tolist()))

    def save_tsv(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{u}\t{l}\n" for u, l in zip(self.ids, self.labels.tolist())))

    @classmethod
    def load_tsv(cls, path: str | Path) -> "Assignment":
        ids, labels = [], []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                uid, lab = line.split("\t")
                ids.append(uid)
                labels.append(int(lab))
        return cls(tuple(ids), np.array(labels), (max(labels) + 1) if labels else 0)


def _entropy_from_counts(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignment: Mapping[str, object], truth: Mapping[str, object]) -> float:
    """Normalised mutual information with arithmetic-mean normalisation."""
    if set(assignment) != set(truth):
        raise DataError("assignment and truth cover different ids")
    keys = sorted(assignment)
    _, a = np.unique(np.array([str(assignment[k]) for k in keys]), return_inverse=True)
    _, t = np.unique(np.array([str(truth[k]) for k in keys]), return_inverse=True)
    table = np.zeros((a.max() + 1, t.max() + 1))
    np.add.at(table, (a, t), 1.0)
    ha, ht = _entropy_from_counts(table.sum(1)), _entropy_from_counts(table.sum(0))
    if ha == 0 and ht == 0:
        return 1.0
    n = table.sum()
    nz = table > 0
    pij = table[nz] / n
    outer = (table.sum(1)[:, None] * table.sum(0)[None, :])[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return max(0.0, min(1.0, mi / (0.5 * (ha + ht))))


# ----------------------------------------------------------------------------
# Additive angular margin softmax
# ----------------------------------------------------------------------------


@dataclass
class AamHead:
    weight: np.ndarray  # (C, D)
    margin: float = 0.3
    scale: float = 30.0

    def __post_init__(self):
        if not 0 <= self.margin < np.pi / 2:
            raise ConfigError("AAM margin must lie in [0, pi/2)")
        if self.scale <= 0:
            raise ConfigError("AAM scale must be > 0")


def aam_loss(emb: np.ndarray, weight: np.ndarray, labels: np.ndarray, margin: float, scale: float):
    """Mean ArcFace-style cross-entropy with ``cos(theta_y + m)`` for the target class.

    ``theta_y + m`` is clamped to ``[0, pi]``. Returns ``(loss, grads, logits)``
    with ``grads`` holding ``"emb"`` and ``"weight"``.
    """
    single = emb.ndim == 1
    e = np.atleast_2d(emb)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B = e.shape[0]
    if y.shape[0] != B:
        raise DataError("one label per embedding required")
    if y.min() < 0 or y.max() >= weight.shape[0]:
        raise DataError("label out of range for the AAM head")
    e_hat, e_norm = nn.l2_normalize(e)
    w_hat, w_norm = nn.l2_normalize(weight)
    cos = e_hat @ w_hat.T
    rows = np.arange(B)
    cos_y = np.clip(cos[rows, y], -1.0, 1.0)
    theta = np.arccos(cos_y)
    phi = theta + margin
    clamped = phi >= np.pi
    phi = np.minimum(phi, np.pi)
    logits = scale * cos
    logits[rows, y] = scale * np.cos(phi)
    logp = nn.log_softmax(logits)
    loss = float(-logp[rows, y].mean())
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= B
    dcos = scale * dlogits
    sin_theta = np.maximum(np.sin(theta), 1e-6)
    dtarget = np.where(clamped, 0.0, np.sin(phi) / sin_theta)
    if margin == 0:
        dtarget = np.ones_like(dtarget)
    dcos[rows, y] *= dtarget
    de_hat = dcos @ w_hat
    dw_hat = dcos.T @ e_hat
    de = nn.l2_normalize_backward(de_hat, e_hat, e_norm)
    dw = nn.l2_normalize_backward(dw_hat, w_hat, w_norm)
    grads = {"emb": de[0] if single else de, "weight": dw}
    return loss, grads, (logits[0] if single else logits)


# ----------------------------------------------------------------------------
# Supervised training on (pseudo) labels
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SupervisedConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    margin: float = 0.3
    scale: float = 30.0
    segment_frames: int = 200
    augment: AugmentPolicy = AugmentPolicy()
    finetune_steps: int = 0
    finetune_margin: float = 0.5
    finetune_segment_frames: int = 300
    finetune_lr: float = 0.01

    def validate(self) -> None:
        if self.steps < 0 or self.finetune_steps < 0 or self.batch_size < 1:
            raise ConfigError("supervised steps must be >= 0 and batch_size >= 1")
        if self.segment_frames < 1 or self.finetune_segment_frames < 1:
            raise ConfigError("segment lengths must be >= 1")
        for m in (self.margin, self.finetune_margin):
            if not 0 <= m < np.pi / 2:
                raise ConfigError("AAM margins must lie in [0, pi/2)")
        if self.scale <= 0:
            raise ConfigError("AAM scale must be > 0")
        self.augment.validate(self.segment_frames)


@dataclass(frozen=True)
class ClusterConfig:
    kmeans_k: int = 100
    ahc_clusters: int = 25
    kmeans_iters: int = 100
    n_iterations: int = 3
    warm_start: bool = True
    early_stop_delta: float | None = 0.1

    def validate(self, n_utterances: int | None = None) -> None:
        if not 1 <= self.ahc_clusters <= self.kmeans_k:
            raise ConfigError("need 1 <= ahc_clusters <= kmeans_k")
        if n_utterances is not None and self.kmeans_k > n_utterances:
            raise ConfigError(f"kmeans_k={self.kmeans_k} exceeds the {n_utterances} utterances")
        if self.n_iterations < 0:
            raise ConfigError("n_iterations must be >= 0")


@dataclass
class SpeakerModel:
    """Encoder trained with an AAM head, with a DINOCKPT1 round trip."""

    encoder_config: EncoderConfig
    params: Params
    head: AamHead | None = None

    def __post_init__(self):
        self.encoder = Encoder(self.encoder_config)

    def embed(self, frames: np.ndarray) -> np.ndarray:
        return self.encoder.embed(self.params, frames)

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        tensors = {f"encoder.{k}": v for k, v in self.params.items()}
        meta = {"kind": "supervised", "encoder": asdict(self.encoder_config)}
        if self.head is not None:
            tensors["aam.weight"] = self.head.weight
            meta.update(margin=self.head.margin, scale=self.head.scale)
        meta.update(extra_meta or {})
        nn.save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path) -> "SpeakerModel":
        from .config import encoder_config_from_dict

        tensors, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "supervised":
            raise DataError(f"{path}: not a supervised speaker model")
        params = {k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")}
        head = AamHead(tensors["aam.weight"], meta["margin"], meta["scale"]) if "aam.weight" in tensors else None
        return cls(encoder_config_from_dict(meta["encoder"]), params, head)


def _supervised_phase(
    encoder: Encoder,
    params: Params,
    head: AamHead,
    corpus: Corpus,
    y: np.ndarray,
    steps: int,
    segment: int,
    lr: float,
    cfg: SupervisedConfig,
    rng: np.random.Generator,
    post_pool_only: bool,
    history: list,
    phase: str,
):
    trainable = dict(params)
    trainable["aam.weight"] = head.weight
    opt = OptimizerState(lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    bank = [u.frames for u in corpus] if cfg.augment.noise and cfg.augment.noise_kind != "white" else None
    order, cursor = rng.permutation(len(corpus)), 0
    for step in range(steps):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(corpus)), 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x = np.stack([augment(crop(corpus[int(i)].frames, segment, rng), cfg.augment, rng, bank) for i in idx])
        emb, cache = encoder.forward(params, x)
        loss, g, _ = aam_loss(emb, head.weight, y[idx], head.margin, head.scale)
        grads = encoder.backward(params, cache, g["emb"].astype(emb.dtype), post_pool_only=post_pool_only)
        grads["aam.weight"] = g["weight"].astype(head.weight.dtype)
        nn.check_finite("supervised loss", np.array(loss))
        nn.sgd_step(trainable, grads, opt, lr=nn.warmup_lr(step, steps, lr, cfg.warmup_frac))
        history.append({"phase": phase, "step": step + 1, "loss": loss})


def train_supervised(
    encoder: Encoder,
    params: Params,
    corpus: Corpus,
    labels: Assignment,
    cfg: SupervisedConfig = SupervisedConfig(),
    seed: int = 0,
) -> tuple[Params, AamHead, list[dict]]:
    """AAM-softmax training on (pseudo) labels, then optional large-margin fine-tuning.

    The fine-tuning phase uses ``finetune_margin`` and longer segments and
    only updates the layers after pooling plus the AAM head. ``params`` is
    copied, never modified.
    """
    cfg.validate()
    lookup = labels.as_dict()
    missing = [u for u in corpus.ids if u not in lookup]
    if missing:
        raise DataError(f"no label for utterance {missing[0]!r}")
    y = np.array([lookup[u] for u in corpus.ids], dtype=np.int64)
    rng = np.random.default_rng([seed, 4])
    params = nn.copy_params(params)
    dtype = params["embed.w"].dtype
    head = AamHead(rng.normal(0, 1, (labels.k, encoder.config.embed_dim)).astype(dtype), cfg.margin, cfg.scale)
    history: list[dict] = []
    _supervised_phase(encoder, params, head, corpus, y, cfg.steps, cfg.segment_frames, cfg.lr, cfg, rng, False, history, "train")
    if cfg.finetune_steps:
        head.margin = cfg.finetune_margin
        _supervised_phase(
            encoder, params, head, corpus, y, cfg.finetune_steps, cfg.finetune_segment_frames,
            cfg.finetune_lr, cfg, rng, True, history, "finetune",
        )
    return params, head, history


# ----------------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------------


def pseudo_labels(corpus: Corpus, encoder: Encoder, params: Params, cfg: ClusterConfig, seed: int = 0) -> Assignment:
    """Embed, centre + length-normalise, k-means, then AHC over the k-means centroids."""
    view = corpus.without_labels()
    cfg.validate(len(view))
    embs = preprocess(embed_corpus(encoder, params, view))
    km = kmeans(embs.vectors, cfg.kmeans_k, cfg.kmeans_iters, seed)
    sizes = np.bincount(km.labels, minlength=cfg.kmeans_k).astype(np.float64)
    used = np.flatnonzero(sizes > 0)
    n_final = min(cfg.ahc_clusters, len(used))
    group_of = np.zeros(cfg.kmeans_k, dtype=np.int64)
    group_of[used] = ahc(km.centroids[used], sizes[used], n_final)
    final = dense_relabel(group_of[km.labels])
    return Assignment(tuple(view.ids), final, int(final.max()) + 1)


def evaluate_eer(
    encoder: Encoder, params: Params, eval_corpus: Corpus, trials: Sequence[Trial], mean: np.ndarray | None = None
) -> float:
    """Cosine-scoring EER (%) on held-out trials after centring and length normalisation."""
    embs = embed_corpus(encoder, params, eval_corpus.without_labels())
    return eer(score_trials(preprocess(embs, mean), trials, "cosine"))


def iterate(
    corpus: Corpus,
    encoder: Encoder,
    init_params: Params,
    cfg: ClusterConfig,
    sup_cfg: SupervisedConfig,
    eval_corpus: Corpus | None = None,
    trials: Sequence[Trial] | None = None,
    truth: Mapping[str, object] | None = None,
    seed: int = 0,
    oracle_labels: Assignment | None = None,
    history_path: str | Path | None = None,
):
    """Alternate pseudo-labelling and supervised retraining.

    Returns the final encoder parameters and one history row per iteration
    with ``iteration``, ``eer`` (when trials are given), ``n_pseudo_clusters``
    and ``nmi`` (when ``truth`` is given). ``oracle_labels`` replaces the
    clustering step, for sanity comparisons. Early stopping compares
    consecutive iteration EERs against ``early_stop_delta``.
    """
    cfg.validate(len(corpus))
    params = nn.copy_params(init_params)
    history: list[dict] = []
    prev_eer = None
    fh = open(history_path, "w") if history_path is not None else None
    try:
        for it in range(1, cfg.n_iterations + 1):
            it_seed = seed * 1000 + it
            assign = oracle_labels or pseudo_labels(corpus, encoder, params, cfg, it_seed)
            start = params if cfg.warm_start else encoder.init(np.random.default_rng([it_seed, 5]))
            params, _, train_log = train_supervised(encoder, start, corpus, assign, sup_cfg, it_seed)
            row = {"iteration": it, "n_pseudo_clusters": assign.k, "final_train_loss": train_log[-1]["loss"] if train_log else None}
            if truth is not None:
                row["nmi"] = nmi(assign.as_dict(), {u: truth[u] for u in assign.ids})
            if eval_corpus is not None and trials is not None:
                row["eer"] = evaluate_eer(encoder, params, eval_corpus, trials)
            history.append(row)
            if fh is not None:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                fh.flush()
            log.info("iteration %d: %s", it, row)
            cur = row.get("eer")
            if cfg.early_stop_delta is not None and cur is not None and prev_eer is not None:
                if abs(cur - prev_eer) < cfg.early_stop_delta:
                    break
            prev_eer = cur
    finally:
        if fh is not None:
            fh.close()
    return params, history
