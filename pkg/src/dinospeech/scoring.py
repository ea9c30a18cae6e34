"""Verification and probing back-ends.

Cosine and two-covariance PLDA trial scoring, EER and minDCF, a
multinomial logistic-regression probe and support-weighted class F1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .errors import DataError, FormatError, NumericError


@dataclass(frozen=True)
class EmbeddingSet:
    ids: tuple[str, ...]
    vectors: np.ndarray  # (N, D)
    labels: tuple | None = None

    def __post_init__(self):
        ids = tuple(self.ids)
        vecs = np.asarray(self.vectors)
        if vecs.ndim != 2 or vecs.shape[0] != len(ids):
            raise DataError("vectors must be an N x D matrix aligned with ids")
        if len(set(ids)) != len(ids):
            raise DataError("embedding ids must be unique")
        if not np.all(np.isfinite(vecs)):
            raise DataError("embedding vectors contain non-finite values")
        if self.labels is not None and len(self.labels) != len(ids):
            raise DataError("labels must align with ids")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vecs)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self) -> int:
        return len(self.ids)

    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.ids)}

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(self.ids, vectors, self.labels)


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # bool, True = target

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def n_target(self) -> int:
        return int(np.sum(self.labels))

    @property
    def n_nontarget(self) -> int:
        return int(len(self.labels) - np.sum(self.labels))


# ----------------------------------------------------------------------------
# Pre-processing and cosine
# ----------------------------------------------------------------------------


def embedding_mean(embs: EmbeddingSet) -> np.ndarray:
    return embs.vectors.astype(np.float64).mean(axis=0)


def preprocess(embs: EmbeddingSet, mean: np.ndarray | None = None) -> EmbeddingSet:
    """Subtract ``mean`` (default: the set's own mean), then length-normalise."""
    mean = embedding_mean(embs) if mean is None else np.asarray(mean, dtype=np.float64)
    centred = embs.vectors.astype(np.float64) - mean
    norms = np.linalg.norm(centred, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = embs.ids[int(np.argmin(norms[:, 0]))]
        raise NumericError(f"embedding {bad!r} is zero after centring")
    return embs.with_vectors(centred / norms)


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine_score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ----------------------------------------------------------------------------
# EER / minDCF
# ----------------------------------------------------------------------------


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, ScoreSet):
        scores, labels = scores.scores, scores.labels
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise DataError("scores and labels must align")
    tar, non = scores[labels], scores[~labels]
    if len(tar) == 0 or len(non) == 0:
        raise DataError("need at least one target and one nontarget trial")
    return tar, non


def operating_points(tar: np.ndarray, non: np.ndarray):
    """Thresholds (distinct scores then +inf) with counts of misses and false alarms.

    At threshold t a trial is accepted when ``score >= t``.
    """
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    n_miss = np.searchsorted(np.sort(tar), thresholds, side="left")
    n_fa = len(non) - np.searchsorted(np.sort(non), thresholds, side="left")
    return thresholds, n_miss, n_fa


def interpolated_eer(far: np.ndarray, frr: np.ndarray) -> float:
    """Crossing of FAR (non-increasing) and FRR (non-decreasing), linear between operating points."""
    diff = far - frr
    i = int(np.argmax(diff <= 0))  # diff ends at -1, so a crossing always exists
    if diff[i] == 0 or i == 0:
        return float(far[i])
    alpha = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(far[i - 1] + alpha * (far[i] - far[i - 1]))


def eer(scores, labels=None) -> float:
    """Equal error rate in percent."""
    tar, non = _split(scores, labels)
    _, n_miss, n_fa = operating_points(tar, non)
    return 100.0 * interpolated_eer(n_fa / len(non), n_miss / len(tar))


def min_dcf(scores, labels=None, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalised detection cost over all thresholds, including accept/reject-all."""
    tar, non = _split(scores, labels)
    _, n_miss, n_fa = operating_points(tar, non)
    p_miss = np.concatenate([[0.0], n_miss / len(tar)])  # leading -inf threshold accepts everything
    p_fa = np.concatenate([[1.0], n_fa / len(non)])
    cost = p_target * c_miss * p_miss + (1 - p_target) * c_fa * p_fa
    return float(cost.min() / min(p_target * c_miss, (1 - p_target) * c_fa))


def metrics_dict(ss: ScoreSet, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> dict:
    return {
        "eer_pct": eer(ss),
        "min_dcf": min_dcf(ss, p_target=p_target, c_miss=c_miss, c_fa=c_fa),
        "n_target": ss.n_target,
        "n_nontarget": ss.n_nontarget,
    }


# ----------------------------------------------------------------------------
# Two-covariance PLDA
# ----------------------------------------------------------------------------


def _gauss_logpdf_rows(x: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(x_i; 0, cov) for each row of ``x``."""
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, x.T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * ((z * z).sum(axis=0) + logdet + x.shape[1] * np.log(2 * np.pi))


@dataclass(frozen=True)
class PldaModel:
    mu: np.ndarray
    B: np.ndarray  # between-speaker covariance
    W: np.ndarray  # within-speaker covariance
    # Centring mean applied before length normalisation at training time, if recorded.
    prep_mean: np.ndarray | None = None

    def score(self, e1: np.ndarray, e2: np.ndarray) -> float:
        return float(self.score_pairs(np.atleast_2d(e1), np.atleast_2d(e2))[0])

    def score_pairs(self, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
        """Same- vs different-speaker log-likelihood ratio for aligned rows.

        Rotating the pair to ``u = (e1+e2)/sqrt2`` and ``w = (e1-e2)/sqrt2``
        makes both hypotheses block diagonal: u has covariance W+2B (same)
        or W+B (different), w has W (same) or W+B (different).
        """
        e1 = np.asarray(e1, dtype=np.float64)
        e2 = np.asarray(e2, dtype=np.float64)
        D = self.mu.shape[0]
        if e1.shape[-1] != D or e2.shape[-1] != D:
            raise DataError(f"PLDA model has dimension {D}, got {e1.shape[-1]} and {e2.shape[-1]}")
        e1 = e1 - self.mu
        e2 = e2 - self.mu
        u = (e1 + e2) / np.sqrt(2.0)
        w = (e1 - e2) / np.sqrt(2.0)
        T = self.B + self.W
        same = _gauss_logpdf_rows(u, T + self.B) + _gauss_logpdf_rows(w, self.W)
        diff = _gauss_logpdf_rows(u, T) + _gauss_logpdf_rows(w, T)
        return same - diff

    def save(self, path: str | Path) -> None:
        tensors = {"mu": self.mu, "B": self.B, "W": self.W}
        if self.prep_mean is not None:
            tensors["prep_mean"] = self.prep_mean
        nn.save_checkpoint(path, tensors, {"kind": "plda"})

    @classmethod
    def load(cls, path: str | Path) -> "PldaModel":
        t, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "plda":
            raise DataError(f"{path}: not a PLDA model file")
        prep = t["prep_mean"].astype(np.float64) if "prep_mean" in t else None
        return cls(t["mu"].astype(np.float64), t["B"].astype(np.float64), t["W"].astype(np.float64), prep)


def _group(x: np.ndarray, labels: Sequence) -> list[np.ndarray]:
    labels = np.asarray(labels)
    _, inv = np.unique(labels, return_inverse=True)
    return [x[inv == g] for g in range(inv.max() + 1)]


def plda_log_likelihood(x: np.ndarray, labels: Sequence, mu: np.ndarray, B: np.ndarray, W: np.ndarray) -> float:
    """Exact marginal log-likelihood of labelled data under the two-covariance model.

    For a speaker with n observations the speaker-mean term is
    ``N(xbar; mu, B + W/n)`` and the within-speaker scatter factorises out.
    """
    x = np.asarray(x, dtype=np.float64)
    D = x.shape[1]
    chol_w = np.linalg.cholesky(W)
    logdet_w = 2.0 * np.log(np.diag(chol_w)).sum()
    total = 0.0
    for grp in _group(x - mu, labels):
        n = grp.shape[0]
        xbar = grp.mean(axis=0)
        dev = np.linalg.solve(chol_w, (grp - xbar).T)
        total += -0.5 * (n - 1) * (D * np.log(2 * np.pi) + logdet_w) - 0.5 * (dev * dev).sum()
        total += -0.5 * D * np.log(n) + float(_gauss_logpdf_rows(xbar[None], B + W / n)[0])
    return total


def plda_train(
    x: np.ndarray,
    labels: Sequence,
    iters: int = 20,
    reg: float = 1e-6,
    return_history: bool = False,
):
    """Fit a two-covariance PLDA model ``x = mu + y + e`` by EM.

    ``y ~ N(0, B)`` is the speaker variable and ``e ~ N(0, W)`` the residual.
    ``reg`` is added to the diagonal of W after every M-step. The marginal
    log-likelihood is recorded before the first and after every iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise DataError("x must be N x D with one label per row")
    groups = _group(x, labels)
    if len(groups) < 2:
        raise DataError("PLDA needs at least 2 speakers")
    if min(g.shape[0] for g in groups) < 2:
        raise DataError("PLDA needs at least 2 utterances for every speaker")
    N, D = x.shape
    eye = np.eye(D)
    mu = x.mean(axis=0)
    centred = [g - mu for g in groups]
    sums = np.stack([g.sum(axis=0) for g in centred])
    counts = np.array([g.shape[0] for g in centred], dtype=np.float64)
    means = sums / counts[:, None]
    B = np.cov(means.T, bias=True).reshape(D, D) + reg * eye
    W = sum((g - m).T @ (g - m) for g, m in zip(centred, means)) / N + reg * eye
    scatter = sum(g.T @ g for g in centred)

    def ll(B, W):
        return plda_log_likelihood(x, labels, mu, B, W)

    history = [ll(B, W)]
    for _ in range(iters):
        try:
            b_inv, w_inv = np.linalg.inv(B), np.linalg.inv(W)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular PLDA covariance") from exc
        Ey = np.empty_like(sums)
        sum_cov = np.zeros((D, D))
        weighted_cov = np.zeros((D, D))
        for n in np.unique(counts):
            sel = counts == n
            cov = np.linalg.inv(b_inv + n * w_inv)
            cov = 0.5 * (cov + cov.T)
            Ey[sel] = sums[sel] @ w_inv @ cov
            k = int(sel.sum())
            sum_cov += k * cov
            weighted_cov += k * n * cov
        B = (Ey.T @ Ey + sum_cov) / len(groups)
        cross = sums.T @ Ey
        W = (scatter - cross - cross.T + (Ey * counts[:, None]).T @ Ey + weighted_cov) / N
        B = 0.5 * (B + B.T)
        W = 0.5 * (W + W.T) + reg * eye
        try:
            np.linalg.cholesky(W)
        except np.linalg.LinAlgError as exc:
            raise NumericError("within-speaker covariance is singular after regularisation") from exc
        history.append(ll(B, W))
    model = PldaModel(mu, B, W)
    return (model, history) if return_history else model


# ----------------------------------------------------------------------------
# Trials
# ----------------------------------------------------------------------------


def score_trials(embs: EmbeddingSet, trials: Sequence[Trial], scorer="cosine") -> ScoreSet:
    """One score per trial, in order. ``scorer`` is ``"cosine"`` or a :class:`PldaModel`."""
    idx = embs.index()
    for t in trials:
        for uid in (t.enroll, t.test):
            if uid not in idx:
                raise DataError(f"trial id {uid!r} not found in embeddings")
    labels = np.array([t.target for t in trials], dtype=bool)
    if not trials:
        return ScoreSet(np.zeros(0), labels)
    a = embs.vectors[[idx[t.enroll] for t in trials]].astype(np.float64)
    b = embs.vectors[[idx[t.test] for t in trials]].astype(np.float64)
    if isinstance(scorer, PldaModel):
        scores = scorer.score_pairs(a, b)
    elif scorer == "cosine":
        na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise NumericError("cosine scoring of a zero embedding")
        scores = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
    else:
        raise DataError(f"unknown scorer {scorer!r}")
    return ScoreSet(scores, labels)


def make_trials(
    ids: Sequence[str], speakers: Sequence, n_target: int, n_nontarget: int, seed: int = 0
) -> list[Trial]:
    """Sample distinct same-speaker and different-speaker pairs from labelled ids."""
    rng = np.random.default_rng([seed, 7])
    ids = list(ids)
    spk = np.asarray(speakers)
    i, j = np.triu_indices(len(ids), k=1)
    same = spk[i] == spk[j]
    tar_pairs, non_pairs = np.flatnonzero(same), np.flatnonzero(~same)
    if n_target > len(tar_pairs) or n_nontarget > len(non_pairs):
        raise DataError("not enough distinct pairs for the requested trial counts")
    pick_t = np.sort(rng.choice(tar_pairs, n_target, replace=False))
    pick_n = np.sort(rng.choice(non_pairs, n_nontarget, replace=False))
    trials = [Trial(ids[i[p]], ids[j[p]], True) for p in pick_t]
    trials += [Trial(ids[i[p]], ids[j[p]], False) for p in pick_n]
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


def write_trials(path: str | Path, trials: Iterable[Trial]) -> None:
    Path(path).write_text(
        "".join(f"{t.enroll} {t.test} {'target' if t.target else 'nontarget'}\n" for t in trials)
    )


def read_trials(path: str | Path) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 3 or cols[2] not in ("target", "nontarget"):
            raise FormatError(f"{path}:{lineno}: expected 'enroll_id test_id target|nontarget'")
        trials.append(Trial(cols[0], cols[1], cols[2] == "target"))
    return trials


# ----------------------------------------------------------------------------
# EMB1 embedding files
# ----------------------------------------------------------------------------

EMB_MAGIC = "EMB1"


def write_embeddings(path: str | Path, embs: EmbeddingSet) -> None:
    N, D = embs.vectors.shape
    with open(path, "wb") as fh:
        fh.write(f"{EMB_MAGIC} {N} {D}\n".encode("ascii"))
        for uid, row in zip(embs.ids, embs.vectors):
            if "\t" in uid or "\n" in uid:
                raise DataError(f"id {uid!r} contains a tab or newline")
            fh.write(uid.encode("utf-8") + b"\t")
            fh.write(np.ascontiguousarray(row, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    parts = data[:nl].decode("ascii", errors="replace").split() if nl >= 0 else []
    if len(parts) != 3 or parts[0] != EMB_MAGIC:
        raise FormatError(f"{path}: bad EMB1 header")
    N, D = int(parts[1]), int(parts[2])
    pos = nl + 1
    ids, rows = [], np.empty((N, D), dtype=np.float32)
    for r in range(N):
        tab = data.find(b"\t", pos)
        if tab < 0 or tab + 1 + 4 * D > len(data):
            raise FormatError(f"{path}: truncated at row {r}")
        ids.append(data[pos:tab].decode("utf-8"))
        rows[r] = np.frombuffer(data, dtype="<f4", count=D, offset=tab + 1)
        pos = tab + 1 + 4 * D
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after {N} rows")
    return EmbeddingSet(tuple(ids), rows)


def write_embeddings_tsv(path: str | Path, embs: EmbeddingSet) -> None:
    """Text export (id, optional label, values) for external plotting tools."""
    with open(path, "w") as fh:
        for k, (uid, row) in enumerate(zip(embs.ids, embs.vectors)):
            lead = [uid] + ([str(embs.labels[k])] if embs.labels is not None else [])
            fh.write("\t".join(lead + [repr(float(v)) for v in row]) + "\n")


def write_metrics(path: str | Path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")


# ----------------------------------------------------------------------------
# Logistic-regression probe and weighted F1
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeModel:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    classes: tuple

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return nn.softmax(np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias)

    def predict(self, x: np.ndarray) -> list:
        return [self.classes[i] for i in np.argmax(self.predict_proba(x), axis=1)]


def probe_loss(params: dict, x: np.ndarray, y: np.ndarray, l2_reg: float):
    """Mean multinomial NLL plus ``l2_reg/2 * ||W||^2``; returns loss and gradients."""
    W, b = params["weights"], params["bias"]
    logits = x @ W.T + b
    logp = nn.log_softmax(logits)
    n = x.shape[0]
    nll = -logp[np.arange(n), y].mean()
    loss = nll + 0.5 * l2_reg * float((W * W).sum())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    return float(loss), {"weights": g.T @ x + l2_reg * W, "bias": g.sum(axis=0)}


def probe_train(
    x: np.ndarray, labels: Sequence, l2_reg: float = 1e-3, steps: int = 500, lr: float = 0.5, seed: int = 0
) -> ProbeModel:
    """Full-batch proximal gradient descent on the L2-regularised multinomial NLL.

    The ridge term is applied through its proximal map, which keeps the
    iteration stable for any ``l2_reg``. Weights start at zero, so the result
    does not depend on ``seed``; it is accepted for interface symmetry.
    """
    x = np.asarray(x, dtype=np.float64)
    classes = tuple(sorted(set(labels), key=str))
    if len(classes) < 2:
        raise DataError("probe needs at least 2 classes")
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[c] for c in labels])
    params = {"weights": np.zeros((len(classes), x.shape[1])), "bias": np.zeros(len(classes))}
    for _ in range(steps):
        _, grads = probe_loss(params, x, y, 0.0)
        params["weights"] = (params["weights"] - lr * grads["weights"]) / (1.0 + lr * l2_reg)
        params["bias"] = params["bias"] - lr * grads["bias"]
    return ProbeModel(params["weights"], params["bias"], classes)


def weighted_f1(preds: Sequence, labels: Sequence) -> float:
    """Support-weighted mean of per-class F1, in percent."""
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise DataError("preds and labels differ in length")
    if not labels:
        raise DataError("weighted_f1 of empty input")
    p, t = np.asarray(preds, dtype=object), np.asarray(labels, dtype=object)
    total = 0.0
    # Fixed class order keeps the float sum independent of hash randomisation.
    for c in sorted(set(labels), key=str):
        tp = float(np.sum((p == c) & (t == c)))
        n_pred, support = float(np.sum(p == c)), float(np.sum(t == c))
        # 2PR/(P+R) written in counts; zero when the class is never predicted or hit
        f1 = 2 * tp / (n_pred + support) if tp > 0 else 0.0
        total += support * f1
    return 100.0 * total / len(labels)
