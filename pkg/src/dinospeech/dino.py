"""Self-distillation without labels: student/teacher encoders over multi-crop views."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .corpus import AugmentPolicy, CropConfig, CropSet, Corpus, Utterance, augment_cropset, multi_crop
from .errors import ConfigError, DataError, NumericError
from .nn import Encoder, EncoderConfig, HeadConfig, OptimizerState, Params, ProjectionHead

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DinoConfig:
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    ema_lambda: float = 0.996
    center_momentum: float = 0.9
    crop: CropConfig = CropConfig()
    augment: AugmentPolicy = AugmentPolicy()
    n_outputs: int = 1024
    hidden: int = 256
    bottleneck: int = 64
    head_activation: str = "gelu"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    checkpoint_every: int = 0
    # Opt-in switch for collapse ablations: permits tau_teacher == tau_student
    # and a frozen center (center_momentum == 1).
    allow_collapse: bool = False

    def validate(self) -> None:
        if self.tau_teacher <= 0 or self.tau_student <= 0:
            raise ConfigError("temperatures must be > 0")
        if not self.tau_teacher < self.tau_student and not (
            self.allow_collapse and self.tau_teacher == self.tau_student
        ):
            raise ConfigError("sharpening requires tau_teacher < tau_student")
        if not 0 <= self.ema_lambda <= 1:
            raise ConfigError("ema_lambda must lie in [0, 1]")
        if not 0 <= self.center_momentum < 1 and not (self.allow_collapse and self.center_momentum == 1):
            raise ConfigError("center_momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.crop.n_long < 2:
            raise ConfigError("the distillation loss needs at least 2 long crops")
        self.crop.validate()
        self.augment.validate(self.crop.len_short)


# ----------------------------------------------------------------------------
# Distributions and loss
# ----------------------------------------------------------------------------


def teacher_distribution(logits: np.ndarray, center: np.ndarray, tau_teacher: float) -> np.ndarray:
    """Centred, sharpened softmax of teacher logits."""
    if tau_teacher <= 0:
        raise ConfigError("tau_teacher must be > 0")
    return nn.softmax((logits - center) / tau_teacher)


def student_log_distribution(logits: np.ndarray, tau_student: float) -> np.ndarray:
    if tau_student <= 0:
        raise ConfigError("tau_student must be > 0")
    return nn.log_softmax(logits / tau_student)


def term_pairs(n_long: int, n_crops: int) -> list[tuple[int, int]]:
    """(teacher crop, student crop) index pairs; crops ``0..n_long-1`` are the long ones."""
    return [(i, j) for i in range(n_long) for j in range(n_crops) if j != i]


def dino_loss(
    teacher_p: np.ndarray,
    student_logp: np.ndarray,
    on_term: Callable[[int, int], None] | None = None,
) -> float:
    """Averaged cross-entropy between each long-crop teacher target and every other student view.

    ``teacher_p`` is (n_long, K) and ``student_logp`` (n_crops, K) with the
    long crops first, in the same order. A leading batch axis is allowed
    on both; the result is then the mean over the batch. ``on_term`` is
    called once per (teacher, student) pair that enters the sum.
    """
    if teacher_p.ndim == 2:
        teacher_p, student_logp = teacher_p[None], student_logp[None]
    n_long, n_crops = teacher_p.shape[1], student_logp.shape[1]
    if n_long < 2:
        raise DataError("dino_loss needs at least 2 long crops")
    if n_crops < n_long:
        raise DataError("student views must include the long crops")
    pairs = term_pairs(n_long, n_crops)
    total = np.zeros(teacher_p.shape[0], dtype=np.float64)
    for i, j in pairs:
        if on_term is not None:
            on_term(i, j)
        total -= (teacher_p[:, i] * student_logp[:, j]).sum(axis=-1)
    return float(total.mean() / len(pairs))


def dino_loss_grad(teacher_p: np.ndarray, student_logp: np.ndarray) -> np.ndarray:
    """Gradient of batched :func:`dino_loss` wrt ``student_logp`` (B, n_crops, K)."""
    B, n_long, _ = teacher_p.shape
    n_crops = student_logp.shape[1]
    n_terms = len(term_pairs(n_long, n_crops))
    tsum = teacher_p.sum(axis=1)
    g = np.broadcast_to(-tsum[:, None, :], student_logp.shape).copy()
    g[:, :n_long] += teacher_p  # a long crop is not paired with itself
    return g / (n_terms * B)


def log_softmax_backward(grad_logp: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return grad_logp - np.exp(logp) * grad_logp.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(np.clip(p, 1e-30, None))).sum(axis=-1)


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    if teacher_logits.ndim != 2 or teacher_logits.shape[0] < 1:
        raise DataError("update_center needs a non-empty (B, K) batch")
    mean = teacher_logits.mean(axis=0)
    return (momentum * center + (1.0 - momentum) * mean).astype(center.dtype)


def ema_update(teacher: Params, student: Params, lam: float) -> Params:
    """In place ``teacher <- lam * teacher + (1 - lam) * student``."""
    if teacher.keys() != student.keys():
        raise DataError("teacher and student parameter names differ")
    for k, t in teacher.items():
        s = student[k]
        if s.shape != t.shape:
            raise DataError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        t *= t.dtype.type(lam)
        t += t.dtype.type(1.0 - lam) * s
    return teacher


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------


def split_params(params: Params) -> tuple[Params, Params]:
    enc = {k[len("encoder.") :]: v for k, v in params.items() if k.startswith("encoder.")}
    head = {k[len("head.") :]: v for k, v in params.items() if k.startswith("head.")}
    return enc, head


def join_params(enc: Params, head: Params) -> Params:
    out = {f"encoder.{k}": v for k, v in enc.items()}
    out.update({f"head.{k}": v for k, v in head.items()})
    return out


@dataclass
class DinoModel:
    encoder_config: EncoderConfig
    config: DinoConfig
    student: Params
    teacher: Params
    center: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.encoder = Encoder(self.encoder_config)
        self.head = ProjectionHead(head_config(self.encoder_config, self.config))

    @classmethod
    def create(cls, encoder_config: EncoderConfig, config: DinoConfig, seed: int = 0) -> "DinoModel":
        config.validate()
        rng = np.random.default_rng([seed, 1])
        enc = Encoder(encoder_config)
        head = ProjectionHead(head_config(encoder_config, config))
        student = join_params(enc.init(rng), head.init(rng))
        return cls(encoder_config, config, student, nn.copy_params(student), np.zeros(config.n_outputs, np.float32))

    def encoder_params(self, branch: str = "teacher") -> Params:
        if branch not in ("teacher", "student"):
            raise ConfigError("branch must be 'teacher' or 'student'")
        return split_params(self.teacher if branch == "teacher" else self.student)[0]

    def embed(self, frames: np.ndarray, branch: str = "teacher") -> np.ndarray:
        return self.encoder.embed(self.encoder_params(branch), frames)

    def tensors(self) -> Params:
        out = {f"student.{k}": v for k, v in self.student.items()}
        out.update({f"teacher.{k}": v for k, v in self.teacher.items()})
        out["center"] = self.center
        return out

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": "dino",
            "step": self.step,
            "encoder": asdict(self.encoder_config),
            "dino": asdict(self.config),
        }
        meta.update(extra_meta or {})
        nn.save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "DinoModel":
        from .config import dino_config_from_dict, encoder_config_from_dict

        tensors, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "dino":
            raise DataError(f"{path}: not a DINO checkpoint")
        student = {k[len("student.") :]: v for k, v in tensors.items() if k.startswith("student.")}
        teacher = {k[len("teacher.") :]: v for k, v in tensors.items() if k.startswith("teacher.")}
        return cls(
            encoder_config_from_dict(meta["encoder"]),
            dino_config_from_dict(meta["dino"]),
            student,
            teacher,
            tensors["center"],
            int(meta.get("step", 0)),
        )


def head_config(enc: EncoderConfig, cfg: DinoConfig) -> HeadConfig:
    return HeadConfig(enc.embed_dim, cfg.hidden, cfg.bottleneck, cfg.n_outputs, cfg.head_activation)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


def _forward_views(model: DinoModel, params: Params, views: Sequence[np.ndarray]):
    """Encoder forward per crop length, then one head pass over all views."""
    enc_p, head_p = split_params(params)
    embs, caches = [], []
    for v in views:
        e, c = model.encoder.forward(enc_p, v)
        embs.append(e)
        caches.append(c)
    logits, head_cache = model.head.forward(head_p, np.concatenate(embs, axis=0))
    return logits, (embs, caches, head_cache)


def student_loss_and_grads(
    model: DinoModel,
    params: Params,
    batch: Sequence[CropSet],
    teacher_p: np.ndarray,
    on_term: Callable[[int, int], None] | None = None,
):
    """Loss against fixed teacher targets and its gradient for every student parameter."""
    B = len(batch)
    cfg = model.config
    n_long, n_short = batch[0].longs.shape[0], batch[0].shorts.shape[0]
    longs = np.concatenate([c.longs for c in batch], axis=0)  # row b*n_long + i
    views = [longs] + ([np.concatenate([c.shorts for c in batch], axis=0)] if n_short else [])
    logits, (embs, caches, head_cache) = _forward_views(model, params, views)
    K = logits.shape[-1]
    lo = logits[: B * n_long].reshape(B, n_long, K)
    parts = [lo]
    if n_short:
        parts.append(logits[B * n_long :].reshape(B, n_short, K))
    s_logits = np.concatenate(parts, axis=1)
    logp = student_log_distribution(s_logits, cfg.tau_student)
    loss = dino_loss(teacher_p, logp, on_term)
    g = log_softmax_backward(dino_loss_grad(teacher_p, logp), logp) / cfg.tau_student
    g_logits = np.concatenate(
        [g[:, :n_long].reshape(B * n_long, K)] + ([g[:, n_long:].reshape(B * n_short, K)] if n_short else []),
        axis=0,
    ).astype(logits.dtype, copy=False)
    enc_p, head_p = split_params(params)
    g_emb, head_grads = model.head.backward(head_p, head_cache, g_logits)
    enc_grads: Params = {}
    start = 0
    for e, c in zip(embs, caches):
        part = model.encoder.backward(enc_p, c, g_emb[start : start + len(e)])
        start += len(e)
        for k, v in part.items():
            enc_grads[k] = enc_grads[k] + v if k in enc_grads else v
    return loss, join_params(enc_grads, head_grads)


def teacher_targets(model: DinoModel, batch: Sequence[CropSet], params: Params | None = None):
    """Teacher logits (B*n_long, K) and target distributions (B, n_long, K)."""
    longs = np.concatenate([c.longs for c in batch], axis=0)
    logits, _ = _forward_views(model, model.teacher if params is None else params, [longs])
    p = teacher_distribution(logits.astype(np.float64), model.center.astype(np.float64), model.config.tau_teacher)
    return logits, p.reshape(len(batch), batch[0].longs.shape[0], -1)


@dataclass
class TrainState:
    opt: OptimizerState
    total_steps: int


def train_step(
    model: DinoModel, batch: Sequence[CropSet], state: TrainState, on_term: Callable[[int, int], None] | None = None
) -> dict:
    """One optimiser step: targets, student update, EMA, then the centre update."""
    if not batch:
        raise DataError("empty batch")
    cfg = model.config
    t_logits, t_p = teacher_targets(model, batch)
    loss, grads = student_loss_and_grads(model, model.student, batch, t_p, on_term)
    gnorm = nn.global_norm(grads)
    if not np.isfinite(loss) or not np.isfinite(gnorm):
        raise NumericError(
            f"non-finite loss at step {model.step}: loss={loss}, grad_norm={gnorm}, "
            f"center_l2={float(np.linalg.norm(model.center))}"
        )
    lr = nn.warmup_lr(model.step, state.total_steps, state.opt.lr, cfg.warmup_frac)
    nn.sgd_step(model.student, grads, state.opt, lr=lr)
    ema_update(model.teacher, model.student, cfg.ema_lambda)
    model.center = update_center(model.center, t_logits, cfg.center_momentum)
    model.step += 1
    return {
        "step": model.step,
        "loss": loss,
        "teacher_entropy": float(entropy(t_p).mean()),
        "center_l2": float(np.linalg.norm(model.center)),
        "grad_norm": gnorm,
    }


def make_optimizer(cfg: DinoConfig) -> OptimizerState:
    return OptimizerState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def sample_batch(
    corpus: Corpus, order: np.ndarray, cursor: int, cfg: DinoConfig, rng: np.random.Generator, noise_bank
) -> list[CropSet]:
    idx = [int(order[(cursor + i) % len(order)]) for i in range(cfg.batch_size)]
    return [augment_cropset(multi_crop(corpus[i], cfg.crop, rng), cfg.augment, rng, noise_bank) for i in idx]


def train(
    model: DinoModel,
    corpus: Corpus,
    seed: int = 0,
    steps: int | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[DinoModel, list[dict]]:
    """Run ``steps`` (default ``config.steps``) training steps over shuffled utterances.

    Never reads speaker identities. Metrics are appended to ``log_path`` as
    JSON lines; with ``checkpoint_every > 0`` snapshots go to ``checkpoint_dir``.
    """
    cfg = model.config
    cfg.validate()
    corpus = corpus.without_labels()
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng([seed, 2])
    bank = [u.frames for u in corpus] if cfg.augment.noise and cfg.augment.noise_kind != "white" else None
    state = TrainState(make_optimizer(cfg), steps)
    history: list[dict] = []
    order = rng.permutation(len(corpus))
    cursor = 0
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for _ in range(steps):
            if cursor >= len(order):
                order, cursor = rng.permutation(len(corpus)), 0
            batch = sample_batch(corpus, order, cursor, cfg, rng, bank)
            cursor += cfg.batch_size
            metrics = train_step(model, batch, state)
            history.append(metrics)
            if fh is not None:
                fh.write(json.dumps(metrics, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(metrics)
            if checkpoint_dir is not None and cfg.checkpoint_every and model.step % cfg.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                model.save(Path(checkpoint_dir) / f"step{model.step:06d}.ckpt")
            if model.step % 100 == 0:
                log.info("step %d loss %.4f H_t %.3f", model.step, metrics["loss"], metrics["teacher_entropy"])
    finally:
        if fh is not None:
            fh.close()
    return model, history


def extract_embedding(model: DinoModel, utt: Utterance, branch: str = "teacher") -> np.ndarray:
    """Full-utterance encoder embedding; the projection head is not used."""
    return model.embed(utt.frames, branch)


def embed_corpus(encoder: Encoder, params: Params, corpus: Corpus, batch_size: int = 64):
    """Embeddings for every utterance; utterances of equal length are batched together."""
    from .scoring import EmbeddingSet

    out = np.empty((len(corpus), encoder.config.embed_dim), dtype=np.float32)
    by_len: dict[int, list[int]] = {}
    for i, u in enumerate(corpus):
        by_len.setdefault(u.n_frames, []).append(i)
    for idx in by_len.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            out[chunk] = encoder.embed(params, np.stack([corpus[i].frames for i in chunk]))
    labels = corpus.speakers()
    return EmbeddingSet(tuple(corpus.ids), out, None if any(l is None for l in labels) else tuple(labels))


def extract_embeddings(model: DinoModel, corpus: Corpus, branch: str = "teacher"):
    return embed_corpus(model.encoder, model.encoder_params(branch), corpus)
