"""Command-line entry point: ``dinospeech <command> ...``.

Numeric settings come from one JSON run config (``--config``); flags only name
paths and modes. Every command writes the fully resolved config next to its
primary output. Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 IO.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn
from .audio import logmel, read_wav_pcm16
from .cluster import (
    Assignment,
    SpeakerModel,
    evaluate_eer,
    iterate,
    nmi,
    pseudo_labels,
    train_supervised,
)
from .config import RunConfig, dump_config, load_run_config
from .corpus import Corpus, Utterance, gen_synthetic_corpus, load_corpus, save_corpus
from .dino import DinoModel, embed_corpus, train
from .errors import ConfigError, DataError, NumericError
from .scoring import (
    EmbeddingSet,
    PldaModel,
    embedding_mean,
    make_trials,
    metrics_dict,
    plda_train,
    preprocess,
    probe_train,
    read_embeddings,
    read_trials,
    score_trials,
    weighted_f1,
    write_embeddings,
    write_embeddings_tsv,
    write_metrics,
    write_trials,
)

log = logging.getLogger("dinospeech")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _echo_config(cfg: RunConfig, out: Path) -> None:
    """Resolved config goes to ``<dir>/config.json`` or ``<file>.config.json``."""
    target = out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    dump_config(cfg, target)


def read_labels(path: str | Path) -> dict[str, str]:
    """Id -> label from a TSV whose first column is the id and last the label.

    Accepts pseudo-label files (``id<TAB>cluster``) and corpus manifests
    (``id<TAB>path<TAB>speaker``).
    """
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise DataError(f"{path}:{lineno}: expected id<TAB>...<TAB>label")
        if cols[-1] == "-":
            raise DataError(f"{path}:{lineno}: utterance {cols[0]!r} has no label")
        out[cols[0]] = cols[-1]
    if not out:
        raise DataError(f"{path}: no labels")
    return out


def _labels_for(ids, labels: dict[str, str], path) -> list[str]:
    missing = [u for u in ids if u not in labels]
    if missing:
        raise DataError(f"{path}: no label for {missing[0]!r}")
    return [labels[u] for u in ids]


def load_encoder(path: str | Path, branch: str = "teacher"):
    """(Encoder, params) from either a DINO or a supervised checkpoint."""
    _, meta = nn.load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "dino":
        m = DinoModel.load(path)
        return m.encoder, m.encoder_params(branch)
    if kind == "supervised":
        m = SpeakerModel.load(path)
        return m.encoder, m.params
    raise DataError(f"{path}: checkpoint kind {kind!r} has no encoder")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_synth_data(args, cfg: RunConfig) -> None:
    corpus = gen_synthetic_corpus(cfg.data.synthetic, cfg.seed)
    out = Path(args.out)
    save_corpus(corpus, out)
    n_t, n_n = cfg.data.n_target_trials, cfg.data.n_nontarget_trials
    if n_t or n_n:
        write_trials(out / "trials.txt", make_trials(corpus.ids, corpus.speakers(), n_t, n_n, cfg.seed))
    _echo_config(cfg, out)
    print(f"wrote {len(corpus)} utterances to {out}")


def cmd_features(args, cfg: RunConfig) -> None:
    wavs = sorted(Path(args.wav_dir).glob("*.wav"))
    if not wavs:
        raise DataError(f"{args.wav_dir}: no .wav files")
    labels = read_labels(args.labels) if args.labels else {}
    utts = []
    for p in wavs:
        samples, sr = read_wav_pcm16(p)
        utts.append(Utterance(p.stem, logmel(samples, sr, cfg.data.logmel), labels.get(p.stem)))
    corpus = Corpus(tuple(utts), utts[0].frames.shape[1], {"source": str(args.wav_dir)})
    out = Path(args.out)
    save_corpus(corpus, out)
    _echo_config(cfg, out)
    print(f"wrote {len(corpus)} feature files to {out}")


def cmd_train_dino(args, cfg: RunConfig) -> None:
    corpus = load_corpus(args.corpus, with_labels=False)
    if corpus.feature_dim != cfg.encoder.feature_dim:
        raise ConfigError(f"encoder.feature_dim={cfg.encoder.feature_dim} but corpus has {corpus.feature_dim}")
    out = Path(args.out)
    model = DinoModel.create(cfg.encoder, cfg.dino, cfg.seed)
    log_path = args.log or str(out) + ".metrics.jsonl"
    train(model, corpus, seed=cfg.seed, log_path=log_path, checkpoint_dir=args.checkpoint_dir)
    model.save(out, {"seed": cfg.seed})
    _echo_config(cfg, out)
    print(f"trained {model.step} steps -> {out}")


def cmd_extract(args, cfg: RunConfig) -> None:
    encoder, params = load_encoder(args.ckpt, args.branch)
    corpus = load_corpus(args.corpus, with_labels=False)
    embs = embed_corpus(encoder, params, corpus)
    out = Path(args.out)
    (write_embeddings_tsv if args.tsv else write_embeddings)(out, embs)
    _echo_config(cfg, out)
    print(f"wrote {len(embs)} embeddings to {out}")


def cmd_eval_trials(args, cfg: RunConfig) -> None:
    embs = read_embeddings(args.emb)
    trials = read_trials(args.trials)
    if args.scorer == "cosine":
        scorer, embs = "cosine", preprocess(embs)
    elif args.scorer.startswith("plda:"):
        scorer = PldaModel.load(args.scorer[len("plda:") :])
        embs = preprocess(embs, scorer.prep_mean)
    else:
        raise ConfigError(f"unknown scorer {args.scorer!r} (use cosine or plda:<model>)")
    metrics = metrics_dict(score_trials(embs, trials, scorer), cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa)
    out = Path(args.out)
    write_metrics(out, metrics)
    _echo_config(cfg, out)
    print(json.dumps(metrics, sort_keys=True))


def cmd_cluster(args, cfg: RunConfig) -> None:
    encoder, params = load_encoder(args.ckpt, cfg.eval.branch)
    corpus = load_corpus(args.corpus, with_labels=False)
    assign = pseudo_labels(corpus, encoder, params, cfg.cluster, cfg.seed)
    out = Path(args.out)
    assign.save_tsv(out)
    _echo_config(cfg, out)
    print(f"{len(assign.ids)} utterances in {assign.k} pseudo speakers -> {out}")


def cmd_train_supervised(args, cfg: RunConfig) -> None:
    encoder, params = load_encoder(args.ckpt, cfg.eval.branch)
    corpus = load_corpus(args.corpus, with_labels=False)
    assign = Assignment.load_tsv(args.labels)
    params, head, history = train_supervised(encoder, params, corpus, assign, cfg.supervised, cfg.seed)
    out = Path(args.out)
    SpeakerModel(encoder.config, params, head).save(out, {"seed": cfg.seed})
    with open(str(out) + ".metrics.jsonl", "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _echo_config(cfg, out)
    print(f"trained {len(history)} steps -> {out}")


def cmd_train_plda(args, cfg: RunConfig) -> None:
    embs = read_embeddings(args.emb)
    labels = _labels_for(embs.ids, read_labels(args.labels), args.labels)
    mean = embedding_mean(embs)
    model = plda_train(preprocess(embs, mean).vectors, labels, iters=args.iters)
    model = dataclasses.replace(model, prep_mean=mean)
    out = Path(args.out)
    model.save(out)
    _echo_config(cfg, out)
    print(f"PLDA on {len(embs)} embeddings, {len(set(labels))} speakers -> {out}")


def split_indices(labels, test_fraction: float, seed: int):
    """Per-class shuffled split; every class keeps at least one training item."""
    rng = np.random.default_rng([seed, 11])
    labels = np.asarray(labels, dtype=object)
    train_idx, test_idx = [], []
    for c in sorted(set(labels.tolist()), key=str):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = min(int(round(test_fraction * len(idx))), len(idx) - 1)
        test_idx += idx[:n_test].tolist()
        train_idx += idx[n_test:].tolist()
    return np.sort(train_idx), np.sort(test_idx)


def cmd_probe(args, cfg: RunConfig) -> None:
    embs = read_embeddings(args.emb)
    labels = _labels_for(embs.ids, read_labels(args.labels), args.labels)
    tr, te = split_indices(labels, cfg.probe.test_fraction, cfg.seed)
    y = np.asarray(labels, dtype=object)
    mean = embs.vectors[tr].mean(axis=0)
    x = preprocess(embs, mean).vectors
    model = probe_train(x[tr], y[tr].tolist(), cfg.probe.l2_reg, cfg.probe.steps, cfg.probe.lr, cfg.seed)
    metrics = {
        "n_classes": len(model.classes),
        "n_train": int(len(tr)),
        "n_test": int(len(te)),
        "train_weighted_f1": weighted_f1(model.predict(x[tr]), y[tr].tolist()),
    }
    if len(te):
        metrics["weighted_f1"] = weighted_f1(model.predict(x[te]), y[te].tolist())
    else:
        metrics["weighted_f1"] = metrics["train_weighted_f1"]
    out = Path(args.out)
    write_metrics(out, metrics)
    _echo_config(cfg, out)
    print(json.dumps(metrics, sort_keys=True))


def cmd_pipeline(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    stage = "train-dino"
    corpus = load_corpus(args.corpus, with_labels=False)
    eval_corpus = trials = None
    if args.eval_corpus or args.trials:
        if not (args.eval_corpus and args.trials):
            raise ConfigError("--eval-corpus and --trials go together")
        eval_corpus = load_corpus(args.eval_corpus, with_labels=False)
        trials = read_trials(args.trials)
    truth = None
    if args.truth:
        labelled = load_corpus(args.corpus, with_labels=True)
        truth = {u.id: u.speaker_id for u in labelled}
        if any(v is None for v in truth.values()):
            raise DataError("--truth needs speaker labels for every utterance in the manifest")
    try:
        model = DinoModel.create(cfg.encoder, cfg.dino, cfg.seed)
        train(model, corpus, seed=cfg.seed, log_path=out / "dino.metrics.jsonl")
        model.save(out / "dino.ckpt", {"seed": cfg.seed})
        encoder, params = model.encoder, model.encoder_params(cfg.eval.branch)

        row = {"stage": "dino", "iteration": 0}
        if eval_corpus is not None:
            row["eer"] = evaluate_eer(encoder, params, eval_corpus, trials)
        history = [row]

        stage = "iterate"
        sup_iter = dataclasses.replace(cfg.supervised, finetune_steps=0)
        params, rows = iterate(
            corpus, encoder, params, cfg.cluster, sup_iter, eval_corpus, trials, truth, cfg.seed,
            history_path=out / "iterations.jsonl",
        )
        history += [{"stage": "iteration", **r} for r in rows]

        if cfg.supervised.finetune_steps and cfg.cluster.n_iterations:
            stage = "fine-tune"
            assign = pseudo_labels(corpus, encoder, params, cfg.cluster, cfg.seed * 1000 + 999)
            ft_cfg = dataclasses.replace(cfg.supervised, steps=0)
            params, head, ft_log = train_supervised(encoder, params, corpus, assign, ft_cfg, cfg.seed * 1000 + 999)
            row = {"stage": "finetune", "iteration": len(rows) + 1, "n_pseudo_clusters": assign.k,
                   "final_train_loss": ft_log[-1]["loss"] if ft_log else None}
            if truth is not None:
                row["nmi"] = nmi(assign.as_dict(), truth)
            if eval_corpus is not None:
                row["eer"] = evaluate_eer(encoder, params, eval_corpus, trials)
            history.append(row)

        stage = "eval"
        if len(history) > 1:
            SpeakerModel(encoder.config, params).save(out / "final.ckpt", {"seed": cfg.seed})
        if eval_corpus is not None:
            final = embed_corpus(encoder, params, eval_corpus)
            write_embeddings(out / "eval.emb", final)
            ss = score_trials(preprocess(final), trials, "cosine")
            write_metrics(out / "metrics.json", metrics_dict(ss, cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa))
    except (DataError, NumericError, ConfigError) as exc:
        raise type(exc)(f"{stage}: {exc}") from exc
    (out / "history.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")
    for row in history:
        print(json.dumps(row, sort_keys=True))


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dinospeech",
        description="Self-supervised utterance embeddings, verification scoring and pseudo-label training.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (results stay deterministic)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON run config; omitted sections take their defaults")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth-data", cmd_synth_data, "Write a synthetic speaker corpus (FEAT1 files + manifest.tsv).")
    sp.add_argument("--out", required=True, help="output corpus directory")

    sp = add("features", cmd_features, "Convert a directory of PCM16 mono WAV files into a log-mel corpus.")
    sp.add_argument("--wav-dir", required=True)
    sp.add_argument("--labels", help="optional TSV id<TAB>speaker, ids are file stems")
    sp.add_argument("--out", required=True, help="output corpus directory")

    sp = add("train-dino", cmd_train_dino, "Self-supervised DINO training on an unlabelled corpus.")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="output checkpoint (DINOCKPT1)")
    sp.add_argument("--log", help="metrics log path (default: <out>.metrics.jsonl)")
    sp.add_argument("--checkpoint-dir", help="directory for periodic snapshots (dino.checkpoint_every)")

    sp = add("extract", cmd_extract, "Extract utterance embeddings (head excluded) to an EMB1 file.")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--branch", choices=("teacher", "student"), default="teacher", help="DINO branch to use")
    sp.add_argument("--tsv", action="store_true", help="write a text TSV export instead of binary EMB1")

    sp = add("eval-trials", cmd_eval_trials, "Score a trial list and write EER / minDCF as JSON.")
    sp.add_argument("--emb", required=True, help="EMB1 embedding file")
    sp.add_argument("--trials", required=True, help="'enroll test target|nontarget' per line")
    sp.add_argument("--scorer", default="cosine", help="cosine or plda:<model file>")
    sp.add_argument("--out", required=True, help="metrics JSON path")

    sp = add("cluster", cmd_cluster, "Pseudo-label a corpus with k-means followed by AHC.")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="pseudo-label TSV")

    sp = add("train-supervised", cmd_train_supervised, "AAM-softmax training from a checkpoint on pseudo labels.")
    sp.add_argument("--ckpt", required=True, help="initial encoder (DINO or supervised checkpoint)")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--labels", required=True, help="pseudo-label TSV from 'cluster'")
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "train-dino, then iterated pseudo-labelling, fine-tuning and evaluation.")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--eval-corpus", help="held-out corpus for trial evaluation")
    sp.add_argument("--trials", help="trial list over --eval-corpus ids")
    sp.add_argument(
        "--truth", action="store_true",
        help="oracle evaluation: read true speaker labels from the corpus manifest to report NMI (never used for training)",
    )

    sp = add("train-plda", cmd_train_plda, "Fit a two-covariance PLDA back-end. Requires true speaker labels.")
    sp.add_argument("--emb", required=True)
    sp.add_argument("--labels", required=True, help="TSV with id first and speaker last (a manifest works)")
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--out", required=True)

    sp = add("probe", cmd_probe, "Logistic-regression probe with weighted F1. Requires class labels.")
    sp.add_argument("--emb", required=True)
    sp.add_argument("--labels", required=True, help="TSV with id first and class last")
    sp.add_argument("--out", required=True, help="metrics JSON path")
    return p


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    name = f"dinospeech {args.command}"
    try:
        cfg = load_run_config(args.config)
        with _threads(args.threads):
            args.func(args, cfg)
    except ConfigError as exc:
        print(f"{name}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"{name}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"{name}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"{name}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
