import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dinospeech.cli import main, read_labels, split_indices
from dinospeech.config import load_run_config
from dinospeech.corpus import Corpus, Utterance, save_corpus
from dinospeech.dino import DinoModel
from dinospeech.errors import DataError
from dinospeech.scoring import EmbeddingSet, read_embeddings, write_embeddings, write_trials, Trial

SMOKE = json.loads((Path(__file__).parent.parent / "configs" / "smoke.json").read_text())


def merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def write_cfg(tmp_path, name="cfg.json", **over):
    p = tmp_path / name
    p.write_text(json.dumps(merge(SMOKE, over)))
    return str(p)


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def smoke_corpus(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path / "corpus")]) == 0
    return cfg, tmp_path / "corpus"


def test_synth_data_default_config_size(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path / "c")]) == 0
    assert len(list((tmp_path / "c" / "feats").glob("*.feat"))) == 400
    assert len((tmp_path / "c" / "manifest.tsv").read_text().splitlines()) == 400
    assert (tmp_path / "c" / "config.json").exists()


def test_synth_data_is_reproducible(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["synth-data", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["synth-data", "--config", cfg, "--out", str(tmp_path / "b")])
    assert sha(tmp_path / "a" / "manifest.tsv") == sha(tmp_path / "b" / "manifest.tsv")
    for f in (tmp_path / "a" / "feats").iterdir():
        assert sha(f) == sha(tmp_path / "b" / "feats" / f.name)
    assert sha(tmp_path / "a" / "trials.txt") == sha(tmp_path / "b" / "trials.txt")
    assert len((tmp_path / "a" / "trials.txt").read_text().splitlines()) == 80


def test_unknown_key_exits_2_and_names_it(tmp_path, capsys):
    cfg = write_cfg(tmp_path, dino={"bogus": 1})
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path / "c")]) == 2
    assert "dino.bogus" in capsys.readouterr().err


def test_train_dino_zero_steps_is_initialisation(tmp_path, smoke_corpus):
    _, corpus = smoke_corpus
    cfg = write_cfg(tmp_path, "zero.json", dino={"steps": 0})
    out = tmp_path / "m.ckpt"
    assert main(["train-dino", "--config", cfg, "--corpus", str(corpus), "--out", str(out)]) == 0
    rc = load_run_config(cfg)
    fresh = DinoModel.create(rc.encoder, rc.dino, rc.seed)
    loaded = DinoModel.load(out)
    for k, v in fresh.student.items():
        np.testing.assert_array_equal(loaded.student[k], v)
        np.testing.assert_array_equal(loaded.teacher[k], v)
    assert (tmp_path / "m.ckpt.config.json").exists()


def test_train_dino_log_has_one_line_per_step(tmp_path, smoke_corpus):
    cfg, corpus = smoke_corpus
    out = tmp_path / "m.ckpt"
    assert main(["train-dino", "--config", cfg, "--corpus", str(corpus), "--out", str(out)]) == 0
    rows = [json.loads(l) for l in (tmp_path / "m.ckpt.metrics.jsonl").read_text().splitlines()]
    assert len(rows) == SMOKE["dino"]["steps"]
    assert {"loss", "teacher_entropy"} <= set(rows[0])


def test_nan_exits_4(tmp_path, smoke_corpus, capsys):
    _, corpus = smoke_corpus
    cfg = write_cfg(tmp_path, "nan.json", dino={"lr": 1e30, "steps": 5})
    with np.errstate(all="ignore"):
        code = main(["train-dino", "--config", cfg, "--corpus", str(corpus), "--out", str(tmp_path / "m.ckpt")])
    assert code == 4
    assert "numeric" in capsys.readouterr().err


def test_feature_dim_mismatch_is_config_error(tmp_path, smoke_corpus):
    _, corpus = smoke_corpus
    cfg = write_cfg(tmp_path, "bad.json", encoder={"feature_dim": 9})
    assert main(["train-dino", "--config", cfg, "--corpus", str(corpus), "--out", str(tmp_path / "m")]) == 2


def test_missing_files(tmp_path):
    assert main(["extract", "--ckpt", str(tmp_path / "none.ckpt"), "--corpus", str(tmp_path), "--out", str(tmp_path / "e")]) == 5
    assert main(["train-dino", "--corpus", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m")]) == 3


@pytest.fixture
def trained(tmp_path, smoke_corpus):
    cfg, corpus = smoke_corpus
    ckpt = tmp_path / "m.ckpt"
    assert main(["train-dino", "--config", cfg, "--corpus", str(corpus), "--out", str(ckpt)]) == 0
    return cfg, corpus, ckpt


def test_extract_rows_and_tsv(tmp_path, trained):
    cfg, corpus, ckpt = trained
    assert main(["extract", "--config", cfg, "--ckpt", str(ckpt), "--corpus", str(corpus), "--out", str(tmp_path / "e.emb")]) == 0
    embs = read_embeddings(tmp_path / "e.emb")
    assert len(embs) == 36 and embs.vectors.shape[1] == SMOKE["encoder"]["embed_dim"]
    assert main(["extract", "--ckpt", str(ckpt), "--corpus", str(corpus), "--out", str(tmp_path / "e.tsv"), "--tsv"]) == 0
    lines = (tmp_path / "e.tsv").read_text().splitlines()
    # labels never reach extraction, so there is no speaker column
    assert len(lines) == 36 and all(len(l.split("\t")) == 1 + SMOKE["encoder"]["embed_dim"] for l in lines)
    assert main(["extract", "--ckpt", str(ckpt), "--corpus", str(corpus), "--out", str(tmp_path / "s.emb"), "--branch", "student"]) == 0
    assert sha(tmp_path / "s.emb") != sha(tmp_path / "e.emb")


def test_extract_empty_corpus(tmp_path, trained):
    _, _, ckpt = trained
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "manifest.tsv").write_text("")
    assert main(["extract", "--ckpt", str(ckpt), "--corpus", str(empty), "--out", str(tmp_path / "e.emb")]) == 3


def _toy_embeddings(tmp_path):
    embs = EmbeddingSet(("a1", "a2", "b1", "b2"), np.array([[1, 0.1], [1, -0.1], [-0.1, 1], [0.1, 1]], np.float32))
    write_embeddings(tmp_path / "toy.emb", embs)
    write_trials(tmp_path / "toy.trials", [Trial("a1", "a2", True), Trial("b1", "b2", True), Trial("a1", "b1", False), Trial("a2", "b2", False)])
    return tmp_path / "toy.emb", tmp_path / "toy.trials"


def test_eval_trials_separable(tmp_path):
    emb, trials = _toy_embeddings(tmp_path)
    assert main(["eval-trials", "--emb", str(emb), "--trials", str(trials), "--out", str(tmp_path / "m.json")]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert set(m) == {"eer_pct", "min_dcf", "n_target", "n_nontarget"}
    assert m["eer_pct"] == 0.0 and m["min_dcf"] == 0.0


def test_eval_trials_missing_id_and_bad_scorer(tmp_path, capsys):
    emb, _ = _toy_embeddings(tmp_path)
    write_trials(tmp_path / "bad.trials", [Trial("a1", "zz9", True)])
    assert main(["eval-trials", "--emb", str(emb), "--trials", str(tmp_path / "bad.trials"), "--out", str(tmp_path / "m.json")]) == 3
    assert "zz9" in capsys.readouterr().err
    assert main(["eval-trials", "--emb", str(emb), "--trials", str(tmp_path / "bad.trials"), "--scorer", "svm", "--out", str(tmp_path / "m.json")]) == 2


def test_cluster_train_supervised_plda_chain(tmp_path, trained):
    cfg, corpus, ckpt = trained
    labels = tmp_path / "pl.tsv"
    assert main(["cluster", "--config", cfg, "--ckpt", str(ckpt), "--corpus", str(corpus), "--out", str(labels)]) == 0
    rows = [l.split("\t") for l in labels.read_text().splitlines()]
    assert len(rows) == 36 and len({r[1] for r in rows}) == SMOKE["cluster"]["ahc_clusters"]
    sup = tmp_path / "sup.ckpt"
    assert main(["train-supervised", "--config", cfg, "--ckpt", str(ckpt), "--corpus", str(corpus), "--labels", str(labels), "--out", str(sup)]) == 0
    assert len((tmp_path / "sup.ckpt.metrics.jsonl").read_text().splitlines()) == SMOKE["supervised"]["steps"]
    assert main(["extract", "--ckpt", str(sup), "--corpus", str(corpus), "--out", str(tmp_path / "s.emb")]) == 0
    assert main(["train-plda", "--emb", str(tmp_path / "s.emb"), "--labels", str(corpus / "manifest.tsv"), "--out", str(tmp_path / "p.ckpt")]) == 0
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path / "ev")]) == 0
    assert main(["extract", "--ckpt", str(sup), "--corpus", str(tmp_path / "ev"), "--out", str(tmp_path / "ev.emb")]) == 0
    assert main(["eval-trials", "--emb", str(tmp_path / "ev.emb"), "--trials", str(tmp_path / "ev" / "trials.txt"),
                 "--scorer", f"plda:{tmp_path / 'p.ckpt'}", "--out", str(tmp_path / "m.json")]) == 0
    assert 0 <= json.loads((tmp_path / "m.json").read_text())["eer_pct"] <= 100


def test_probe_separable(tmp_path):
    r = np.random.default_rng(0)
    centres = np.eye(4) * 6
    vecs = np.vstack([c + r.normal(0, 0.3, (10, 4)) for c in centres]).astype(np.float32)
    ids = tuple(f"u{i}" for i in range(40))
    write_embeddings(tmp_path / "p.emb", EmbeddingSet(ids, vecs))
    (tmp_path / "lab.tsv").write_text("".join(f"{u}\tc{i // 10}\n" for i, u in enumerate(ids)))
    assert main(["probe", "--emb", str(tmp_path / "p.emb"), "--labels", str(tmp_path / "lab.tsv"), "--out", str(tmp_path / "m.json")]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["weighted_f1"] == 100.0 and m["n_classes"] == 4 and m["n_train"] + m["n_test"] == 40


def test_read_labels_and_split(tmp_path):
    (tmp_path / "l.tsv").write_text("a\tx\nb\tfeats/b.feat\ty\n\n")
    assert read_labels(tmp_path / "l.tsv") == {"a": "x", "b": "y"}
    (tmp_path / "u.tsv").write_text("a\tfeats/a.feat\t-\n")
    with pytest.raises(DataError):
        read_labels(tmp_path / "u.tsv")
    labels = ["a"] * 10 + ["b"] * 3 + ["c"]
    tr, te = split_indices(labels, 0.3, 0)
    assert sorted(tr.tolist() + te.tolist()) == list(range(14))
    assert {labels[i] for i in tr} == {"a", "b", "c"}
    assert sum(labels[i] == "a" for i in te) == 3


def test_pipeline_zero_iterations(tmp_path, smoke_corpus):
    _, corpus = smoke_corpus
    cfg = write_cfg(tmp_path, "p0.json", cluster={"n_iterations": 0})
    out = tmp_path / "run"
    assert main(["pipeline", "--config", cfg, "--corpus", str(corpus), "--out", str(out),
                 "--eval-corpus", str(corpus), "--trials", str(corpus / "trials.txt")]) == 0
    history = json.loads((out / "history.json").read_text())
    assert len(history) == 1 and history[0]["stage"] == "dino"
    assert not (out / "final.ckpt").exists()


def test_pipeline_is_deterministic(tmp_path, smoke_corpus):
    cfg, corpus = smoke_corpus
    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["pipeline", "--config", cfg, "--corpus", str(corpus), "--out", str(out), "--truth",
                     "--eval-corpus", str(corpus), "--trials", str(corpus / "trials.txt")]) == 0
        runs.append(out)
    names = sorted(p.name for p in runs[0].iterdir())
    assert {"dino.ckpt", "final.ckpt", "eval.emb", "metrics.json", "history.json"} <= set(names)
    for n in names:
        assert sha(runs[0] / n) == sha(runs[1] / n), n
    history = json.loads((runs[0] / "history.json").read_text())
    assert [h["stage"] for h in history] == ["dino", "iteration"]
    assert 0 <= history[1]["nmi"] <= 1


def test_pipeline_truth_needs_labels(tmp_path):
    corpus = Corpus((Utterance("a", np.zeros((60, 8))), Utterance("b", np.ones((60, 8)))), 8)
    save_corpus(corpus, tmp_path / "c")
    cfg = write_cfg(tmp_path, "t.json", cluster={"kmeans_k": 2, "ahc_clusters": 1, "n_iterations": 1})
    assert main(["pipeline", "--config", cfg, "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "o"), "--truth"]) == 3


def test_help_mentions_label_requirements(capsys):
    for cmd, needle in (("pipeline", "never used for training"), ("train-plda", "true speaker labels"), ("probe", "class labels")):
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
        assert needle in " ".join(capsys.readouterr().out.split())


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dinospeech.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "dinospeech" in proc.stdout
