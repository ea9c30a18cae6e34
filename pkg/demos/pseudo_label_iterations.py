"""
Pseudo-labels from clustering
=============================

Embeddings from a self-supervised encoder are clustered (k-means, then
average-linkage AHC over the centroids). The cluster ids serve as speaker
labels for AAM-softmax retraining, and the loop repeats. True speakers
are only used to report NMI.

With this seed NMI climbs at each pass while EER is lowest after the first
pass (about 10.5% to 6.5%) and drifts back up at the second (about 9.6%).
The acceptance suite therefore judges the loop by the median over three
seeds, not by any single run.

Uses the desk configuration from ``configs/``; about three minutes on one core.
"""

from pathlib import Path

from dinospeech.cluster import evaluate_eer, iterate
from dinospeech.config import load_run_config
from dinospeech.corpus import gen_synthetic_corpus
from dinospeech.dino import DinoModel, train
from dinospeech.scoring import make_trials

configs = Path(__file__).resolve().parent.parent / "configs"
desk = load_run_config(configs / "desk.json")
heldout = load_run_config(configs / "heldout.json")

corpus = gen_synthetic_corpus(desk.data.synthetic, seed=desk.seed)
held = gen_synthetic_corpus(heldout.data.synthetic, seed=heldout.seed)
trials = make_trials(held.ids, held.speakers(), 1000, 1000, seed=0)

model = DinoModel.create(desk.encoder, desk.dino, seed=0)
train(model, corpus, seed=0)
params = model.encoder_params()
print(f"DINO EER {evaluate_eer(model.encoder, params, held, trials):.1f}%")

# 100 k-means clusters merged to 25 pseudo speakers (the corpus has 20)
truth = {u.id: u.speaker_id for u in corpus}
_, history = iterate(corpus, model.encoder, params, desk.cluster, desk.supervised, held, trials, truth, seed=0)
for row in history:
    print(f"iteration {row['iteration']}: {row['n_pseudo_clusters']} clusters, "
          f"NMI {row['nmi']:.3f}, EER {row['eer']:.1f}%")
