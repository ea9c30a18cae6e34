"""
Cosine versus PLDA scoring
==========================

Embeddings are drawn from a two-covariance model in which speaker variation
lives in a few directions and channel noise in the rest. Cosine scoring
weighs every direction equally; PLDA learns which ones carry identity.
"""

import numpy as np

from dinospeech.scoring import (
    EmbeddingSet,
    eer,
    embedding_mean,
    make_trials,
    metrics_dict,
    plda_train,
    preprocess,
    score_trials,
)

r = np.random.default_rng(0)
D = 16
Q, _ = np.linalg.qr(r.normal(size=(D, D)))
B = Q @ np.diag(np.r_[np.full(4, 2.0), np.full(D - 4, 0.05)]) @ Q.T  # between speakers
W = Q @ np.diag(np.r_[np.full(4, 0.5), np.full(D - 4, 1.0)]) @ Q.T  # within speaker


def sample(n_spk, n_obs, prefix):
    y = r.multivariate_normal(np.zeros(D), B, n_spk)
    x = np.repeat(y, n_obs, 0) + r.multivariate_normal(np.zeros(D), W, n_spk * n_obs)
    labels = [f"{prefix}{i}" for i in np.repeat(np.arange(n_spk), n_obs)]
    return EmbeddingSet(tuple(f"{prefix}u{i}" for i in range(len(x))), x, tuple(labels))


train_set, eval_set = sample(200, 10, "t"), sample(50, 10, "e")
trials = make_trials(eval_set.ids, eval_set.labels, 1000, 1000, seed=0)

# both back-ends see centred, length-normalised vectors
mean = embedding_mean(train_set)
plda, history = plda_train(preprocess(train_set, mean).vectors, list(train_set.labels), return_history=True)
print("EM log-likelihood, first and last:", round(history[0], 1), round(history[-1], 1))

cos = metrics_dict(score_trials(preprocess(eval_set), trials, "cosine"))
pl = metrics_dict(score_trials(preprocess(eval_set, mean), trials, plda))
print(f"cosine EER {cos['eer_pct']:.1f}%  minDCF {cos['min_dcf']:.3f}")
print(f"PLDA   EER {pl['eer_pct']:.1f}%  minDCF {pl['min_dcf']:.3f}")

# the exact EER of a tiny score list, by hand: targets {1, 3}, nontargets {0, 2}
print("toy EER:", eer(np.array([1.0, 3.0, 0.0, 2.0]), np.array([True, True, False, False])))
