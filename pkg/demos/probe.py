"""
A linear probe on embeddings
============================

Utterance embeddings can be tested for other attributes (for example
emotion) with an L2-regularised logistic regression, scored by
support-weighted F1.
"""

import numpy as np

from dinospeech.scoring import probe_train, weighted_f1

# the two worked F1 examples
print(weighted_f1(list("ABBB"), list("AABB")))  # 73.33...
print(weighted_f1(list("AAAA"), list("AABB")))  # 33.33...

# four attribute classes placed around a sphere
r = np.random.default_rng(0)
centres = r.normal(size=(4, 16))
centres *= 3 / np.linalg.norm(centres, axis=1, keepdims=True)
x = np.vstack([c + r.normal(0, 0.8, (50, 16)) for c in centres])
y = np.repeat(["neutral", "happy", "sad", "angry"], 50)

test = np.zeros(len(y), bool)
test[r.permutation(len(y))[:60]] = True
model = probe_train(x[~test], y[~test].tolist(), l2_reg=1e-3)
print(f"held-out weighted F1 {weighted_f1(model.predict(x[test]), y[test].tolist()):.1f}")

# heavy regularisation shrinks the weights and the probe falls back to the class priors
flat = probe_train(x[~test], y[~test].tolist(), l2_reg=1e3)
print("max |w| with l2=1e3:", float(np.abs(flat.weights).max()))
