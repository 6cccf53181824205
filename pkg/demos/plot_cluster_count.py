"""
Choosing the number of clusters
===============================

When the number of novel classes is unknown, k-means is run for every
candidate count and the count with the best mean silhouette is kept.
"""
import numpy as np

from rfapclust.evaluation import estimate_q, hungarian_acc, kmeans

rng = np.random.default_rng(3)
centres = 10 * np.eye(6)[:3]
X = np.concatenate([rng.normal(c, 1.0, (50, 6)) for c in centres])
truth = np.repeat([0, 1, 2], 50)

best, scores = estimate_q(X, 2, 8, seed=0)
for q, s in scores.items():
    print(f"Q = {q}: silhouette {s:.3f}" + ("  <- best" if q == best else ""))

###############################################################################
# Accuracy is the share of samples matched under the best cluster-to-class
# mapping, so relabelling the clusters changes nothing.
labels = kmeans(X, best, seed=0)
print("ACC", hungarian_acc(labels, truth), "after relabelling", hungarian_acc((labels + 1) % 3, truth))
