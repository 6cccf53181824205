"""
Forest activation patterns
==========================

Each tree node gets a digit-string id that spells out its root-to-leaf
path: a 1 for every left turn, a 2 for every right turn, padded with
zeros.  Two samples are as similar as the digits of the leaves they reach.
"""
import numpy as np

from rfapclust.forest import (Forest, Tree, path_similarity_oracle, rfap_encode,
                              rfap_similarity, similarity_matrix, train_urf)

###############################################################################
# A small hand-made tree of depth four.  Thresholds sit between leaves, so
# x = 0, 1, 2, 3, 4 reach the five leaves from left to right.
tree = Tree.from_nested(((None, None), ((None, None), None)))
print("node ids:", tree.ids)
forest = Forest([tree], 1, [0])
for x in range(5):
    print(f"x = {x} ->", rfap_encode(forest, [x])[0])

###############################################################################
# Leaves 211 and 212 agree on two of three digits.
print("S(211, 212) =", rfap_similarity(("211",), ("212",)))
print("path oracle  =", path_similarity_oracle(tree, [2.0], [3.0]))

###############################################################################
# An unsupervised forest separates the data from a column-shuffled copy of
# itself.  Points from the same blob end up sharing more of their paths.
rng = np.random.default_rng(0)
X = np.r_[rng.normal(0, 0.5, (40, 2)), rng.normal(5, 0.5, (40, 2))]
urf = train_urf(X, n_trees=100, seed=0)
S = similarity_matrix(urf, X)
within = (S[:40, :40].mean() + S[40:, 40:].mean()) / 2
print(f"mean similarity within blobs {within:.3f}, across blobs {S[:40, 40:].mean():.3f}")
