"""Unsupervised random forest and activation-pattern (RFAP) similarity.

The forest separates real feature vectors from a synthetic contrast set
drawn from the product of the empirical marginals.  Every node gets a
digit-string id: the root is all zeros, and a child at depth ``k`` copies
its parent's id and writes ``1`` (left) or ``2`` (right) at digit
``k - 2``.  Read as integers this is ``id_child = id_parent + 10**(d - k)``
for a left child and ``+ 2 * 10**(d - k)`` for a right child, with ``d``
the tree's realised depth and the root at depth 1.  A terminal id therefore
spells out the whole root-to-leaf path, and two samples are compared by
the fraction of digit positions on which their terminal ids agree.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

LEFT, RIGHT = 1, 2


# ---------------------------------------------------------------------------
# trees

@dataclass
class Tree:
    """Array-backed binary tree.  Node 0 is the root; leaves have
    ``feature == -1`` and ``left == right == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray = field(init=False)
    ids: list[str] | None = field(default=None, init=False)
    digits: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        n = len(self.feature)
        if not (n >= 1 and len(self.threshold) == len(self.left) == len(self.right) == n):
            raise DataError("inconsistent tree arrays")
        self.depth = np.zeros(n, dtype=np.int64)
        self.depth[0] = 1
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            kids = (self.left[i], self.right[i])
            if (kids[0] < 0) != (kids[1] < 0):
                raise DataError(f"node {i} has exactly one child")
            for c in kids:
                if c < 0:
                    continue
                if c in seen or c >= n:
                    raise DataError(f"node {c} reached twice or out of range")
                seen.add(int(c))
                self.depth[c] = self.depth[i] + 1
                queue.append(int(c))
        if len(seen) != n:
            raise DataError("tree has unreachable nodes")

    @classmethod
    def from_nested(cls, spec, feature: int = 0) -> "Tree":
        """Build a tree from nested pairs: ``None`` is a leaf and
        ``(left, right)`` an internal node.  Thresholds are filled in
        in-order (0.5, 1.5, ...) on a single feature, so routing is easy
        to predict in tests."""
        left, right, feat, thr = [], [], [], []

        def add(node):
            i = len(left)
            left.append(-1), right.append(-1), feat.append(-1), thr.append(0.0)
            if node is not None:
                feat[i] = feature
                left[i] = add(node[0])
                right[i] = add(node[1])
            return i

        add(spec)
        tree = cls(feat, thr, left, right)
        # in-order thresholds: leaves are numbered 0, 1, 2, ... left to right
        counter = [0]

        def walk(i):
            if tree.left[i] < 0:
                counter[0] += 1
                return
            walk(tree.left[i])
            tree.threshold[i] = counter[0] - 0.5
            walk(tree.right[i])

        walk(0)
        return index_tree(tree)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    @property
    def code_length(self) -> int:
        return self.max_depth - 1

    def is_leaf(self, i) -> bool:
        return self.left[i] < 0

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def parents(self) -> np.ndarray:
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        internal = self.left >= 0
        parent[self.left[internal]] = np.flatnonzero(internal)
        parent[self.right[internal]] = np.flatnonzero(internal)
        return parent

    def apply(self, X) -> np.ndarray:
        """Index of the terminal node reached by each row (``x < thr`` goes left)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature values")
        node = np.zeros(len(X), dtype=np.int64)
        active = self.left[node] >= 0
        rows = np.arange(len(X))
        while active.any():
            n = node[active]
            go_left = X[rows[active], self.feature[n]] < self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.left[node] >= 0
        return node

    def path(self, x) -> list[int]:
        """Node indices from the root to the terminal reached by ``x``."""
        x = np.asarray(x, dtype=np.float64)
        i, out = 0, [0]
        while self.left[i] >= 0:
            i = int(self.left[i] if x[self.feature[i]] < self.threshold[i] else self.right[i])
            out.append(i)
        return out

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "ids": self.ids}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        tree = cls(d["feature"], d["threshold"], d["left"], d["right"])
        index_tree(tree)
        if d.get("ids") is not None and d["ids"] != tree.ids:
            raise DataError("stored node ids disagree with the tree structure")
        return tree


def index_tree(tree: Tree) -> Tree:
    """Assign path-encoding ids to every node (in place; also returned).

    Ids are digit strings of length ``d - 1`` so arbitrarily deep trees
    never overflow.  Parents are processed before children; the result
    does not depend on the traversal order beyond that.
    """
    d = tree.max_depth
    length = d - 1
    digits = np.zeros((tree.n_nodes, length), dtype=np.uint8)
    queue = deque([0])
    while queue:
        i = queue.popleft()
        if tree.left[i] < 0:
            continue
        for child, digit in ((tree.left[i], LEFT), (tree.right[i], RIGHT)):
            k = tree.depth[child]  # child's depth, 2..d
            digits[child] = digits[i]
            digits[child, k - 2] = digit
            queue.append(int(child))
    tree.digits = digits
    tree.ids = ["".join(map(str, row)) for row in digits] if length else ["0"]
    return tree


def node_id_int(tree: Tree, i: int) -> int:
    """Integer reading of a node id (``int("0210") == 210``)."""
    return int(tree.ids[i]) if tree.ids else 0


# ---------------------------------------------------------------------------
# growing

def synthesize_contrast(features, seed) -> np.ndarray:
    """Contrast sample of the same size: each column resampled with
    replacement from its own empirical distribution, independently."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ConfigError("need at least two feature rows")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(X), size=X.shape)
    return np.take_along_axis(X, idx, axis=0)


def _best_split(Xn, yn, feats, min_leaf):
    V = Xn[:, feats]
    order = np.argsort(V, axis=0, kind="stable")
    Vs = np.take_along_axis(V, order, axis=0)
    ys = yn[order]
    n = len(yn)
    l1 = np.cumsum(ys, axis=0)[:-1]
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    r1 = yn.sum() - l1
    # n_side * gini(side) = 2 * c1 * c0 / n_side
    imp = 2 * l1 * (nl - l1) / nl + 2 * r1 * (nr - r1) / nr
    valid = (Vs[1:] > Vs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    imp = np.where(valid, imp, np.inf)
    pos, col = np.unravel_index(np.argmin(imp), imp.shape)
    lo, hi = Vs[pos, col], Vs[pos + 1, col]
    thr = lo + (hi - lo) / 2
    if not lo < thr <= hi:
        thr = hi
    return int(feats[col]), float(thr)


def grow_tree(X, y, rng, max_depth=None, min_leaf=1, mtry=None) -> Tree:
    """CART classification tree on 0/1 labels with Gini splits over
    ``mtry`` random features per node (all features are tried if none of
    the sampled ones can split)."""
    n_feat = X.shape[1]
    mtry = n_feat if mtry is None else min(mtry, n_feat)
    max_depth = math.inf if max_depth is None else max_depth
    feature, threshold, left, right = [], [], [], []

    def new_node():
        feature.append(-1), threshold.append(0.0), left.append(-1), right.append(-1)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(X)), 1)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        pos = yn.sum()
        if depth >= max_depth or pos == 0 or pos == len(idx) or len(idx) < 2 * min_leaf:
            continue
        Xn = X[idx]
        perm = rng.permutation(n_feat)
        split = _best_split(Xn, yn, perm[:mtry], min_leaf)
        if split is None and mtry < n_feat:
            split = _best_split(Xn, yn, perm[mtry:], min_leaf)
        if split is None:
            continue
        f, thr = split
        go_left = Xn[:, f] < thr
        li, ri = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, li, ri
        stack.append((ri, idx[~go_left], depth + 1))
        stack.append((li, idx[go_left], depth + 1))
    return index_tree(Tree(feature, threshold, left, right))


@dataclass
class URFParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    mtry: int | None = None
    seed: int = 0


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    seeds: list[int]
    _packed: tuple | None = field(default=None, init=False, repr=False)

    def _pack(self):
        # all trees concatenated so every (sample, tree) pair is routed at once
        if self._packed is None:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
            shift = lambda a, off: np.where(a >= 0, a + off, -1)
            feature = np.concatenate([t.feature for t in self.trees])
            threshold = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([shift(t.left, o) for t, o in zip(self.trees, offsets)])
            right = np.concatenate([shift(t.right, o) for t, o in zip(self.trees, offsets)])
            width = max(t.code_length for t in self.trees)
            digits = np.zeros((offsets[-1], max(width, 1)), dtype=np.uint8)
            for t, o in zip(self.trees, offsets):
                digits[o:o + t.n_nodes, :t.code_length] = t.digits
            lengths = np.array([t.code_length for t in self.trees])
            self._packed = (offsets[:-1], feature, threshold, left, right, digits, lengths)
        return self._packed

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def degenerate_trees(self) -> int:
        """Single-node trees; they count every pair as identical."""
        return sum(t.n_nodes == 1 for t in self.trees)

    def apply(self, X) -> np.ndarray:
        """(n_samples, n_trees) terminal-node indices."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise DataError(f"forest expects {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature values")
        return self._apply_global(X) - self._pack()[0]

    def _apply_global(self, X):
        roots, feature, threshold, left, right, _, _ = self._pack()
        node = np.broadcast_to(roots, (len(X), len(roots))).copy()
        rows = np.broadcast_to(np.arange(len(X))[:, None], node.shape)
        active = left[node] >= 0
        while active.any():
            n, r = node[active], rows[active]
            go_left = X[r, feature[n]] < threshold[n]
            node[active] = np.where(go_left, left[n], right[n])
            active = left[node] >= 0
        return node

    def save(self, path):
        Path(path).write_text(json.dumps({"n_features": self.n_features, "seeds": self.seeds,
                                          "trees": [t.to_dict() for t in self.trees]}))

    @classmethod
    def load(cls, path) -> "Forest":
        d = json.loads(Path(path).read_text())
        return cls([Tree.from_dict(t) for t in d["trees"]], d["n_features"], d["seeds"])


def train_urf(features, n_trees: int = 100, max_depth=None, min_leaf: int = 1, mtry=None,
              seed: int = 0) -> Forest:
    """Real-vs-contrast random forest over ``features`` (one row per sample).

    Each tree is grown on its own bootstrap of the pooled real and contrast
    rows; ``mtry`` defaults to ``ceil(sqrt(n_features))``.
    """
    X = np.asarray(features, dtype=np.float64)
    if n_trees < 1:
        raise ConfigError("need at least one tree")
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise DataError("features must be a finite 2D array")
    n_feat = X.shape[1]
    mtry = math.ceil(math.sqrt(n_feat)) if mtry is None else mtry
    seq = np.random.SeedSequence(seed)
    contrast_seed, *tree_seqs = seq.spawn(n_trees + 1)
    pool = np.vstack([X, synthesize_contrast(X, np.random.default_rng(contrast_seed))])
    labels = np.r_[np.zeros(len(X)), np.ones(len(X))]
    trees, seeds = [], []
    for ts in tree_seqs:
        rng = np.random.default_rng(ts)
        boot = rng.integers(0, len(pool), size=len(pool))
        trees.append(grow_tree(pool[boot], labels[boot], rng, max_depth, min_leaf, mtry))
        seeds.append(int(ts.generate_state(1)[0]))
    forest = Forest(trees, n_feat, seeds)
    if forest.degenerate_trees:
        log.warning("%d of %d trees are single nodes", forest.degenerate_trees, n_trees)
    return forest


# ---------------------------------------------------------------------------
# activation patterns and similarity

def rfap_encode(forest: Forest, x) -> tuple[str, ...]:
    """Terminal-node id (zero-padded digit string) reached in every tree."""
    leaves = forest.apply(np.asarray(x, dtype=np.float64)[None])[0]
    return tuple(t.ids[i] for t, i in zip(forest.trees, leaves))


def rfap_similarity(r_i, r_j) -> float:
    """One minus the mean over trees of the fraction of differing digits.

    Evaluated as the mean fraction of agreeing digits, which is the same
    quantity but rounds exactly on simple cases (211 vs 212 gives 2/3).
    """
    if len(r_i) != len(r_j) or not r_i:
        raise ConfigError("activation patterns must be non-empty and of equal length")
    total = 0.0
    for a, b in zip(r_i, r_j):
        if len(a) != len(b):
            raise ConfigError(f"code lengths differ: {a!r} vs {b!r}")
        total += (len(a) - sum(ca != cb for ca, cb in zip(a, b))) / len(a)
    return total / len(r_i)


def similarity_from_leaves(forest: Forest, leaves_a, leaves_b=None, chunk: int = 64) -> np.ndarray:
    """Pairwise RFAP similarity from precomputed terminal indices.

    Per-tree agreeing-digit fractions are accumulated in tree order, exactly as
    :func:`rfap_similarity` does, so both give bit-identical values.
    """
    same = leaves_b is None
    leaves_b = leaves_a if same else leaves_b
    roots, *_, digits, lengths = forest._pack()
    da = digits[leaves_a + roots]  # (n_a, B, width)
    db = digits[leaves_b + roots]
    # single-node trees carry the one-digit id "0"
    denom = np.maximum(lengths, 1)
    S = np.empty((len(leaves_a), len(leaves_b)))
    for i in range(0, len(da), chunk):
        mismatch = (da[i:i + chunk, None] != db[None]).sum(axis=3)  # (c, n_b, B)
        total = np.cumsum((denom - mismatch) / denom, axis=2)[..., -1]
        S[i:i + chunk] = total / forest.n_trees
    if same:
        np.fill_diagonal(S, 1.0)
    return S


def similarity_matrix(forest: Forest, batch_features) -> np.ndarray:
    """W x W RFAP similarity matrix for a batch of feature rows."""
    X = np.asarray(batch_features, dtype=np.float64)
    if len(X) < 2:
        raise ConfigError("need at least two rows")
    return similarity_from_leaves(forest, forest.apply(X))


def leaf_proximity(forest: Forest, batch_features) -> np.ndarray:
    """Classic terminal-node proximity: fraction of trees where two rows
    share a leaf.  Kept for comparison only."""
    leaves = forest.apply(batch_features)
    return (leaves[:, None, :] == leaves[None, :, :]).mean(axis=2)


def path_similarity_oracle(tree: Tree, point_a, point_b) -> float:
    """Per-tree similarity computed by walking both root-to-leaf paths.

    At every level 2..d the branch taken into that level is compared
    (left, right, or none once the point has reached its terminal); the
    result is the fraction of levels where both points did the same.
    Uses only the tree structure, never the node ids.
    """
    d = tree.max_depth
    if d == 1:
        return 1.0

    def moves(x):
        path = tree.path(x)
        out = []
        for k in range(2, d + 1):
            if k - 1 < len(path):
                parent, child = path[k - 2], path[k - 1]
                out.append("L" if child == tree.left[parent] else "R")
            else:
                out.append(None)
        return out

    ma, mb = moves(point_a), moves(point_b)
    return sum(a == b for a, b in zip(ma, mb)) / (d - 1)
