"""Clustering accuracy, baselines, alternative similarities and cluster-count
estimation."""
from __future__ import annotations

import itertools
import warnings

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score as _sk_silhouette

from .errors import ConfigError


def contingency_table(predicted, truth):
    """Counts with predicted clusters as rows and true classes as columns,
    plus the label values indexing each axis."""
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ConfigError("predicted and truth must be equal-length vectors")
    if len(predicted) == 0:
        raise ConfigError("cannot score an empty labelling")
    p_vals, p_idx = np.unique(predicted, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((len(p_vals), len(t_vals)), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    return table, p_vals, t_vals


def hungarian_acc(predicted, truth) -> float:
    """Fraction of samples matched under the best one-to-one mapping of
    predicted clusters onto true classes."""
    table, _, _ = contingency_table(predicted, truth)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / table.sum())


def exhaustive_acc(predicted, truth) -> float:
    """Brute-force clustering accuracy over every injective mapping."""
    table, _, _ = contingency_table(predicted, truth)
    n_p, n_t = table.shape
    best = 0
    if n_p <= n_t:
        for cols in itertools.permutations(range(n_t), n_p):
            best = max(best, sum(table[r, c] for r, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n_p), n_t):
            best = max(best, sum(table[r, c] for c, r in enumerate(rows)))
    return best / table.sum()


def kmeans(features, n_clusters: int, seed: int = 0, restarts: int = 10) -> np.ndarray:
    """Lloyd's k-means from random-sample starts; best of ``restarts`` by
    within-cluster sum of squares."""
    X = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if n_clusters < 1:
        raise ConfigError("need at least one cluster")
    if n_clusters > len(X):
        raise ConfigError(f"{n_clusters} clusters requested for {len(X)} samples")
    if n_clusters == 1:
        return np.zeros(len(X), dtype=np.int64)
    km = KMeans(n_clusters=n_clusters, init="random", n_init=restarts, algorithm="lloyd",
                random_state=seed)
    with warnings.catch_warnings():
        # duplicate points make sklearn warn about fewer distinct clusters
        warnings.simplefilter("ignore")
        return km.fit_predict(X).astype(np.int64)


def silhouette_score(features, labels) -> float:
    """Mean silhouette with Euclidean distance; singleton members score 0."""
    labels = np.asarray(labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise ConfigError("silhouette is undefined for a single cluster")
    if n_labels >= len(labels):
        return 0.0
    return float(_sk_silhouette(np.asarray(features, dtype=np.float64).reshape(len(labels), -1), labels))


def estimate_q(features, q_min: int = 2, q_max: int = 8, seed: int = 0, restarts: int = 5):
    """Cluster count with the highest silhouette (smallest on ties).

    Returns ``(best_q, {q: score})``.
    """
    X = np.asarray(features, dtype=np.float64)
    if not 2 <= q_min <= q_max < len(X):
        raise ConfigError(f"need 2 <= q_min <= q_max < n_samples, got {q_min}, {q_max}, {len(X)}")
    scores = {}
    for q in range(q_min, q_max + 1):
        labels = kmeans(X, q, seed=seed, restarts=max(restarts, 5))
        scores[q] = silhouette_score(X, labels) if len(np.unique(labels)) > 1 else -1.0
    best = max(scores, key=lambda q: (scores[q], -q))
    return best, scores


def _pairwise_sq_dists(X):
    sq = (X * X).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2 * X @ X.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


SIMILARITY_METHODS = ("cosine", "l2", "knn", "rank")


def alt_similarity(features, method: str, k: int | None = None) -> np.ndarray:
    """Similarity matrices used for comparison with RFAP similarity.

    cosine: clipped at 0.  l2: ``exp(-d^2 / sigma^2)`` with sigma the median
    pairwise distance.  knn: 1 for mutual k-nearest neighbours (k=10).
    rank: 1 when the top-k magnitude dimensions coincide as sets (k=5).
    Identical rows, and so the diagonal, score exactly 1.
    """
    X = np.asarray(features, dtype=np.float64)
    m = len(X)
    if m < 2:
        raise ConfigError("need at least two samples")
    method = method.lower()
    if method == "cosine":
        norms = np.linalg.norm(X, axis=1)
        unit = X / np.where(norms > 0, norms, 1.0)[:, None]
        S = np.clip(unit @ unit.T, 0.0, 1.0)
        zero = norms == 0
        S[np.ix_(zero, zero)] = 1.0
    elif method == "l2":
        d2 = _pairwise_sq_dists(X)
        off = np.sqrt(d2[np.triu_indices(m, 1)])
        sigma = np.median(off)
        S = np.exp(-d2 / sigma ** 2) if sigma > 0 else np.ones((m, m))
    elif method == "knn":
        k = 10 if k is None else k
        if not 1 <= k < m:
            raise ConfigError(f"knn needs 1 <= k < {m}, got {k}")
        d2 = _pairwise_sq_dists(X)
        np.fill_diagonal(d2, np.inf)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        member = np.zeros((m, m), dtype=bool)
        member[np.repeat(np.arange(m), k), nn.ravel()] = True
        S = (member & member.T).astype(np.float64)
    elif method == "rank":
        k = 5 if k is None else k
        if not 1 <= k <= X.shape[1]:
            raise ConfigError(f"rank needs 1 <= k <= {X.shape[1]}, got {k}")
        top = np.sort(np.argsort(-np.abs(X), axis=1, kind="stable")[:, :k], axis=1)
        S = (top[:, None, :] == top[None, :, :]).all(axis=2).astype(np.float64)
    else:
        raise ConfigError(f"unknown similarity method {method!r}")
    # rounding in norms and distance expansions can leave equal rows just below 1
    _, row_id = np.unique(X, axis=0, return_inverse=True)
    row_id = row_id.ravel()
    S[row_id[:, None] == row_id[None, :]] = 1.0
    return S
