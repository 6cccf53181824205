"""Three-step training: temporal-order pretext, fine-tuning on labelled
classes, then iterative clustering driven by forest similarities.

Step III minimises ``L_cat + L_cluster + omega(epoch) * L_cons`` where the
pairwise targets of ``L_cluster`` come from a forest grown afresh on the
unlabelled features at the start of every epoch.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import evaluation
from .errors import ConfigError
from .forest import URFParams, similarity_matrix, train_urf
from .nn import (SGD, Network, SGDConfig, categorical_cross_entropy, consistency_loss,
                 pairwise_cluster_loss, ramp_up_weight)
from .scenario import PERMUTATIONS, AugmentParams, ScenarioDataset, augment_batch

log = logging.getLogger(__name__)

SIMILARITY_SOURCES = ("rfap",) + evaluation.SIMILARITY_METHODS

# (N, 4) zero-based frame sources, row c = class c
_SOURCES = np.array(PERMUTATIONS, dtype=np.int64) - 1


@dataclass
class PipelineConfig:
    seed: int = 0
    feature_dim: int = 64
    pretrain: SGDConfig = field(default_factory=lambda: SGDConfig(epochs=30))
    finetune: SGDConfig = field(default_factory=lambda: SGDConfig(epochs=20))
    cluster: SGDConfig = field(default_factory=lambda: SGDConfig(epochs=50))
    ramp_length: float = 100.0        # T
    ramp_scale: float = 5.0           # lambda
    n_clusters: int | str = 3         # Q, or "estimate"
    q_range: tuple[int, int] = (2, 8)
    labeled_fraction: float = 0.5     # share of each step-III batch
    urf: URFParams = field(default_factory=lambda: URFParams(n_trees=50))
    augment: AugmentParams = field(default_factory=AugmentParams)
    frozen_layers: int = 3            # conv1, relu1, pool1
    similarity: str = "rfap"
    similarity_k: int | None = None   # k for knn / rank similarities
    use_ssl: bool = True
    use_labeled: bool = True
    cluster_loss: bool = True
    consistency: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.ramp_length <= 0 or self.ramp_scale <= 0:
            raise ConfigError("ramp-up needs T > 0 and lambda > 0")
        if self.n_clusters != "estimate" and (not isinstance(self.n_clusters, (int, np.integer))
                                              or self.n_clusters < 2):
            raise ConfigError(f"Q must be an integer >= 2 or 'estimate', got {self.n_clusters!r}")
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ConfigError("labeled_fraction must lie in (0, 1)")
        if self.similarity not in SIMILARITY_SOURCES:
            raise ConfigError(f"similarity must be one of {SIMILARITY_SOURCES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.frozen_layers < 0:
            raise ConfigError("frozen_layers must be >= 0")


@dataclass
class ClusterAssignment:
    """Per-sample cluster probabilities; ``labels`` are 0-based argmaxes
    (first index on ties), ``clusters`` the 1-based ids."""

    probs: np.ndarray
    epoch: int
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        self.labels = self.probs.argmax(axis=1)

    @property
    def clusters(self) -> np.ndarray:
        return self.labels + 1

    @property
    def Q(self) -> int:
        return self.probs.shape[1]

    def to_csv(self, path, ids):
        if len(ids) != len(self.labels):
            raise ConfigError("one id per assigned sample required")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "cluster"] + [f"p{q + 1}" for q in range(self.Q)])
            for sid, c, p in zip(ids, self.clusters, self.probs):
                w.writerow([sid, int(c)] + [repr(float(v)) for v in p])


def _batches(n: int, size: int, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _accuracy(probs, y) -> float:
    return float((probs.argmax(axis=1) == y).mean()) if len(y) else float("nan")


def _emit(log_fn, record):
    if log_fn is not None:
        log_fn(record)


def extract_features(net: Network, tensors) -> np.ndarray:
    """Backbone output ``h`` for each tensor, rows in input order."""
    return net.features(tensors)


def assign_clusters(net: Network, tensors, epoch: int = -1) -> ClusterAssignment:
    if "cluster" not in net.heads:
        raise ConfigError("network has no clustering head")
    return ClusterAssignment(net.predict(tensors, "cluster"), epoch)


# ---------------------------------------------------------------------------
# step I

def permute_batch(tensors, classes) -> np.ndarray:
    """Reorder frames of each (T, I, J) tensor by its permutation class."""
    src = _SOURCES[np.asarray(classes)]
    return tensors[np.arange(len(tensors))[:, None], src]


def new_network(grid_shape, config: PipelineConfig, stream: int) -> Network:
    return Network.for_grid(grid_shape, config.feature_dim, seed=[config.seed, stream],
                            dtype=np.dtype(config.dtype))


def step1_pretrain(tensors, config: PipelineConfig, net: Network | None = None,
                   log_fn: Callable | None = None) -> Network:
    """Train backbone plus a 24-way head to recognise frame orderings.

    Only tensors are consumed, never labels.  The returned network still
    carries the ``"pretext"`` head; :func:`step2_finetune` removes it.
    """
    tensors = np.asarray(tensors)
    if tensors.ndim != 4 or tensors.shape[1] != 4:
        raise ConfigError(f"pretext task needs 4-frame tensors, got shape {tensors.shape}")
    sgd_cfg = config.pretrain
    if net is None:
        net = new_network(tensors.shape[1:], config, stream=1)
    net.add_head("pretext", len(PERMUTATIONS))
    net.set_frozen(0)
    rng = np.random.default_rng([config.seed, 11])
    opt = SGD(sgd_cfg)
    for epoch in range(sgd_cfg.epochs):
        losses, hits = [], 0
        for idx in _batches(len(tensors), sgd_cfg.batch_size, rng):
            c = rng.integers(0, len(PERMUTATIONS), size=len(idx))
            fwd = net.forward(permute_batch(tensors[idx], c), heads=("pretext",))
            loss, g = categorical_cross_entropy(fwd.probs["pretext"], c)
            opt.step(net, net.backward(fwd, {"pretext": g}))
            losses.append(loss * len(idx))
            hits += int((fwd.probs["pretext"].argmax(1) == c).sum())
        rec = {"step": 1, "epoch": epoch, "loss": sum(losses) / len(tensors),
               "train_acc": hits / len(tensors)}
        log.info("step I epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["train_acc"])
        _emit(log_fn, rec)
    return net


def pretext_accuracy(net: Network, tensors, seed: int = 0) -> float:
    """Accuracy of the 24-way head on randomly permuted tensors."""
    rng = np.random.default_rng([seed, 12])
    c = rng.integers(0, len(PERMUTATIONS), size=len(tensors))
    return _accuracy(net.predict(permute_batch(np.asarray(tensors), c), "pretext"), c)


# ---------------------------------------------------------------------------
# step II

def step2_finetune(net: Network | None, x_l, y_l, K: int, config: PipelineConfig,
                   validation=None, log_fn: Callable | None = None) -> Network:
    """Replace any pretext head by a K-way ``"label"`` head and train on the
    labelled data with the backbone prefix frozen.

    With ``net=None`` (no self-supervised start) a fresh network is trained
    with every layer free.
    """
    x_l, y_l = np.asarray(x_l), np.asarray(y_l, dtype=np.int64)
    if K < 1 or len(x_l) == 0:
        raise ConfigError("fine-tuning needs labelled samples of at least one class")
    if y_l.min() < 0 or y_l.max() >= K:
        raise ConfigError(f"labels must lie in 0..{K - 1}")
    if net is None:
        net = new_network(x_l.shape[1:], config, stream=2)
        net.set_frozen(0)
    else:
        net = net.copy()
        if "pretext" in net.heads:
            net.remove_head("pretext")
        net.set_frozen(config.frozen_layers)
    if "label" in net.heads:
        net.remove_head("label")
    net.add_head("label", K)
    rng = np.random.default_rng([config.seed, 21])
    sgd_cfg = config.finetune
    opt = SGD(sgd_cfg)
    for epoch in range(sgd_cfg.epochs):
        total = 0.0
        for idx in _batches(len(x_l), sgd_cfg.batch_size, rng):
            fwd = net.forward(x_l[idx], heads=("label",))
            loss, g = categorical_cross_entropy(fwd.probs["label"], y_l[idx])
            opt.step(net, net.backward(fwd, {"label": g}))
            total += loss * len(idx)
        rec = {"step": 2, "epoch": epoch, "loss": total / len(x_l)}
        if validation is not None:
            rec["val_acc"] = _accuracy(net.predict(validation[0], "label"), validation[1])
        log.info("step II epoch %d %s", epoch, rec)
        _emit(log_fn, rec)
    return net


# ---------------------------------------------------------------------------
# step III

class SimilaritySource:
    """Pairwise targets for the clustering loss.

    ``"rfap"`` grows a forest on all unlabelled features once per epoch
    (:meth:`refresh`) and encodes each batch with it; the alternatives are
    computed on the batch features directly.
    """

    def __init__(self, method: str, urf: URFParams, seed: int, k: int | None = None):
        if method not in SIMILARITY_SOURCES:
            raise ConfigError(f"unknown similarity {method!r}")
        self.method, self.urf, self.seed, self.k = method, urf, seed, k
        self.forest = None

    def refresh(self, features, epoch: int) -> dict:
        if self.method != "rfap":
            return {}
        self.forest = train_urf(features, n_trees=self.urf.n_trees, max_depth=self.urf.max_depth,
                                min_leaf=self.urf.min_leaf, mtry=self.urf.mtry,
                                seed=[self.seed, 31, epoch])
        degenerate = self.forest.degenerate_trees
        if degenerate:
            log.warning("epoch %d: %d single-node trees", epoch, degenerate)
        return {"degenerate_trees": int(degenerate)}

    def __call__(self, batch_features) -> np.ndarray:
        if self.method == "rfap":
            return similarity_matrix(self.forest, batch_features)
        k = self.k
        if self.method == "knn":
            # a short final batch may hold fewer than k + 1 samples
            k = min(10 if k is None else k, len(batch_features) - 1)
        return evaluation.alt_similarity(batch_features, self.method, k)


def step3_cluster(net: Network, x_l, y_l, x_u, Q: int, config: PipelineConfig,
                  truth_u=None, log_fn: Callable | None = None):
    """Iterative clustering; returns ``(network, [ClusterAssignment per epoch])``.

    ``truth_u`` is only used to report ACC in the log.  With
    ``config.use_labeled`` false (or no labelled data) batches hold only
    unlabelled samples and ``L_cat`` is dropped.
    """
    if not isinstance(Q, (int, np.integer)) or Q < 2:
        raise ConfigError(f"Q must be >= 2, got {Q!r}")
    x_u = np.asarray(x_u)
    use_l = config.use_labeled and x_l is not None and len(x_l) > 0
    net = net.copy()
    K = 0
    if use_l:
        x_l, y_l = np.asarray(x_l), np.asarray(y_l, dtype=np.int64)
        if "label" not in net.heads:
            raise ConfigError("labelled training needs a fine-tuned classification head")
        K = net.heads["label"]
        net.extend_head("label", Q)
    elif "label" in net.heads:
        net.remove_head("label")
    for head in ("pretext", "cluster"):
        if head in net.heads:
            net.remove_head(head)
    net.add_head("cluster", Q)
    net.set_frozen(config.frozen_layers)

    sgd_cfg = config.cluster
    w = sgd_cfg.batch_size
    w_l = int(round(w * config.labeled_fraction)) if use_l else 0
    w_u = w - int(round(w * config.labeled_fraction))
    rng = np.random.default_rng([config.seed, 41])
    opt = SGD(sgd_cfg)
    sim = SimilaritySource(config.similarity, config.urf, config.seed, config.similarity_k)
    heads = ("label", "cluster") if use_l else ("cluster",)
    history = []
    for epoch in range(sgd_cfg.epochs):
        omega = ramp_up_weight(epoch, config.ramp_length, config.ramp_scale)
        rec = {"step": 3, "epoch": epoch, "omega": omega}
        rec.update(sim.refresh(extract_features(net, x_u), epoch))
        sums = dict.fromkeys(("cat", "cluster", "cons", "total"), 0.0)
        u_batches = _batches(len(x_u), w_u, rng)
        l_order = rng.permutation(len(x_l)) if use_l else None
        l_pos = 0
        for bu in u_batches:
            if use_l:
                if l_pos + w_l > len(l_order):
                    l_order, l_pos = rng.permutation(len(x_l)), 0
                bl = l_order[l_pos:l_pos + w_l]
                l_pos += w_l
                xb = np.concatenate([x_l[bl], x_u[bu]])
                yb = y_l[bl]
            else:
                xb, yb = x_u[bu], np.zeros(0, dtype=np.int64)
            nl = len(yb)
            fwd = net.forward(xb, heads=heads)
            P = fwd.probs["cluster"]
            d = {h: np.zeros_like(fwd.probs[h]) for h in heads}
            loss_cat = loss_cl = loss_cons = 0.0
            if config.cluster_loss and len(bu) > 1:
                S = sim(fwd.features[nl:])
                loss_cl, g = pairwise_cluster_loss(S, P[nl:])
                d["cluster"][nl:] += g
            if use_l:
                targets = np.concatenate([yb, K + P[nl:].argmax(axis=1)])
                loss_cat, g = categorical_cross_entropy(fwd.probs["label"], targets)
                d["label"] += g
            d_aug = None
            if config.consistency:
                xa = augment_batch(xb, config.augment, rng)
                fa = net.forward(xa, heads=heads)
                d_aug = {h: np.zeros_like(fa.probs[h]) for h in heads}
                lc, go, ga = consistency_loss(P[nl:], fa.probs["cluster"][nl:])
                loss_cons += lc
                d["cluster"][nl:] += omega * go
                d_aug["cluster"][nl:] += omega * ga
                if use_l:
                    lc, go, ga = consistency_loss(fwd.probs["label"][:nl], fa.probs["label"][:nl])
                    loss_cons += lc
                    d["label"][:nl] += omega * go
                    d_aug["label"][:nl] += omega * ga
            grads = net.backward(fwd, d)
            if d_aug is not None:
                grads = net.backward(fa, d_aug, grads=grads)
            opt.step(net, grads)
            total = loss_cat + loss_cl + omega * loss_cons
            for k, v in zip(sums, (loss_cat, loss_cl, loss_cons, total)):
                sums[k] += v
        rec.update({f"loss_{k}": v / len(u_batches) for k, v in sums.items()})
        assignment = assign_clusters(net, x_u, epoch)
        history.append(assignment)
        if use_l:
            rec["labeled_acc"] = _accuracy(net.predict(x_l, "label")[:, :K], y_l)
        if truth_u is not None:
            rec["acc"] = evaluation.hungarian_acc(assignment.labels, truth_u)
        log.info("step III epoch %d %s", epoch, rec)
        _emit(log_fn, rec)
    return net, history


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class PipelineResult:
    network: Network
    assignment: ClusterAssignment
    history: list
    Q: int
    q_scores: dict | None = None
    log: list = field(default_factory=list)
    acc: float | None = None


def run_pipeline(dataset: ScenarioDataset, config: PipelineConfig, evaluate: bool = True,
                 log_path=None) -> PipelineResult:
    """Steps I-III on a dataset with a label split.  With ``evaluate`` the
    unlabelled ground truth is used for logging ACC only."""
    records = []
    fh = open(log_path, "w") if log_path is not None else None

    def log_fn(rec):
        records.append(rec)
        if fh is not None:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        x_u = dataset.unlabeled()
        truth_u = dataset.unlabeled_truth() if evaluate else None
        net = step1_pretrain(dataset.tensors, config, log_fn=log_fn) if config.use_ssl else None
        x_l = y_l = None
        if config.use_labeled and dataset.K > 0:
            x_l, y_l = dataset.labeled()
            net = step2_finetune(net, x_l, y_l, dataset.K, config, log_fn=log_fn)
        elif net is None:
            net = new_network(dataset.grid.shape, config, stream=2)
        q_scores = None
        Q = config.n_clusters
        if Q == "estimate":
            Q, q_scores = evaluation.estimate_q(extract_features(net, x_u), *config.q_range,
                                                seed=config.seed)
            log_fn({"step": "estimate_q", "Q": Q, "scores": {str(k): v for k, v in q_scores.items()}})
        net, history = step3_cluster(net, x_l, y_l, x_u, int(Q), config, truth_u, log_fn)
    finally:
        if fh is not None:
            fh.close()
    final = history[-1] if history else assign_clusters(net, x_u)
    acc = evaluation.hungarian_acc(final.labels, truth_u) if truth_u is not None else None
    return PipelineResult(net, final, history, int(Q), q_scores, records, acc)


def ablation_config(config: PipelineConfig, no_ssl=False, no_labeled=False,
                    similarity: str | None = None) -> PipelineConfig:
    return replace(config, use_ssl=config.use_ssl and not no_ssl,
                   use_labeled=config.use_labeled and not no_labeled,
                   similarity=similarity or config.similarity)
