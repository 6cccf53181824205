"""Shared fixtures.  Long training runs are cached per session so the
acceptance suite and the pipeline tests pay for them once."""
from __future__ import annotations

import time

import numpy as np
import pytest

from rfapclust.nn import Conv3D, Dense, Flatten, MaxPool3D, Network, ReLU
from rfapclust.pipeline import PipelineConfig, ablation_config, run_pipeline
from rfapclust.scenario import GeneratorConfig, generate_synthetic

LABELED = (0, 1, 2, 3)
ACCEPT_SEEDS = (0, 1, 2, 3, 4)
ACCEPT_PER_CLASS = 150


def small_net(seed=0, randomise=True, heads=(("label", 5), ("cluster", 3))):
    """Tiny float64 network covering every layer kind.

    With ``randomise`` all parameters, biases included, are redrawn so the
    check point is generic: no ReLU input or pooling tie sits on a kink.
    """
    layers = [Conv3D("conv1", out_channels=3, kernel=(3, 3, 2)), ReLU("relu1"),
              MaxPool3D("pool1", window=(2, 2, 1)),
              Conv3D("conv2", out_channels=4, kernel=(1, 2, 2)), ReLU("relu2"),
              MaxPool3D("pool2", window=(2, 1, 2)),
              Flatten("flatten"), Dense("fc", units=6), ReLU("relu3")]
    net = Network((1, 6, 6, 4), layers, seed=seed, dtype=np.float64)
    for name, n in heads:
        net.add_head(name, n)
    if randomise:
        rng = np.random.default_rng([seed, 99])
        for k, v in net.params.items():
            if k.endswith(".b"):
                v[...] = rng.uniform(-0.5, 0.5, v.shape)
            else:
                v[...] = rng.normal(0.0, 1.0, v.shape) / np.sqrt(v[0].size)
    return net


def synthetic(seed, n_per_class, labeled=LABELED):
    return generate_synthetic(GeneratorConfig(seed=seed, n_per_class=n_per_class)
                              ).with_label_split(labeled)


class RunCache:
    """Full-size pipeline runs keyed by (seed, variant)."""

    VARIANTS = {"full": {}, "no-ssl": {"no_ssl": True}, "no-labeled": {"no_labeled": True}}

    def __init__(self):
        self.results = {}
        self.cpu_seconds = {}
        self.data = {}

    def dataset(self, seed):
        if seed not in self.data:
            self.data[seed] = synthetic(seed, ACCEPT_PER_CLASS)
        return self.data[seed]

    def get(self, seed, variant="full"):
        key = (seed, variant)
        if key not in self.results:
            ds = self.dataset(seed)
            cfg = ablation_config(PipelineConfig(seed=seed), **self.VARIANTS[variant])
            t0 = time.process_time()
            self.results[key] = run_pipeline(ds, cfg, evaluate=True)
            self.cpu_seconds[key] = time.process_time() - t0
        return self.results[key]


@pytest.fixture(scope="session")
def pipeline_runs():
    return RunCache()


def rel_error(ga, gn):
    """The relative error used throughout: |ga - gn| / (|ga| + |gn| + 1e-12)."""
    return abs(ga - gn) / (abs(ga) + abs(gn) + 1e-12)


def finite_difference_error(fun, arrays, analytic, eps=1e-6, n_checks=200, seed=0):
    """Max relative error between ``analytic`` gradients of the scalar
    ``fun()`` and central differences, perturbing ``arrays`` in place."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > n_checks:
            idx = rng.choice(flat.size, n_checks, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            up = fun()
            flat[i] = old - eps
            down = fun()
            flat[i] = old
            worst = max(worst, rel_error(gflat[i], (up - down) / (2 * eps)))
    return worst


def composed_problem(seed=0, weight=0.7):
    """Small network plus a loss combining cross-entropy, the pairwise
    clustering loss and consistency on both heads, all backpropagated
    through two forward passes (clean and augmented inputs)."""
    from rfapclust.nn import categorical_cross_entropy, consistency_loss, pairwise_cluster_loss

    net = small_net(seed)
    rng = np.random.default_rng([seed, 7])
    x = rng.normal(0.0, 1.0, (4, 1, 6, 6, 4))
    xa = x + rng.normal(0.0, 0.3, x.shape)
    S = rng.integers(0, 2, (4, 4)).astype(float)
    S = np.maximum(S, S.T)
    np.fill_diagonal(S, 1.0)
    y = rng.integers(0, 5, 4)

    def loss_fn(n):
        f, fa = n.forward(x), n.forward(xa)
        l_cat, g_cat = categorical_cross_entropy(f.probs["label"], y)
        l_cl, g_cl = pairwise_cluster_loss(S, f.probs["cluster"])
        l_cu, go_u, ga_u = consistency_loss(f.probs["cluster"], fa.probs["cluster"])
        l_cl2, go_l, ga_l = consistency_loss(f.probs["label"], fa.probs["label"])
        grads = n.backward(f, {"label": g_cat + weight * go_l, "cluster": g_cl + weight * go_u})
        grads = n.backward(fa, {"label": weight * ga_l, "cluster": weight * ga_u}, grads=grads)
        return l_cat + l_cl + weight * (l_cu + l_cl2), grads

    return net, loss_fn


def random_tree(rng, n_features=3, max_depth=6, p_split=0.75):
    """Random indexed tree: each node splits with probability ``p_split``
    (always at the root) on a random feature at a N(0, 1) threshold."""
    from rfapclust.forest import Tree, index_tree

    feature, threshold, left, right = [], [], [], []

    def grow(depth):
        i = len(feature)
        feature.append(-1), threshold.append(0.0), left.append(-1), right.append(-1)
        if depth < max_depth and (depth == 1 or rng.random() < p_split):
            feature[i] = int(rng.integers(n_features))
            threshold[i] = float(rng.normal())
            left[i] = grow(depth + 1)
            right[i] = grow(depth + 1)
        return i

    grow(1)
    return index_tree(Tree(feature, threshold, left, right))


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, title, ok, detail=""):
    """Record (and print) the one-line verdict of an acceptance criterion."""
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
