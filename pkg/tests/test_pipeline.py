import csv
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import synthetic
from rfapclust import pipeline
from rfapclust.errors import ConfigError
from rfapclust.forest import URFParams
from rfapclust.nn import SGDConfig
from rfapclust.pipeline import (ClusterAssignment, PipelineConfig, SimilaritySource,
                                ablation_config, assign_clusters, extract_features,
                                new_network, permute_batch, run_pipeline, step1_pretrain,
                                step2_finetune, step3_cluster)
from rfapclust.scenario import (PERMUTATIONS, GeneratorConfig, generate_synthetic,
                                permutation_order, shuffle_temporal, split_dataset)


def tiny_config(**kw):
    base = PipelineConfig(pretrain=SGDConfig(epochs=1), finetune=SGDConfig(epochs=1),
                          cluster=SGDConfig(epochs=2), urf=URFParams(n_trees=5))
    return replace(base, **kw)


@pytest.fixture(scope="module")
def tiny():
    return synthetic(0, 12)


@pytest.fixture(scope="module")
def tiny_finetuned(tiny):
    cfg = tiny_config()
    x, y = tiny.labeled()
    return step2_finetune(step1_pretrain(tiny.tensors, cfg), x, y, tiny.K, cfg)


def params_of(net, prefix):
    return {k: v.copy() for k, v in net.params.items() if k.split(".")[0] in prefix}


# -- step I ------------------------------------------------------------------------------

def test_permute_batch_matches_shuffle():
    x = np.random.default_rng(0).random((5, 4, 3, 6)).astype(np.float32)
    c = np.array([0, 5, 23, 11, 7])
    out = permute_batch(x, c)
    for n in range(5):
        assert np.array_equal(out[n], shuffle_temporal(x[n], permutation_order(c[n])))


def test_step1_reads_no_labels(tiny):
    before = tiny.label_reads
    net = step1_pretrain(tiny.tensors, tiny_config())
    assert tiny.label_reads == before
    assert net.heads == {"pretext": len(PERMUTATIONS)}


def test_run_pipeline_reads_no_labels_during_step1(tiny, monkeypatch):
    seen = {}
    real = pipeline.step1_pretrain

    def audited(tensors, config, **kw):
        seen["before"] = tiny.label_reads
        out = real(tensors, config, **kw)
        seen["after"] = tiny.label_reads
        return out

    monkeypatch.setattr(pipeline, "step1_pretrain", audited)
    run_pipeline(tiny, tiny_config(), evaluate=False)
    assert seen["before"] == seen["after"]


def test_permutation_classes_are_balanced(tiny, monkeypatch):
    drawn = []
    real = pipeline.permute_batch

    def recording(tensors, classes):
        drawn.extend(np.asarray(classes).tolist())
        return real(tensors, classes)

    monkeypatch.setattr(pipeline, "permute_batch", recording)
    step1_pretrain(tiny.tensors, tiny_config(pretrain=SGDConfig(epochs=6)))
    counts = np.bincount(drawn, minlength=24)
    assert len(drawn) == 6 * len(tiny) and counts.min() > 0
    assert chisquare(counts).pvalue > 0.01


def test_step1_rejects_wrong_frame_count():
    with pytest.raises(ConfigError):
        step1_pretrain(np.zeros((3, 3, 16, 64)), tiny_config())


# -- step II -------------------------------------------------------------------------------

def test_finetune_heads_and_frozen_prefix(tiny):
    cfg = tiny_config()
    pre = step1_pretrain(tiny.tensors, cfg)
    frozen_before = params_of(pre, {"conv1"})
    x, y = tiny.labeled()
    net = step2_finetune(pre, x, y, tiny.K, cfg)
    assert net.heads == {"label": tiny.K}
    assert net.params["head.label.w"].shape[0] == 4
    for k, v in frozen_before.items():
        assert v.tobytes() == net.params[k].tobytes()
    assert not np.array_equal(pre.params["fc.w"], net.params["fc.w"])
    with pytest.raises(ConfigError):
        step2_finetune(pre, x, y + 10, tiny.K, cfg)


def test_finetune_reaches_high_held_out_accuracy():
    ds = generate_synthetic(GeneratorConfig(seed=0, n_per_class=100)).restrict([0, 1, 2, 3])
    ds = ds.with_label_split([0, 1, 2, 3])
    train, val, test = split_dataset(ds, seed=0)
    cfg = PipelineConfig(pretrain=SGDConfig(epochs=5), finetune=SGDConfig(epochs=15))
    x, y = train.labeled()
    records = []
    net = step2_finetune(step1_pretrain(train.tensors, cfg), x, y, 4, cfg,
                         validation=val.labeled(), log_fn=records.append)
    xt, yt = test.labeled()
    acc = (net.predict(xt, "label").argmax(axis=1) == yt).mean()
    assert acc > 0.9
    assert all("val_acc" in r for r in records)


# -- step III -----------------------------------------------------------------------------

def test_cluster_step_heads_and_frozen_prefix(tiny, tiny_finetuned):
    x, y = tiny.labeled()
    frozen = params_of(tiny_finetuned, {"conv1"})
    net, history = step3_cluster(tiny_finetuned, x, y, tiny.unlabeled(), 3, tiny_config())
    assert net.heads == {"label": tiny.K + 3, "cluster": 3}
    for k, v in frozen.items():
        assert v.tobytes() == net.params[k].tobytes()
    assert len(history) == 2 and all(isinstance(h, ClusterAssignment) for h in history)
    assert set(history[-1].clusters) <= {1, 2, 3}


def test_extension_keeps_first_k_columns(tiny, tiny_finetuned):
    x, y = tiny.labeled()
    net, history = step3_cluster(tiny_finetuned, x, y, tiny.unlabeled(), 3,
                                 tiny_config(cluster=SGDConfig(epochs=0)))
    K = tiny.K
    assert history == []
    assert np.array_equal(net.params["head.label.w"][:K], tiny_finetuned.params["head.label.w"])
    assert np.array_equal(net.params["head.label.b"][:K], tiny_finetuned.params["head.label.b"])


def test_omega_schedule(tiny, tiny_finetuned):
    x, y = tiny.labeled()
    records = []
    cfg = tiny_config(cluster=SGDConfig(epochs=3), ramp_length=2, ramp_scale=5.0)
    step3_cluster(tiny_finetuned, x, y, tiny.unlabeled(), 3, cfg, log_fn=records.append)
    omegas = [r["omega"] for r in records]
    assert abs(omegas[0] - 5 * np.exp(-5)) < 1e-12
    assert omegas[2] == 5.0 and omegas[0] < omegas[1] < omegas[2]


def test_labelled_accuracy_survives_clustering_epochs():
    ds = synthetic(0, 150)
    x, y = ds.labeled()
    cfg = PipelineConfig(finetune=SGDConfig(epochs=15), cluster=SGDConfig(epochs=10))
    net = step2_finetune(None, x, y, ds.K, cfg)
    initial = (net.predict(x, "label").argmax(axis=1) == y).mean()
    records = []
    step3_cluster(net, x, y, ds.unlabeled(), 3,
                  replace(cfg, cluster_loss=False, consistency=False), log_fn=records.append)
    assert len(records) == 10
    assert records[-1]["labeled_acc"] >= initial


@pytest.mark.slow
def test_total_loss_decreases_over_first_epochs(pipeline_runs):
    result = pipeline_runs.get(0)
    totals = [r["loss_total"] for r in result.log if r["step"] == 3][:5]
    assert len(totals) == 5
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_cluster_rejects_small_q(tiny, tiny_finetuned):
    x, y = tiny.labeled()
    for q in (1, 0, 2.5):
        with pytest.raises(ConfigError):
            step3_cluster(tiny_finetuned, x, y, tiny.unlabeled(), q, tiny_config())


def test_cluster_without_labelled_data(tiny):
    net = new_network(tiny.grid.shape, tiny_config(), stream=2)
    records = []
    out, history = step3_cluster(net, None, None, tiny.unlabeled(), 3,
                                 tiny_config(use_labeled=False), log_fn=records.append)
    assert out.heads == {"cluster": 3}
    assert all(r["loss_cat"] == 0.0 and "labeled_acc" not in r for r in records)


def test_similarity_sources(tiny_finetuned, tiny):
    feats = extract_features(tiny_finetuned, tiny.unlabeled())
    knn = SimilaritySource("knn", URFParams(), 0)
    S = knn(feats[:3])  # k clamped to the batch
    assert S.shape == (3, 3) and np.all(np.diag(S) == 1.0)
    rf = SimilaritySource("rfap", URFParams(n_trees=4), 0)
    info = rf.refresh(feats, epoch=0)
    assert "degenerate_trees" in info and rf(feats[:5]).shape == (5, 5)
    with pytest.raises(ConfigError):
        SimilaritySource("jaccard", URFParams(), 0)


# -- features and assignment -------------------------------------------------------------------

def test_extract_features(tiny_finetuned, tiny):
    x = tiny.unlabeled()[:5].copy()
    x[1] = x[0]
    F = extract_features(tiny_finetuned, x)
    assert F.shape == (5, 64) and np.array_equal(F[0], F[1])
    assert np.max(np.abs(extract_features(tiny_finetuned, x[3:4])[0] - F[3])) < 1e-6


def test_assignment_tie_and_one_hot():
    a = ClusterAssignment(np.array([[1 / 3, 1 / 3, 1 / 3], [0.0, 0.0, 1.0], [0.2, 0.8, 0.0]]), 0)
    assert a.clusters.tolist() == [1, 3, 2] and a.Q == 3


def test_uniform_head_gives_cluster_one(tiny_finetuned, tiny):
    net = tiny_finetuned.copy()
    net.add_head("cluster", 3)
    net.params["head.cluster.w"][...] = 0.0
    net.params["head.cluster.b"][...] = 0.0
    assert assign_clusters(net, tiny.unlabeled()).clusters.tolist() == [1] * len(tiny.unlabeled())
    with pytest.raises(ConfigError):
        assign_clusters(tiny_finetuned, tiny.unlabeled())


def test_assignment_permutation_equivariant(tiny, tiny_finetuned):
    x, y = tiny.labeled()
    net, _ = step3_cluster(tiny_finetuned, x, y, tiny.unlabeled(), 3,
                           tiny_config(cluster=SGDConfig(epochs=1)))
    xu = tiny.unlabeled()
    perm = np.random.default_rng(0).permutation(len(xu))
    a, b = assign_clusters(net, xu), assign_clusters(net, xu[perm])
    assert np.array_equal(a.labels[perm], b.labels)
    assert np.max(np.abs(a.probs[perm] - b.probs)) < 1e-6


def test_assignment_csv(tmp_path):
    a = ClusterAssignment(np.array([[0.25, 0.75], [0.5, 0.5]]), 3)
    a.to_csv(tmp_path / "a.csv", ["s1", "s2"])
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows == [["id", "cluster", "p1", "p2"], ["s1", "2", "0.25", "0.75"],
                    ["s2", "1", "0.5", "0.5"]]
    with pytest.raises(ConfigError):
        a.to_csv(tmp_path / "b.csv", ["s1"])


# -- orchestration ---------------------------------------------------------------------------

def test_pipeline_is_deterministic(tiny, tmp_path):
    cfg = tiny_config()
    a = run_pipeline(tiny, cfg, log_path=tmp_path / "a.jsonl")
    b = run_pipeline(tiny, cfg, log_path=tmp_path / "b.jsonl")
    assert np.array_equal(a.assignment.probs, b.assignment.probs)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert 0.0 <= a.acc <= 1.0


def test_pipeline_estimates_q(tiny):
    result = run_pipeline(tiny, tiny_config(n_clusters="estimate", q_range=(2, 4)))
    assert 2 <= result.Q <= 4 and set(result.q_scores) == {2, 3, 4}
    assert any(r["step"] == "estimate_q" for r in result.log)
    assert result.assignment.Q == result.Q


@pytest.mark.parametrize("flags", [{"no_ssl": True}, {"no_labeled": True}])
def test_ablation_variants_run(tiny, flags):
    cfg = ablation_config(tiny_config(), **flags)
    result = run_pipeline(tiny, cfg)
    steps = {r["step"] for r in result.log}
    assert (1 in steps) == ("no_ssl" not in flags)
    assert (2 in steps) == ("no_labeled" not in flags)
    assert result.assignment.probs.shape == (len(tiny.unlabeled()), 3)


def test_config_validation():
    for kw in ({"ramp_length": 0}, {"n_clusters": 1}, {"labeled_fraction": 1.0},
               {"similarity": "jaccard"}, {"dtype": "float16"}, {"frozen_layers": -1}):
        with pytest.raises(ConfigError):
            PipelineConfig(**kw)
