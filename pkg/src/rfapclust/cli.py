"""Command-line driver.

Every command works inside one run directory (``--out``) and records what it
wrote in ``manifest.json`` (config hash, seed, content digests).  Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, pipeline
from .config import ExperimentConfig, format_settings, load_settings, build
from .errors import ConfigError, DataError, NumericError
from .highd import IngestReport, ingest_highd
from .nn import Network
from .scenario import GeneratorConfig, ScenarioDataset, generate_synthetic

log = logging.getLogger("rfapclust")

COMMANDS = ("gen-data", "ingest-highd", "pretrain", "finetune", "cluster", "evaluate",
            "estimate-q", "compare-similarities", "reproduce")


# ---------------------------------------------------------------------------
# run directory bookkeeping

def git_blob_digest(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class Run:
    def __init__(self, out, exp: ExperimentConfig):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.exp = exp
        self.manifest_path = self.out / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"artifacts": {}, "commands": {}}

    def path(self, name) -> Path:
        return self.out / name

    def record(self, command: str, files, **info):
        for name in files:
            data = self.path(name).read_bytes()
            self.manifest["artifacts"][name] = {
                "git_blob": git_blob_digest(data),
                "sha256": hashlib.sha256(data).hexdigest(),
                "bytes": len(data),
                "command": command,
                "config_hash": self.exp.hash,
                "seed": self.exp.seed,
            }
        self.manifest["commands"][command] = {"config_hash": self.exp.hash, "seed": self.exp.seed,
                                              **info}
        self.path("config.txt").write_text(format_settings(self.exp.settings))
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")

    def data_stem(self) -> Path:
        s = self.exp.settings
        if s["data.source"] == "load":
            if not s["data.path"]:
                raise ConfigError("data.source = load needs data.path")
            return Path(s["data.path"])
        return self.path("data")

    def dataset(self) -> ScenarioDataset:
        ds = ScenarioDataset.load(self.data_stem())
        if ds.class_names:
            classes = self.exp.labeled + self.exp.unlabeled
            bad = [c for c in classes if not 0 <= c < len(ds.class_names)]
            if bad:
                raise ConfigError(f"classes {bad} do not exist in the dataset")
            ds = ds.restrict(classes).with_label_split(self.exp.labeled)
        return ds

    def network(self, name) -> Network:
        stem = self.path(name)
        if not stem.with_suffix(".json").exists():
            raise DataError(f"checkpoint {stem.with_suffix('.json')} not found; run the earlier step first")
        return Network.load(stem, dtype=np.dtype(self.exp.pipeline.dtype))


class JsonLines:
    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, rec):
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(run: Run, args):
    s = run.exp.settings
    if s["data.source"] != "synthetic":
        raise ConfigError("gen-data needs data.source = synthetic")
    ds = generate_synthetic(GeneratorConfig(seed=run.exp.seed, n_per_class=s["data.n_per_class"],
                                            grid=run.exp.grid))
    ds = ds.restrict(run.exp.labeled + run.exp.unlabeled).with_label_split(run.exp.labeled)
    ds.save(run.path("data"))
    run.record("gen-data", ["data.bin", "data.json"], samples=len(ds))
    print(f"wrote {len(ds)} scenarios to {run.path('data.bin')}")


def cmd_ingest_highd(run: Run, args):
    if not args.tracks or not args.meta:
        raise ConfigError("ingest-highd needs --tracks and --meta")
    report = IngestReport()
    ds = ingest_highd(args.tracks, args.meta, config=run.exp.grid,
                      thw_threshold=run.exp.settings["data.thw_threshold"], report=report)
    ds.save(run.path("data"))
    run.record("ingest-highd", ["data.bin", "data.json"], samples=len(ds),
               skipped_history=report.skipped_history)
    print(f"extracted {len(ds)} scenarios ({report.skipped_history} skipped for short history)")


def cmd_pretrain(run: Run, args):
    ds = run.dataset()
    logger = JsonLines(run.path("pretrain_log.jsonl"))
    try:
        net = pipeline.step1_pretrain(ds.tensors, run.exp.pipeline, log_fn=logger)
    finally:
        logger.close()
    net.save(run.path("pretrain"), {"step": 1})
    run.record("pretrain", ["pretrain.params", "pretrain.json", "pretrain_log.jsonl"])
    print(f"pretext training done; checkpoint {run.path('pretrain.json')}")


def _finetuned(run: Run, ds: ScenarioDataset, write: bool = True) -> Network:
    cfg = run.exp.pipeline
    net = run.network("pretrain") if cfg.use_ssl else None
    x_l, y_l = ds.labeled()
    logger = JsonLines(run.path("finetune_log.jsonl")) if write else None
    try:
        net = pipeline.step2_finetune(net, x_l, y_l, ds.K, cfg, log_fn=logger)
    finally:
        if logger:
            logger.close()
    return net


def cmd_finetune(run: Run, args):
    ds = run.dataset()
    if ds.K == 0:
        raise ConfigError("fine-tuning needs labelled classes")
    net = _finetuned(run, ds)
    net.save(run.path("finetune"), {"step": 2})
    run.record("finetune", ["finetune.params", "finetune.json", "finetune_log.jsonl"],
               use_ssl=run.exp.pipeline.use_ssl)
    print(f"fine-tuning done; checkpoint {run.path('finetune.json')}")


def _start_network(run: Run, ds: ScenarioDataset) -> Network:
    """Network entering step III under the configured ablations."""
    cfg = run.exp.pipeline
    if cfg.use_labeled and ds.K > 0:
        return run.network("finetune")
    if cfg.use_ssl:
        return run.network("pretrain")
    return pipeline.new_network(ds.grid.shape, cfg, stream=2)


def _resolve_q(run: Run, ds, net) -> tuple[int, dict | None]:
    cfg = run.exp.pipeline
    if cfg.n_clusters != "estimate":
        return int(cfg.n_clusters), None
    return evaluation.estimate_q(pipeline.extract_features(net, ds.unlabeled()), *cfg.q_range,
                                 seed=cfg.seed)


def _cluster(run: Run, ds, cfg, tag: str):
    """Step III from the stored checkpoints; writes ``<tag>`` artifacts."""
    net = _start_network(run, ds)
    Q, _ = _resolve_q(run, ds, net)
    x_l = y_l = None
    if cfg.use_labeled and ds.K > 0:
        x_l, y_l = ds.labeled()
    truth = ds.unlabeled_truth() if ds.class_names else None
    logger = JsonLines(run.path(f"{tag}_log.jsonl"))
    try:
        net, history = pipeline.step3_cluster(net, x_l, y_l, ds.unlabeled(), Q, cfg, truth, logger)
    finally:
        logger.close()
    assignment = history[-1] if history else pipeline.assign_clusters(net, ds.unlabeled())
    assignment.to_csv(run.path(f"{tag}_assignments.csv"), ds.unlabeled_ids())
    return net, assignment


def cmd_cluster(run: Run, args):
    ds = run.dataset()
    net, assignment = _cluster(run, ds, run.exp.pipeline, "cluster")
    net.save(run.path("cluster"), {"step": 3})
    run.record("cluster", ["cluster.params", "cluster.json", "cluster_log.jsonl",
                           "cluster_assignments.csv"],
               similarity=run.exp.pipeline.similarity, Q=assignment.Q,
               use_ssl=run.exp.pipeline.use_ssl, use_labeled=run.exp.pipeline.use_labeled)
    print(f"clustered {len(assignment.labels)} scenarios into {assignment.Q} clusters "
          f"using {run.exp.pipeline.similarity} similarity")


def read_assignments(path, ids) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"assignment file {path} not found; run cluster first")
    with open(path, newline="") as fh:
        rows = {r["id"]: int(r["cluster"]) for r in csv.DictReader(fh)}
    missing = [i for i in ids if i not in rows]
    if missing:
        raise DataError(f"{len(missing)} unlabelled scenarios missing from {path.name}")
    return np.array([rows[i] for i in ids])


def _metrics(run: Run, ds, tag="cluster") -> dict:
    if not ds.class_names:
        raise DataError("dataset carries no ground truth; nothing to evaluate")
    truth = ds.unlabeled_truth()
    pred = read_assignments(run.path(f"{tag}_assignments.csv"), ds.unlabeled_ids())
    x_u = ds.unlabeled()
    raw = evaluation.kmeans(x_u.reshape(len(x_u), -1), ds.Q_truth, seed=run.exp.seed,
                            restarts=run.exp.settings["eval.kmeans_restarts"])
    table, p_vals, t_vals = evaluation.contingency_table(pred, truth)
    return {
        "acc": evaluation.hungarian_acc(pred, truth),
        "kmeans_raw_acc": evaluation.hungarian_acc(raw, truth),
        "n_unlabeled": int(len(truth)),
        "Q": int(len(np.unique(pred))),
        "Q_truth": int(ds.Q_truth),
        "contingency": {"clusters": p_vals.tolist(),
                        "classes": [ds.class_names[int(c)] for c in t_vals],
                        "counts": table.tolist()},
    }


def cmd_evaluate(run: Run, args):
    ds = run.dataset()
    metrics = _metrics(run, ds)
    _write_json(run.path("metrics.json"), metrics)
    run.record("evaluate", ["metrics.json"])
    print(f"ACC {metrics['acc']:.4f} (raw k-means {metrics['kmeans_raw_acc']:.4f})")


def cmd_estimate_q(run: Run, args):
    ds = run.dataset()
    net = _start_network(run, ds)
    best, scores = evaluation.estimate_q(pipeline.extract_features(net, ds.unlabeled()),
                                         *run.exp.pipeline.q_range, seed=run.exp.seed)
    out = {"Q": best, "silhouette": {str(q): v for q, v in scores.items()}}
    if ds.class_names:
        out["Q_truth"] = ds.Q_truth
    _write_json(run.path("estimate_q.json"), out)
    run.record("estimate-q", ["estimate_q.json"])
    print(f"estimated Q = {best}")


def _similarity_rows(run: Run, ds, methods):
    from dataclasses import replace
    rows = []
    for m in methods:
        tag = f"sim_{m}"
        _cluster(run, ds, replace(run.exp.pipeline, similarity=m), tag)
        rows.append((m, _metrics(run, ds, tag)["acc"]))
    return rows


def cmd_compare_similarities(run: Run, args):
    ds = run.dataset()
    rows = _similarity_rows(run, ds, pipeline.SIMILARITY_SOURCES)
    _write_csv(run.path("similarities.csv"), ["similarity", "acc"],
               [(m, f"{a:.6f}") for m, a in rows])
    files = ["similarities.csv"] + [f"sim_{m}_assignments.csv" for m, _ in rows]
    run.record("compare-similarities", files)
    for m, a in rows:
        print(f"{m:8s} ACC {a:.4f}")


def cmd_reproduce(run: Run, args):
    """gen-data -> pretrain -> finetune -> cluster -> evaluate, then a
    summary of ACC per method."""
    from dataclasses import replace
    cfg = run.exp.pipeline
    if run.exp.settings["data.source"] == "synthetic":
        cmd_gen_data(run, args)
    ds = run.dataset()
    if cfg.use_ssl:
        cmd_pretrain(run, args)
    if cfg.use_labeled and ds.K > 0:
        cmd_finetune(run, args)
    cmd_cluster(run, args)
    cmd_evaluate(run, args)
    metrics = json.loads(run.path("metrics.json").read_text())
    truth = ds.unlabeled_truth()
    feats = pipeline.extract_features(_start_network(run, ds), ds.unlabeled())
    rows = [("kmeans-raw", metrics["kmeans_raw_acc"]),
            ("kmeans-features", evaluation.hungarian_acc(
                evaluation.kmeans(feats, ds.Q_truth, seed=run.exp.seed,
                                  restarts=run.exp.settings["eval.kmeans_restarts"]), truth)),
            (f"proposed-{cfg.similarity}", metrics["acc"])]
    others = [m for m in run.exp.settings["eval.methods"] if m != cfg.similarity]
    rows += [(f"proposed-{m}", a) for m, a in _similarity_rows(run, ds, others)]
    if run.exp.settings["eval.ablations"]:
        for name, flags in (("no-ssl", {"use_ssl": False}), ("no-labeled", {"use_labeled": False})):
            sub = Run(run.out / name, ExperimentConfig(
                {**run.exp.settings, **{f"pipeline.{k}": v for k, v in flags.items()}},
                replace(cfg, **flags)))
            sub_ds = sub_data(run, sub)
            if sub.exp.pipeline.use_ssl:
                cmd_pretrain(sub, args)
            if sub.exp.pipeline.use_labeled:
                cmd_finetune(sub, args)
            cmd_cluster(sub, args)
            rows.append((name, _metrics(sub, sub_ds)["acc"]))
    _write_csv(run.path("summary.csv"), ["method", "acc"], [(m, f"{a:.6f}") for m, a in rows])
    _write_json(run.path("summary.json"), {"seed": run.exp.seed, "config_hash": run.exp.hash,
                                           "acc": {m: a for m, a in rows}})
    run.record("reproduce", ["summary.csv", "summary.json"])
    print(run.path("summary.csv").read_text(), end="")


def sub_data(parent: Run, sub: Run) -> ScenarioDataset:
    """Ablation runs reuse the parent's dataset files."""
    for suffix in (".bin", ".json"):
        sub.path("data" + suffix).write_bytes(parent.data_stem().with_suffix(suffix).read_bytes())
    sub.exp.settings["data.source"] = "synthetic"
    return sub.dataset()


HANDLERS = {
    "gen-data": cmd_gen_data,
    "ingest-highd": cmd_ingest_highd,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "estimate-q": cmd_estimate_q,
    "compare-similarities": cmd_compare_similarities,
    "reproduce": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfapclust", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="dotted-key config overrides, e.g. pipeline.cluster.epochs=10")
    p.add_argument("-c", "--config", help="key = value config file")
    p.add_argument("-o", "--out", default="run", help="run directory (default: run)")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-ssl", action="store_true", help="skip self-supervised pre-training")
    p.add_argument("--no-labeled", action="store_true",
                   help="skip fine-tuning and drop labelled data from clustering")
    p.add_argument("--similarity", choices=pipeline.SIMILARITY_SOURCES)
    p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("--tracks", help="highD tracks CSV (ingest-highd)")
    p.add_argument("--meta", help="highD recording meta CSV (ingest-highd)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.no_ssl:
            overrides.append("pipeline.use_ssl=false")
        if args.no_labeled:
            overrides.append("pipeline.use_labeled=false")
        if args.similarity:
            overrides.append(f"pipeline.similarity={args.similarity}")
        exp = build(load_settings(args.config, overrides))
        run = Run(args.out, exp)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                HANDLERS[args.command](run, args)
        else:
            HANDLERS[args.command](run, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
