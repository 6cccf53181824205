"""Experiment configuration: plain ``key = value`` text with dotted keys.

Every known key has a default below; a config file or command-line
override may set any of them and nothing else.  Values are parsed by the
type of their default; lists are comma separated.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .forest import URFParams
from .nn import SGDConfig
from .pipeline import SIMILARITY_SOURCES, PipelineConfig
from .scenario import CLASS_NAMES, DESK_GRID, HIGHD_GRID, AugmentParams

_STEP = {"epochs": None, "learning_rate": 0.05, "momentum": 0.9, "weight_decay": 1e-4,
         "batch_size": 32}

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.source": "synthetic",        # synthetic | load
    "data.path": "",
    "data.n_per_class": 150,
    "data.grid": "desk",               # desk | highd
    "data.labeled": [0, 1, 2, 3],
    "data.unlabeled": [4, 5, 6],
    "data.thw_threshold": 4.0,
    "pipeline.feature_dim": 64,
    **{f"pipeline.pretrain.{k}": (30 if k == "epochs" else v) for k, v in _STEP.items()},
    **{f"pipeline.finetune.{k}": (20 if k == "epochs" else v) for k, v in _STEP.items()},
    **{f"pipeline.cluster.{k}": (50 if k == "epochs" else v) for k, v in _STEP.items()},
    "pipeline.ramp_length": 100.0,
    "pipeline.ramp_scale": 5.0,
    "pipeline.n_clusters": "3",        # integer or "estimate"
    "pipeline.q_min": 2,
    "pipeline.q_max": 8,
    "pipeline.labeled_fraction": 0.5,
    "pipeline.urf.n_trees": 50,
    "pipeline.urf.max_depth": 0,       # 0 = unlimited
    "pipeline.urf.min_leaf": 1,
    "pipeline.urf.mtry": 0,            # 0 = ceil(sqrt(F))
    "pipeline.augment.erase_fraction": 0.1,
    "pipeline.augment.noise_sigma": 0.05,
    "pipeline.frozen_layers": 3,
    "pipeline.similarity": "rfap",
    "pipeline.use_ssl": True,
    "pipeline.use_labeled": True,
    "pipeline.dtype": "float32",
    "eval.kmeans_restarts": 10,
    "eval.methods": ["rfap"],          # similarity sources for the summary table
    "eval.ablations": False,
}

_LIST_KEYS = {"data.labeled", "data.unlabeled", "eval.methods"}
_INT_LISTS = {"data.labeled", "data.unlabeled"}


def _parse_value(key: str, text: str):
    text = text.strip()
    default = DEFAULTS[key]
    try:
        if key in _LIST_KEYS:
            items = [t.strip() for t in text.split(",") if t.strip()]
            if key in _INT_LISTS:
                return [CLASS_NAMES.index(t) if t in CLASS_NAMES else int(t) for t in items]
            return items
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def load_settings(path=None, overrides=()) -> dict:
    """Defaults, then the config file, then ``key=value`` overrides."""
    settings = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        settings.update(parse_lines(p.read_text().splitlines(), str(p)))
    settings.update(parse_lines(overrides, "<override>"))
    return settings


def format_settings(settings: dict) -> str:
    def fmt(v):
        if isinstance(v, list):
            return ",".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {fmt(settings[k])}\n" for k in sorted(settings))


def config_hash(settings: dict) -> str:
    return hashlib.sha256(format_settings(settings).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    settings: dict
    pipeline: PipelineConfig

    @property
    def seed(self) -> int:
        return self.settings["seed"]

    @property
    def grid(self):
        return HIGHD_GRID if self.settings["data.grid"] == "highd" else DESK_GRID

    @property
    def labeled(self) -> list[int]:
        return self.settings["data.labeled"]

    @property
    def unlabeled(self) -> list[int]:
        return self.settings["data.unlabeled"]

    @property
    def hash(self) -> str:
        return config_hash(self.settings)


def _step(s, name) -> SGDConfig:
    return SGDConfig(**{k: s[f"pipeline.{name}.{k}"] for k in _STEP}, seed=s["seed"])


def build(settings: dict) -> ExperimentConfig:
    s = settings
    if s["data.source"] not in ("synthetic", "load"):
        raise ConfigError("data.source must be synthetic or load")
    if s["data.grid"] not in ("desk", "highd"):
        raise ConfigError("data.grid must be desk or highd")
    lab, unl = s["data.labeled"], s["data.unlabeled"]
    if set(lab) & set(unl):
        raise ConfigError(f"classes {sorted(set(lab) & set(unl))} are both labelled and unlabelled")
    if len(set(lab)) != len(lab) or len(set(unl)) != len(unl):
        raise ConfigError("duplicate class in the label split")
    if not unl:
        raise ConfigError("at least one unlabelled class is required")
    if s["data.source"] == "synthetic":
        bad = [c for c in lab + unl if not 0 <= c < len(CLASS_NAMES)]
        if bad:
            raise ConfigError(f"classes {bad} do not exist")
    for m in s["eval.methods"]:
        if m not in SIMILARITY_SOURCES:
            raise ConfigError(f"unknown similarity method {m!r} in eval.methods")
    q = s["pipeline.n_clusters"]
    if q != "estimate":
        try:
            q = int(q)
        except ValueError:
            raise ConfigError(f"pipeline.n_clusters must be an integer or 'estimate', got {q!r}") from None
    pipe = PipelineConfig(
        seed=s["seed"],
        feature_dim=s["pipeline.feature_dim"],
        pretrain=_step(s, "pretrain"),
        finetune=_step(s, "finetune"),
        cluster=_step(s, "cluster"),
        ramp_length=s["pipeline.ramp_length"],
        ramp_scale=s["pipeline.ramp_scale"],
        n_clusters=q,
        q_range=(s["pipeline.q_min"], s["pipeline.q_max"]),
        labeled_fraction=s["pipeline.labeled_fraction"],
        urf=URFParams(n_trees=s["pipeline.urf.n_trees"],
                      max_depth=s["pipeline.urf.max_depth"] or None,
                      min_leaf=s["pipeline.urf.min_leaf"],
                      mtry=s["pipeline.urf.mtry"] or None, seed=s["seed"]),
        augment=AugmentParams(s["pipeline.augment.erase_fraction"], s["pipeline.augment.noise_sigma"]),
        frozen_layers=s["pipeline.frozen_layers"],
        similarity=s["pipeline.similarity"],
        use_ssl=s["pipeline.use_ssl"],
        use_labeled=s["pipeline.use_labeled"],
        dtype=s["pipeline.dtype"],
    )
    return ExperimentConfig(dict(settings), pipe)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    return build(load_settings(path, overrides))
