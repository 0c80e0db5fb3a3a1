"""Run configuration: JSON schema, validation, and the data pipeline.

A config file has five sections mirroring RunConfig: model, algo, privacy,
data, run.  One config fully determines a run; the same file plus the same
seed reproduces byte-identical metrics.  Epsilon accepts the literal string
"inf" for the non-private setting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .algorithms import AlgoConfig
from .data import Dataset, Partition, generate_synthetic, load_csv, load_idx, partition, train_test_split
from .errors import ConfigError
from .models import ModelSpec, param_count
from .privacy import PrivacyConfig

DATA_SOURCES = ("synthetic-regression", "synthetic-blobs", "csv", "idx")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic-blobs"
    n: int = 400
    input_dim: int = 2
    classes: int = 2
    noise: float = 0.5
    seed: int | None = None  # falls back to the run seed
    partition: str = "equal"
    shards_per_client: int = 2
    test_fraction: float = 0.2
    path: str | None = None
    label_column: int = -1
    has_header: bool = False
    images_path: str | None = None
    labels_path: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    algo: AlgoConfig
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    clients: int = 4
    seed: int = 0
    eval_every: int = 1
    timeout_s: float = 60.0
    out: str | None = None

    def validate(self) -> None:
        self.model.validate()
        self.algo.validate()
        self.privacy.validate()
        if self.clients < 1:
            raise ConfigError(f"clients must be positive, got {self.clients}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")
        if self.timeout_s <= 0:
            raise ConfigError(f"timeout_s must be positive, got {self.timeout_s}")
        if self.data.source not in DATA_SOURCES:
            raise ConfigError(f"unknown data source {self.data.source!r}; expected one of {DATA_SOURCES}")

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed


def _take(section: dict, name: str, allowed: dict) -> dict:
    """Pull known keys from a config section, rejecting typos."""
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out = dict(allowed)
    out.update(section)
    return out


def _parse_epsilon(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"epsilon_bar must be a number or 'inf', got {value!r}")
    eps = float(value)
    if not eps > 0:
        raise ConfigError(f"epsilon_bar must be positive, got {eps}")
    return eps


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - {"model", "algo", "privacy", "data", "run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    m = _take(obj.get("model", {}), "model", {"kind": "softmax", "input_dim": 2, "output_dim": 2, "hidden_dim": 0})
    model = ModelSpec(m["kind"], int(m["input_dim"]), int(m["output_dim"]), int(m["hidden_dim"]))

    a = _take(
        obj.get("algo", {}),
        "algo",
        {
            "kind": "fedavg",
            "rho": 1.0,
            "zeta": 0.0,
            "eta": 0.1,
            "beta": 0.0,
            "local_steps": 1,
            "batch_size": 64,
            "rounds": 1,
            "rho_gamma": 1.0,
            "rho_max": math.inf,
        },
    )
    algo = AlgoConfig(
        kind=a["kind"],
        rho=float(a["rho"]),
        zeta=float(a["zeta"]),
        eta=float(a["eta"]),
        beta=float(a["beta"]),
        local_steps=int(a["local_steps"]),
        batch_size=int(a["batch_size"]),
        rounds=int(a["rounds"]),
        rho_gamma=float(a["rho_gamma"]),
        rho_max=float(a["rho_max"]),
    )

    p = _take(obj.get("privacy", {}), "privacy", {"enabled": False, "epsilon_bar": "inf", "clip": 1.0})
    privacy = PrivacyConfig(enabled=bool(p["enabled"]), epsilon_bar=_parse_epsilon(p["epsilon_bar"]), clip_c=float(p["clip"]))

    d = _take(
        obj.get("data", {}),
        "data",
        {
            "source": "synthetic-blobs",
            "n": 400,
            "input_dim": 2,
            "classes": 2,
            "noise": 0.5,
            "seed": None,
            "partition": "equal",
            "shards_per_client": 2,
            "test_fraction": 0.2,
            "path": None,
            "label_column": -1,
            "has_header": False,
            "images_path": None,
            "labels_path": None,
        },
    )
    data = DataConfig(
        source=d["source"],
        n=int(d["n"]),
        input_dim=int(d["input_dim"]),
        classes=int(d["classes"]),
        noise=float(d["noise"]),
        seed=None if d["seed"] is None else int(d["seed"]),
        partition=d["partition"],
        shards_per_client=int(d["shards_per_client"]),
        test_fraction=float(d["test_fraction"]),
        path=d["path"],
        label_column=int(d["label_column"]),
        has_header=bool(d["has_header"]),
        images_path=d["images_path"],
        labels_path=d["labels_path"],
    )

    r = _take(
        obj.get("run", {}),
        "run",
        {"clients": 4, "seed": 0, "eval_every": 1, "timeout_s": 60.0, "out": None},
    )
    cfg = RunConfig(
        model=model,
        algo=algo,
        privacy=privacy,
        data=data,
        clients=int(r["clients"]),
        seed=int(r["seed"]),
        eval_every=int(r["eval_every"]),
        timeout_s=float(r["timeout_s"]),
        out=r["out"],
    )
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj)


def config_to_dict(cfg: RunConfig) -> dict:
    """The effective config, echoable before a run for reproducibility."""
    eps = cfg.privacy.epsilon_bar
    return {
        "model": {
            "kind": cfg.model.kind,
            "input_dim": cfg.model.input_dim,
            "output_dim": cfg.model.output_dim,
            "hidden_dim": cfg.model.hidden_dim,
        },
        "algo": {
            "kind": cfg.algo.kind,
            "rho": cfg.algo.rho,
            "zeta": cfg.algo.zeta,
            "eta": cfg.algo.eta,
            "beta": cfg.algo.beta,
            "local_steps": cfg.algo.local_steps,
            "batch_size": cfg.algo.batch_size,
            "rounds": cfg.algo.rounds,
            "rho_gamma": cfg.algo.rho_gamma,
            "rho_max": "inf" if math.isinf(cfg.algo.rho_max) else cfg.algo.rho_max,
        },
        "privacy": {
            "enabled": cfg.privacy.enabled,
            "epsilon_bar": "inf" if math.isinf(eps) else eps,
            "clip": cfg.privacy.clip_c,
        },
        "data": {
            "source": cfg.data.source,
            "n": cfg.data.n,
            "input_dim": cfg.data.input_dim,
            "classes": cfg.data.classes,
            "noise": cfg.data.noise,
            "seed": cfg.data.seed,
            "partition": cfg.data.partition,
            "shards_per_client": cfg.data.shards_per_client,
            "test_fraction": cfg.data.test_fraction,
            "path": cfg.data.path,
            "label_column": cfg.data.label_column,
            "has_header": cfg.data.has_header,
            "images_path": cfg.data.images_path,
            "labels_path": cfg.data.labels_path,
        },
        "run": {
            "clients": cfg.clients,
            "seed": cfg.seed,
            "eval_every": cfg.eval_every,
            "timeout_s": cfg.timeout_s,
            "out": cfg.out,
        },
    }


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset, Partition]:
    """Materialize (train, test, partition) for a config.

    Pure function of the config, so server and remote clients independently
    agree on every sample assignment.
    """
    d = cfg.data
    seed = cfg.data_seed
    if d.source == "synthetic-regression":
        full = generate_synthetic("regression", d.n, d.input_dim, 1, d.noise, seed)
    elif d.source == "synthetic-blobs":
        full = generate_synthetic("blobs", d.n, d.input_dim, d.classes, d.noise, seed)
    elif d.source == "csv":
        if not d.path:
            raise ConfigError("csv source needs data.path")
        full = load_csv(d.path, d.label_column, d.has_header)
    else:
        if not d.images_path or not d.labels_path:
            raise ConfigError("idx source needs data.images_path and data.labels_path")
        full = load_idx(d.images_path, d.labels_path)

    if full.input_dim != cfg.model.input_dim:
        raise ConfigError(
            f"model expects input_dim={cfg.model.input_dim} but data has {full.input_dim}"
        )
    if cfg.model.is_classifier:
        top = int(full.labels.max()) if full.size else 0
        if top >= cfg.model.output_dim:
            raise ConfigError(f"labels reach {top} but model has output_dim={cfg.model.output_dim}")

    train, test = train_test_split(full, d.test_fraction, seed)
    part = partition(train, cfg.clients, d.partition, seed, d.shards_per_client)
    return train, test, part


def model_dim(cfg: RunConfig) -> int:
    return param_count(cfg.model)
