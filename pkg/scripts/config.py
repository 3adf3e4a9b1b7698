# scripts/config.py
"""
YAML 实验配置：读文件、--set 覆盖、补默认值、逐项校验，最后构造各客户端的环境。
所有校验都在开始干活之前做完，出错时 ConfigError 带上点分路径（如 loss.kind）。
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from _paths import CONFIG_DIR, run_dir
from env import GridEnv, MultisetEnv, PhyloParams, SequenceEnv, load_sites, random_topology, simulate_sites, split_sites
from errors import ConfigError
from losses import LOSS_KINDS, LossSpec
from policy import MLP, TABULAR

logger = logging.getLogger(__name__)

ENV_KINDS = ("grid", "multiset", "sequence", "phylo")
SWEEP_AXES = ("clients", "logz_lr", "noise", "loss")
BASELINES = ("pcvi", "fedavg", "product", "centralized")

REQUIRED = object()

DEFAULTS = {
    "experiment": REQUIRED,
    "seed": 0,
    "output_dir": None,
    "env": {
        "kind": REQUIRED,
        "grid": {"size": 9, "beacons": None, "kappa": 1.0, "delta": 2.0},
        "multiset": {"dict_size": 10, "target_size": 8, "values_seed": 0},
        "sequence": {"max_len": 6, "num_tokens": 6, "scores_seed": 0},
        "phylo": {
            "leaves": 5,
            "sites": 500,
            "branch_length": 0.1,
            "mu": 1.0,
            "gamma": 2.0,
            "clients": None,
            "truth_seed": 0,
            "random_split": False,
            "sites_file": None,
        },
    },
    "clients": {"n": 1, "parallelism": 1},
    "loss": {"kind": "CB", "logz_lr": 0.1, "weights": None, "epsilon": 0.1},
    "train": {
        "epochs": 1000,
        "batch_size": 64,
        "lr": 3e-3,
        "backend": MLP,
        "hidden": [64, 64],
        "weight_decay": 1e-4,
        "clip": None,
        "eval_every": 100,
        "progress": True,
    },
    "aggregate": {
        "epochs": 1000,
        "batch_size": 64,
        "lr": 3e-3,
        "epsilon": 0.5,
        "weights": None,
        "backend": None,
        "hidden": None,
        "baselines": ["pcvi", "fedavg", "product"],
        "pcvi_samples": 100_000,
        "pcvi_alpha": 1.0,
    },
    "eval": {"top_k": 800, "samples": 100_000, "guard": 5_000_000, "trajectory_guard": 1_000_000},
    "sweep": {"clients": None, "logz_lr": None, "noise": None, "loss": None, "seeds": [0]},
}


# ------------------- 读取 / 覆盖 -------------------


def parse_override(item: str):
    """'a.b.c=value' -> (['a','b','c'], value)，value 按 YAML 标量 / 列表解析"""
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    key, value = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(value)


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or []:
        path, value = parse_override(item)
        node = raw
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(path), f"{k} is not a section")
        node[path[-1]] = value
    return raw


def resolve_config_path(path) -> Path:
    """允许只写名字：grid -> config/grid.yaml"""
    p = Path(path)
    if p.exists():
        return p
    for cand in (CONFIG_DIR / p, CONFIG_DIR / f"{p}.yaml"):
        if cand.exists():
            return cand
    raise ConfigError("config", f"config file not found: {path}")


def load_run_config(path, overrides=None) -> "RunConfig":
    p = resolve_config_path(path)
    with open(p, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError("config", f"cannot parse {p}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{p} must hold a mapping")
    cfg = validate(apply_overrides(raw, overrides))
    cfg.source = str(p)
    return cfg


# ------------------- 校验 -------------------


def _merge(defaults: dict, raw: dict, prefix: str) -> dict:
    out = {}
    for k, v in raw.items():
        if k not in defaults:
            raise ConfigError(f"{prefix}{k}", "unknown key")
    for k, d in defaults.items():
        key = f"{prefix}{k}"
        if isinstance(d, dict):
            sub = raw.get(k) or {}
            if not isinstance(sub, dict):
                raise ConfigError(key, "must be a section")
            out[k] = _merge(d, sub, key + ".")
        elif k in raw:
            out[k] = raw[k]
        elif d is REQUIRED:
            raise ConfigError(key, "is required")
        else:
            out[k] = copy.deepcopy(d)
    return out


def _int(cfg, key, lo=None):
    v = cfg.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ConfigError(key, f"must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(key, f"must be >= {lo}, got {v}")
    return int(v)


def _float(cfg, key, lo=None, positive=False):
    v = cfg.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"must be a number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(key, f"must be > 0, got {v}")
    if lo is not None and v < lo:
        raise ConfigError(key, f"must be >= {lo}, got {v}")
    return float(v)


def _weights(cfg, key, n):
    w = cfg.get(key)
    if w is None:
        return
    if not isinstance(w, (list, tuple)) or len(w) != n:
        raise ConfigError(key, f"need a list of {n} weights")
    if any(isinstance(x, bool) or not isinstance(x, (int, float)) or x <= 0 for x in w):
        raise ConfigError(key, "all weights must be positive numbers")


def _list_of(cfg, key, check):
    v = cfg.get(key)
    if v is None:
        return
    if not isinstance(v, list) or not v:
        raise ConfigError(key, "must be a non-empty list")
    for x in v:
        check(x)


@dataclass
class RunConfig:
    data: dict
    source: str = None

    def get(self, key: str):
        node = self.data
        for k in key.split("."):
            node = node[k]
        return node

    @property
    def name(self) -> str:
        return self.data["experiment"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def n_clients(self) -> int:
        return self.data["clients"]["n"]

    @property
    def env_kind(self) -> str:
        return self.data["env"]["kind"]

    def out_dir(self) -> Path:
        return run_dir(self.name, self.data["output_dir"])

    def with_overrides(self, overrides) -> "RunConfig":
        cfg = validate(apply_overrides(self.data, overrides))
        cfg.source = self.source
        return cfg


def validate(raw: dict) -> RunConfig:
    data = _merge(DEFAULTS, raw, "")
    cfg = RunConfig(data)

    if not isinstance(data["experiment"], str) or not data["experiment"]:
        raise ConfigError("experiment", "must be a non-empty name")
    _int(cfg, "seed", 0)

    kind = data["env"]["kind"]
    if kind not in ENV_KINDS:
        raise ConfigError("env.kind", f"must be one of {ENV_KINDS}, got {kind!r}")

    phylo = data["env"]["phylo"]
    if kind == "phylo" and phylo["clients"] is not None:
        alias = _int(cfg, "env.phylo.clients", 1)
        if "n" in (raw.get("clients") or {}) and raw["clients"]["n"] != alias:
            raise ConfigError("env.phylo.clients", f"disagrees with clients.n = {raw['clients']['n']}")
        data["clients"]["n"] = alias
    n = _int(cfg, "clients.n", 1)
    _int(cfg, "clients.parallelism", 1)

    if kind == "grid":
        _int(cfg, "env.grid.size", 2)
        _float(cfg, "env.grid.kappa", positive=True)
        _float(cfg, "env.grid.delta")
        beacons = data["env"]["grid"]["beacons"]
        if not isinstance(beacons, list) or len(beacons) != n:
            raise ConfigError("env.grid.beacons", f"need one beacon list per client ({n})")
        for k, b in enumerate(beacons):
            arr = np.asarray(b, dtype=float) if isinstance(b, list) and b else None
            if arr is None or arr.ndim != 2 or arr.shape[1] != 2:
                raise ConfigError(f"env.grid.beacons.{k}", "must be a non-empty list of [x, y] pairs")
    elif kind == "multiset":
        _int(cfg, "env.multiset.dict_size", 1)
        _int(cfg, "env.multiset.target_size", 1)
        _int(cfg, "env.multiset.values_seed", 0)
    elif kind == "sequence":
        _int(cfg, "env.sequence.max_len", 1)
        _int(cfg, "env.sequence.num_tokens", 1)
        _int(cfg, "env.sequence.scores_seed", 0)
    else:
        _int(cfg, "env.phylo.leaves", 3)
        _int(cfg, "env.phylo.sites", 1)
        _float(cfg, "env.phylo.branch_length", positive=True)
        _float(cfg, "env.phylo.mu", positive=True)
        _float(cfg, "env.phylo.gamma", positive=True)
        _int(cfg, "env.phylo.truth_seed", 0)
        if phylo["sites_file"] is not None and not Path(phylo["sites_file"]).exists():
            raise ConfigError("env.phylo.sites_file", f"file not found: {phylo['sites_file']}")
        if phylo["sites_file"] is None and phylo["sites"] < n:
            raise ConfigError("env.phylo.sites", f"cannot split {phylo['sites']} sites across {n} clients")

    loss = data["loss"]
    if loss["kind"] not in LOSS_KINDS or loss["kind"] == "AB":
        raise ConfigError("loss.kind", f"local training loss must be one of {LOSS_KINDS[:-1]}, got {loss['kind']!r}")
    _float(cfg, "loss.logz_lr", positive=True)
    eps = _float(cfg, "loss.epsilon", 0.0)
    if eps > 1:
        raise ConfigError("loss.epsilon", "must be in [0, 1]")
    _weights(cfg, "loss.weights", n)

    tr = data["train"]
    _int(cfg, "train.epochs", 0)
    _int(cfg, "train.batch_size", 2)
    _float(cfg, "train.lr", positive=True)
    _float(cfg, "train.weight_decay", 0.0)
    _int(cfg, "train.eval_every", 1)
    if tr["clip"] is not None:
        _float(cfg, "train.clip", positive=True)
    if tr["backend"] not in (MLP, TABULAR):
        raise ConfigError("train.backend", f"must be {MLP} or {TABULAR}, got {tr['backend']!r}")
    _hidden(cfg, "train.hidden")

    ag = data["aggregate"]
    _int(cfg, "aggregate.epochs", 0)
    _int(cfg, "aggregate.batch_size", 2)
    _float(cfg, "aggregate.lr", positive=True)
    if not 0 <= _float(cfg, "aggregate.epsilon", 0.0) <= 1:
        raise ConfigError("aggregate.epsilon", "must be in [0, 1]")
    _weights(cfg, "aggregate.weights", n)
    if ag["backend"] not in (None, MLP, TABULAR):
        raise ConfigError("aggregate.backend", f"must be {MLP} or {TABULAR}, got {ag['backend']!r}")
    if ag["hidden"] is not None:
        _hidden(cfg, "aggregate.hidden")
    if not isinstance(ag["baselines"], list) or any(b not in BASELINES for b in ag["baselines"]):
        raise ConfigError("aggregate.baselines", f"must be a list drawn from {BASELINES}")
    _int(cfg, "aggregate.pcvi_samples", 1)
    _float(cfg, "aggregate.pcvi_alpha", 0.0)

    _int(cfg, "eval.top_k", 1)
    if _int(cfg, "eval.samples", 1) < data["eval"]["top_k"]:
        raise ConfigError("eval.samples", "must be >= eval.top_k")
    _int(cfg, "eval.guard", 1)
    _int(cfg, "eval.trajectory_guard", 1)

    _list_of(cfg, "sweep.clients", _entry("sweep.clients", int, lambda x: x >= 1))
    _list_of(cfg, "sweep.logz_lr", _entry("sweep.logz_lr", (int, float), lambda x: x > 0))
    _list_of(cfg, "sweep.noise", _entry("sweep.noise", (int, float), lambda x: x >= 0))
    _list_of(cfg, "sweep.loss", _entry("sweep.loss", str, lambda x: x in LOSS_KINDS[:-1]))
    _list_of(cfg, "sweep.seeds", _entry("sweep.seeds", int, lambda x: x >= 0))
    return cfg


def _entry(key, types, ok):
    def check(x):
        if isinstance(x, bool) or not isinstance(x, types) or not ok(x):
            raise ConfigError(key, f"bad entry {x!r}")

    return check


def _hidden(cfg, key):
    h = cfg.get(key)
    if not isinstance(h, list) or not h or any(isinstance(x, bool) or not isinstance(x, int) or x < 1 for x in h):
        raise ConfigError(key, "must be a non-empty list of positive layer widths")


# ------------------- 构造 -------------------


def loss_spec(cfg: RunConfig) -> LossSpec:
    lo = cfg.data["loss"]
    return LossSpec(kind=lo["kind"], logz_lr=lo["logz_lr"], weights=lo["weights"], epsilon=lo["epsilon"])


def build_client_envs(cfg: RunConfig) -> list:
    """按配置为每个客户端造一个环境；它们共享状态空间，只是奖励不同"""
    e = cfg.data["env"]
    n = cfg.n_clients
    kind = e["kind"]
    if kind == "grid":
        g = e["grid"]
        return [GridEnv(g["size"], g["beacons"][k], g["kappa"], g["delta"]) for k in range(n)]
    if kind == "multiset":
        m = e["multiset"]
        envs = []
        for k in range(n):
            rng = np.random.default_rng(m["values_seed"] + k)
            envs.append(MultisetEnv(m["dict_size"], m["target_size"], rng.uniform(0.0, 1.0, m["dict_size"])))
        return envs
    if kind == "sequence":
        s = e["sequence"]
        envs = []
        for k in range(n):
            rng = np.random.default_rng(s["scores_seed"] + k)
            p = rng.uniform(0.0, 1.0, s["max_len"])
            t = rng.uniform(-1.0, 1.0, s["num_tokens"])
            envs.append(SequenceEnv(s["max_len"], s["num_tokens"], p, t))
        return envs

    ph = e["phylo"]
    params = PhyloParams(ph["leaves"], ph["branch_length"], ph["mu"], ph["gamma"])
    if ph["sites_file"] is not None:
        data = load_sites(ph["sites_file"])
        if data.shape[0] != params.n_leaves:
            raise ConfigError("env.phylo.sites_file", f"{data.shape[0]} rows but env.phylo.leaves = {params.n_leaves}")
        if data.shape[1] < n:
            raise ConfigError("env.phylo.sites_file", f"cannot split {data.shape[1]} sites across {n} clients")
    else:
        rng = np.random.default_rng(ph["truth_seed"])
        truth = random_topology(params.n_leaves, rng)
        data = simulate_sites(params, truth, ph["sites"], rng)
        logger.info("simulated %d sites on truth topology %s", ph["sites"], truth[0])
    split_rng = np.random.default_rng(ph["truth_seed"] + 1) if ph["random_split"] else None
    return split_sites(data, n, params, split_rng)
