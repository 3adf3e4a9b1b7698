# scripts/aggregate.py
"""
服务器端：只拿到各客户端的 snapshot，用 AB loss 训练全局模型（不看任何奖励），
另外是几个对照：PCVI、单轮 FedAvg、逐状态策略乘积。
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import gammaln, log_softmax

from env import DEFAULT_GUARD, enumerate_terminals
from errors import ConfigError, SnapshotError, UnsupportedError
from evaluate import DistributionTable, sample_terminals
from losses import LossSpec, Objective
from nn import make_adamw
from policy import MLP, ForwardPolicy, PolicySnapshot
from train import L1Monitor, run_loop

logger = logging.getLogger(__name__)


# ------------------- AB 聚合 -------------------


@dataclass
class AggregationJob:
    snapshots: list
    env: object  # 只用它的状态空间结构
    weights: tuple = None
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 3e-3
    epsilon: float = 0.5
    seed: int = 0
    backend: str = None  # None: 跟客户端一样
    hidden: tuple = None
    weight_decay: float = 1e-4
    clip: float = None
    eval_every: int = 100
    eval_samples: int = 100_000
    guard: int = DEFAULT_GUARD
    metrics_path: str = None
    progress: bool = True

    def __post_init__(self):
        if not self.snapshots:
            raise ConfigError("aggregate.snapshots", "need at least one client snapshot")
        fps = {s.env_fingerprint for s in self.snapshots}
        if len(fps) != 1:
            raise SnapshotError(f"client snapshots disagree on the env fingerprint: {sorted(fps)}")
        if self.weights is not None:
            self.weights = tuple(float(w) for w in self.weights)
            if len(self.weights) != len(self.snapshots):
                raise ConfigError("aggregate.weights", f"need {len(self.snapshots)} weights, got {len(self.weights)}")
            if any(w <= 0 for w in self.weights):
                raise ConfigError("aggregate.weights", "all weights must be > 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("aggregate.epsilon", "must be in [0, 1]")
        if self.batch_size < 2:
            raise ConfigError("aggregate.batch_size", "AB needs a batch of at least 2")


def _global_policy(job: AggregationJob, rng) -> ForwardPolicy:
    ref = job.snapshots[0]
    backend = job.backend or ref.backend
    hidden = job.hidden
    if hidden is None:
        hidden = tuple(ref.arch["widths"][1:-1]) if ref.backend == MLP else (64, 64)
    return ForwardPolicy.create(job.env, backend, hidden, rng)


def aggregate_ab(job: AggregationJob, target: DistributionTable = None):
    """
    全局策略最小化 AB loss，轨迹从 (1-eps) p_F + eps * uniform 里采。
    target 给了就顺便记 L1（通常是乘积奖励的 reward_table）。
    返回 (PolicySnapshot, metrics DataFrame)。
    """
    rng = np.random.default_rng(job.seed)
    pairs = [s.to_policy(job.env) for s in job.snapshots]
    local_policies = [p for p, _ in pairs]
    local_backwards = [b for _, b in pairs]

    policy = _global_policy(job, rng)
    spec = LossSpec("AB", weights=job.weights, epsilon=job.epsilon)
    objective = Objective(spec, policy, local_policies, local_backwards, rng=rng)
    optimizer = make_adamw(objective.param_groups(), job.lr, job.weight_decay, max_grad_norm=job.clip)
    monitor = L1Monitor(target, job.eval_samples, rng, job.guard)

    logger.info("[global] AB over %d snapshots: %d epochs x %d trajectories", len(local_policies), job.epochs, job.batch_size)
    metrics = run_loop(
        objective, optimizer, job.epochs, job.batch_size, job.epsilon, rng, monitor,
        job.eval_every, job.progress, "global",
    )
    if job.metrics_path:
        metrics.to_csv(job.metrics_path, index=False)
    meta = {"name": "global", "provenance": "ab", "clients": len(local_policies), "seed": job.seed}
    if job.weights is not None:
        meta["weights"] = list(job.weights)
    return PolicySnapshot.from_policy(policy, meta), metrics


# ------------------- FedAvg -------------------


def fedavg_average(snapshots) -> PolicySnapshot:
    """参数逐元素取平均（单轮 FedAvg）"""
    snapshots = list(snapshots)
    if not snapshots:
        raise ConfigError("aggregate.snapshots", "need at least one client snapshot")
    ref = snapshots[0]
    for s in snapshots[1:]:
        if s.backend != ref.backend or s.arch != ref.arch or s.env_fingerprint != ref.env_fingerprint:
            raise SnapshotError("fedavg needs snapshots with identical backend, architecture and env")
    params = np.mean(np.stack([s.params for s in snapshots]), axis=0)
    return PolicySnapshot(
        env_fingerprint=ref.env_fingerprint,
        backend=ref.backend,
        arch=dict(ref.arch),
        params=params,
        backward=ref.backward,
        meta={"name": "fedavg", "provenance": "fedavg", "clients": len(snapshots)},
    )


# ------------------- 逐状态策略乘积 -------------------


class ProductPolicy:
    """
    p(a|s) ∝ prod_n p_F^n(a|s)^{w_n}。
    只是个对照：一般来说它的终止分布并不是奖励乘积。
    """

    backend = "product"

    def __init__(self, policies, weights=None):
        self.policies = list(policies)
        if not self.policies:
            raise ConfigError("aggregate.snapshots", "need at least one policy")
        self.env = self.policies[0].env
        self.weights = np.ones(len(self.policies)) if weights is None else np.asarray(weights, dtype=float)

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    def log_probs(self, states):
        masks = None
        total = 0.0
        for w, p in zip(self.weights, self.policies):
            logp, _, masks, _ = p.log_probs(states)
            total = total + w * np.where(masks, logp, 0.0)
        logp = log_softmax(np.where(masks, total, -np.inf), axis=1)
        probs = np.where(masks, np.exp(logp), 0.0)
        return logp, probs, masks, None

    def action_distribution(self, s) -> np.ndarray:
        return self.log_probs([s])[1][0]


# ------------------- PCVI -------------------

PCVI_KINDS = ("grid", "multiset", "sequence")


@dataclass
class PcviParams:
    """
    分块的类别分布参数，每块是 (行数, 类别数)，每行在单纯形上。
        grid     : x (1, W), y (1, H)
        multiset : items (1, U)
        sequence : length (1, S+1), tokens{L} (L, U)  L = 1..S
    """

    kind: str
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, b in self.blocks.items():
            if np.any(b < 0) or not np.allclose(b.sum(axis=1), 1.0):
                raise ValueError(f"block {name} is not a (row-wise) probability vector")


def _normalize(counts: np.ndarray) -> np.ndarray:
    return counts / counts.sum(axis=1, keepdims=True)


def pcvi_fit_samples(samples, env, alpha: float = 1.0) -> PcviParams:
    """类别因子的最大似然 = 经验频率，加 alpha 平滑"""
    kind = env.kind
    if kind == "grid":
        xy = np.array(samples, dtype=np.int64).reshape(-1, 2)
        x = np.bincount(xy[:, 0], minlength=env.size) + alpha
        y = np.bincount(xy[:, 1], minlength=env.size) + alpha
        return PcviParams(kind, {"x": _normalize(x[None, :]), "y": _normalize(y[None, :])})
    if kind == "multiset":
        counts = np.array(samples, dtype=float).reshape(-1, env.dict_size).sum(axis=0) + alpha
        return PcviParams(kind, {"items": _normalize(counts[None, :])})
    if kind == "sequence":
        S, U = env.max_len, env.num_tokens
        lengths = np.bincount([len(x) for x in samples], minlength=S + 1).astype(float) + alpha
        blocks = {"length": _normalize(lengths[None, :])}
        for L in range(1, S + 1):
            c = np.full((L, U), alpha, dtype=float)
            for x in samples:
                if len(x) == L:
                    c[np.arange(L), list(x)] += 1.0
            blocks[f"tokens{L}"] = _normalize(c)
        return PcviParams(kind, blocks)
    raise UnsupportedError(f"PCVI has no factorized family for {kind} (factorized samples would be invalid trees)")


def pcvi_fit(snapshot, env, n_samples: int, rng: np.random.Generator, alpha: float = 1.0) -> PcviParams:
    """从一个客户端 snapshot 采样，然后拟合"""
    if env.kind not in PCVI_KINDS:
        raise UnsupportedError(f"PCVI has no factorized family for {env.kind}")
    policy = snapshot if isinstance(snapshot, ForwardPolicy) else snapshot.to_policy(env)[0]
    return pcvi_fit_samples(sample_terminals(policy, n_samples, rng), env, alpha)


def pcvi_pool(params_list, weights=None) -> PcviParams:
    """每块逐元素相乘（带权重就先各自 w_n 次方）再按行归一化"""
    params_list = list(params_list)
    if not params_list:
        raise ValueError("nothing to pool")
    ref = params_list[0]
    w = np.ones(len(params_list)) if weights is None else np.asarray(weights, dtype=float)
    for p in params_list[1:]:
        if p.kind != ref.kind or p.blocks.keys() != ref.blocks.keys():
            raise ValueError("PCVI parameters come from different env families")
        for name, b in p.blocks.items():
            if b.shape != ref.blocks[name].shape:
                raise ValueError(f"block {name}: shape {b.shape} vs {ref.blocks[name].shape}")
    blocks = {}
    for name in ref.blocks:
        log_b = sum(wn * np.log(p.blocks[name]) for wn, p in zip(w, params_list))
        blocks[name] = np.exp(log_softmax(log_b, axis=1))
    return PcviParams(ref.kind, blocks)


def pcvi_log_prob(params: PcviParams, x) -> float:
    b = params.blocks
    if params.kind == "grid":
        return float(np.log(b["x"][0, x[0]]) + np.log(b["y"][0, x[1]]))
    if params.kind == "multiset":
        c = np.asarray(x, dtype=float)
        log_coef = gammaln(c.sum() + 1) - gammaln(c + 1).sum()
        return float(log_coef + (c * np.log(b["items"][0])).sum())
    L = len(x)
    out = np.log(b["length"][0, L])
    if L:
        out += np.log(b[f"tokens{L}"][np.arange(L), list(x)]).sum()
    return float(out)


def pcvi_distribution(params: PcviParams, env, guard: int = DEFAULT_GUARD) -> DistributionTable:
    """把因子分布落到环境的终止态上；grid / sequence 本来就归一，multiset 是多项分布"""
    terms = enumerate_terminals(env, guard)
    return DistributionTable.from_log_weights(terms, [pcvi_log_prob(params, x) for x in terms], "pcvi")


def pcvi_to_frame(params: PcviParams) -> pd.DataFrame:
    rows = []
    for name, b in params.blocks.items():
        for r in range(b.shape[0]):
            for c in range(b.shape[1]):
                rows.append((name, r, c, float(b[r, c])))
    return pd.DataFrame(rows, columns=["block", "row", "col", "prob"])


def pcvi_from_frame(df: pd.DataFrame) -> PcviParams:
    blocks = {}
    for name, g in df.groupby("block", sort=False):
        b = np.zeros((g["row"].max() + 1, g["col"].max() + 1))
        b[g["row"].to_numpy(), g["col"].to_numpy()] = g["prob"].to_numpy()
        blocks[name] = b
    if {"x", "y"} <= blocks.keys():
        kind = "grid"
    elif "items" in blocks:
        kind = "multiset"
    else:
        kind = "sequence"
    return PcviParams(kind, blocks)
