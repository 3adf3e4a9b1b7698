# scripts/train.py
"""
客户端本地训练：采样一批轨迹 -> loss/梯度 -> AdamW，周期性地算一次 L1。
train_clients 用 joblib 把多个客户端并行跑起来，彼此之间没有任何通信。
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from env import DEFAULT_GUARD
from errors import ConfigError, GFNError, GuardExceeded, NumericError
from evaluate import ProductRewardEnv, exact_pT, l1, reward_table, sampled_pT
from losses import PAIR_LOSSES, LossSpec, Objective
from nn import adamw_step, make_adamw
from policy import MLP, ForwardPolicy, PolicySnapshot, TrajectoryBatch, sample_trajectories

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "loss", "l1", "wall_ms"]


@dataclass
class TrainConfig:
    env: object
    loss: LossSpec = field(default_factory=LossSpec)
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = None
    eval_every: int = 100
    metrics_path: str = None
    backend: str = MLP
    hidden: tuple = (64, 64)
    weight_decay: float = 1e-4
    clip: float = None
    eval_samples: int = 100_000
    guard: int = DEFAULT_GUARD
    progress: bool = True
    name: str = "client"

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed", "a seed is required")
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        if self.batch_size < 1 or (self.loss.kind in PAIR_LOSSES + ("VL",) and self.batch_size < 2):
            raise ConfigError("train.batch_size", f"{self.loss.kind} needs a batch of at least 2")
        if self.lr <= 0:
            raise ConfigError("train.lr", "must be > 0")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every", "must be >= 1")

    @property
    def epsilon(self) -> float:
        return self.loss.epsilon


class L1Monitor:
    """训练过程中的 L1：能枚举就精确算，否则采样；目标分布算不出来就记 nan"""

    def __init__(self, target, samples: int, rng: np.random.Generator, guard: int = DEFAULT_GUARD):
        self.target = target
        self.samples = samples
        self.rng = rng
        self.guard = guard
        self.exact = True

    @classmethod
    def for_envs(cls, envs, weights, samples, rng, guard: int = DEFAULT_GUARD):
        try:
            target = reward_table(envs, weights, guard)
        except GuardExceeded:
            logger.info("terminal set is not enumerable, L1 tracking disabled")
            target = None
        return cls(target, samples, rng, guard)

    def __call__(self, policy) -> float:
        if self.target is None:
            return float("nan")
        if self.exact:
            try:
                return l1(exact_pT(policy, guard=self.guard), self.target)
            except GuardExceeded:
                logger.info("state space is not enumerable, switching to sampled L1 (%d samples)", self.samples)
                self.exact = False
        return l1(sampled_pT(policy, self.samples, self.rng), self.target)


def run_loop(objective: Objective, optimizer, epochs, batch_size, epsilon, rng, monitor, eval_every, progress=True, desc="train"):
    """
    共用的训练循环（本地训练和服务器端 AB 聚合都走这里）。
    返回 metrics DataFrame。
    """
    policy = objective.policy
    rows = []
    t0 = time.perf_counter()
    params = objective.get_params()

    bar = tqdm(range(1, epochs + 1), desc=desc, disable=not progress, leave=False)
    for epoch in bar:
        trajs = sample_trajectories(policy, batch_size, epsilon, rng, with_reward=objective.needs_reward)
        loss, grad = objective(TrajectoryBatch.from_trajectories(trajs))
        if not np.isfinite(loss):
            raise NumericError(
                f"[{desc}] non-finite loss at epoch {epoch}: loss={loss}, |params|={np.linalg.norm(params):.3g}"
            )
        params = adamw_step(optimizer, params, grad)
        objective.set_params(params)

        l1_val = monitor(policy) if (epoch % eval_every == 0 or epoch == epochs) else float("nan")
        rows.append((epoch, float(loss), l1_val, (time.perf_counter() - t0) * 1000.0))
        if epoch % eval_every == 0:
            bar.set_postfix(loss=f"{loss:.4f}", l1=f"{l1_val:.4f}")

    if epochs == 0:
        rows.append((0, float("nan"), monitor(policy), 0.0))
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def train_local(config: TrainConfig):
    """返回 (PolicySnapshot, metrics DataFrame)"""
    rng = np.random.default_rng(config.seed)
    env = config.env
    policy = ForwardPolicy.create(env, config.backend, config.hidden, rng)
    objective = Objective(config.loss, policy, rng=rng)
    optimizer = make_adamw(objective.param_groups(), config.lr, config.weight_decay, max_grad_norm=config.clip)
    monitor = L1Monitor.for_envs([env], None, config.eval_samples, rng, config.guard)

    logger.info(
        "[%s] %s/%s on %s: %d epochs x %d trajectories",
        config.name, config.loss.kind, config.backend, env.kind, config.epochs, config.batch_size,
    )
    metrics = run_loop(
        objective, optimizer, config.epochs, config.batch_size, config.epsilon, rng, monitor,
        config.eval_every, config.progress, config.name,
    )
    if config.metrics_path:
        metrics.to_csv(config.metrics_path, index=False)

    meta = {"name": config.name, "loss": config.loss.kind, "epochs": config.epochs, "seed": config.seed}
    if config.loss.kind == "TB":
        meta["log_z"] = float(objective.log_z[0])
    final = metrics["l1"].dropna()
    if len(final):
        logger.info("[%s] final L1 = %.4f", config.name, final.iloc[-1])
    return PolicySnapshot.from_policy(policy, meta), metrics


@dataclass
class ClientResult:
    index: int
    snapshot: PolicySnapshot = None
    metrics: pd.DataFrame = None
    error: str = None

    @property
    def ok(self) -> bool:
        return self.error is None


def derive_seeds(master_seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(n)]


def _run_client(index: int, config: TrainConfig) -> ClientResult:
    try:
        snap, metrics = train_local(config)
        return ClientResult(index, snap, metrics)
    except GFNError as e:
        logger.error("[%s] failed: %s", config.name, e)
        return ClientResult(index, error=f"{type(e).__name__}: {e}")


def train_clients(configs, parallelism: int = 1, master_seed: int = None) -> list:
    """
    每个客户端独立训练。给了 master_seed 就用 SeedSequence 派生各客户端的种子
    （覆盖 config 里的 seed）；结果顺序和输入一致，单个客户端失败不影响其它。
    """
    configs = list(configs)
    if master_seed is not None:
        seeds = derive_seeds(master_seed, len(configs))
        configs = [replace(c, seed=s) for c, s in zip(configs, seeds)]
    if parallelism <= 1 or len(configs) <= 1:
        results = [_run_client(k, c) for k, c in enumerate(configs)]
    else:
        configs = [replace(c, progress=False) for c in configs]
        results = Parallel(n_jobs=parallelism)(delayed(_run_client)(k, c) for k, c in enumerate(configs))
    failed = [r.index for r in results if not r.ok]
    if failed:
        logger.warning("%d of %d clients failed: %s", len(failed), len(results), failed)
    return results


def centralized_config(config: TrainConfig, envs, weights=None, name: str = "centralized") -> TrainConfig:
    """集中式基线：一个 GFlowNet 直接在乘积奖励上训练"""
    return replace(config, env=ProductRewardEnv(envs, weights), name=name)
