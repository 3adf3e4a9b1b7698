# scripts/evaluate.py
"""
精确 / 采样评估：终止分布、L1/KL/Jeffrey、Top-K 奖励、聚合模型的实际目标分布、
鲁棒性上界检查，以及 CB/KL 梯度恒等式的数值检查。
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from env import DEFAULT_GUARD, GridEnv, MultisetEnv, enumerate_states, enumerate_terminals
from errors import ConfigError, GuardExceeded, NumericError, UnsupportedError
from losses import cb_loss, tb_violation, vl_loss
from policy import TABULAR, ForwardPolicy, Trajectory, TrajectoryBatch, UNIFORM_BACKWARD, evaluate_batch, sample_trajectories

logger = logging.getLogger(__name__)

TRAJECTORY_GUARD = 1_000_000


# ------------------- 分布表 -------------------


@dataclass
class DistributionTable:
    """终止态 -> 概率；provenance 记录来源 (exact-dp / sampled(n) / reward-normalized / effective-target / ...)"""

    probs: dict
    provenance: str = ""

    def __getitem__(self, key):
        return self.probs.get(key, 0.0)

    def __len__(self):
        return len(self.probs)

    def keys(self):
        return self.probs.keys()

    def total(self) -> float:
        return float(sum(self.probs.values()))

    def argmax(self):
        return max(self.probs, key=self.probs.get)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"state": [repr(k) for k in self.probs], "prob": list(self.probs.values())})

    @classmethod
    def from_log_weights(cls, keys, log_w, provenance: str) -> "DistributionTable":
        log_w = np.asarray(log_w, dtype=float)
        if not np.any(np.isfinite(log_w)):
            raise NumericError("all-zero weights, cannot normalize")
        p = np.exp(log_w - logsumexp(log_w))
        return cls(dict(zip(keys, p.tolist())), provenance)


def l1(p: DistributionTable, q: DistributionTable) -> float:
    keys = set(p.keys()) | set(q.keys())
    return float(sum(abs(p[k] - q[k]) for k in keys))


def kl(p: DistributionTable, q: DistributionTable) -> float:
    out = 0.0
    for k, pk in p.probs.items():
        if pk <= 0:
            continue
        qk = q[k]
        if qk <= 0:
            logger.warning("KL support violation at %r, returning inf", k)
            return float("inf")
        out += pk * (np.log(pk) - np.log(qk))
    return float(out)


def jeffrey(p: DistributionTable, q: DistributionTable) -> float:
    return kl(p, q) + kl(q, p)


# ------------------- 终止分布 -------------------


def exact_pT(policy, env=None, guard: int = DEFAULT_GUARD) -> DistributionTable:
    """
    按拓扑层把 s0 的质量 1 往下推；p_T(x) = 流进 s_f 的质量。
    policy 只需要有 log_probs(states)（ForwardPolicy 或 ProductPolicy）。
    """
    env = env if env is not None else policy.env
    graph = enumerate_states(env, guard)
    _, probs, _, _ = policy.log_probs(graph.states)
    mass = np.zeros(len(graph))
    mass[0] = 1.0
    # BFS 建图时 edge_src 单调不减，所以每层的边是连续的一段
    src_layer = graph.layer[graph.edge_src]
    bounds = np.searchsorted(src_layer, np.arange(graph.layer.max() + 2))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if lo == hi:
            continue
        src = graph.edge_src[lo:hi]
        np.add.at(mass, graph.edge_dst[lo:hi], mass[src] * probs[src, graph.edge_action[lo:hi]])
    term = np.flatnonzero(graph.terminal)
    p = mass[term] * probs[term, env.stop_action]
    return DistributionTable({graph.states[i]: float(v) for i, v in zip(term, p)}, "exact-dp")


def sample_terminals(policy, n: int, rng: np.random.Generator, chunk: int = 10_000) -> list:
    out = []
    left = n
    while left > 0:
        m = min(chunk, left)
        out.extend(tau.terminal for tau in sample_trajectories(policy, m, 0.0, rng, with_reward=False))
        left -= m
    return out


def sampled_pT(policy, n: int, rng: np.random.Generator) -> DistributionTable:
    counts = Counter(sample_terminals(policy, n, rng))
    return DistributionTable({k: c / n for k, c in counts.items()}, f"sampled({n})")


def sample_table(table: DistributionTable, n: int, rng: np.random.Generator) -> list:
    """按表里的概率抽 n 个终止态（给 PCVI 和精确目标算 Top-K 用）"""
    keys = list(table.keys())
    p = np.array([table[k] for k in keys])
    draws = rng.choice(len(keys), size=n, p=p / p.sum())
    return [keys[i] for i in draws]


def product_log_reward(envs, weights=None):
    """x -> sum_n w_n log R_n(x)"""
    envs = envs if isinstance(envs, (list, tuple)) else [envs]
    w = np.ones(len(envs)) if weights is None else np.asarray(weights, dtype=float)

    def log_r(x):
        return float(sum(wn * e.log_reward(x) for wn, e in zip(w, envs)))

    return log_r


def topk_avg_log_reward(source, envs, k: int, weights=None) -> float:
    """
    source 是样本列表（按出现次数计）或 DistributionTable（按支撑集里的不同状态计）。
    """
    log_r = product_log_reward(envs, weights)
    states = list(source.keys()) if isinstance(source, DistributionTable) else list(source)
    if len(states) < k:
        raise ValueError(f"need at least {k} samples for top-{k}, got {len(states)}")
    vals = np.sort(np.array([log_r(x) for x in states]))[::-1]
    return float(vals[:k].mean())


def reward_table(envs, weights=None, guard: int = DEFAULT_GUARD) -> DistributionTable:
    """归一化的 prod_n R_n(x)^{w_n}，所有 L1 的真值"""
    envs = envs if isinstance(envs, (list, tuple)) else [envs]
    log_r = product_log_reward(envs, weights)
    terms = enumerate_terminals(envs[0], guard)
    tag = "reward-normalized" if len(envs) == 1 else f"reward-product({len(envs)})"
    return DistributionTable.from_log_weights(terms, [log_r(x) for x in terms], tag)


# ------------------- 轨迹枚举 -------------------


def count_trajectories(env) -> int:
    graph = enumerate_states(env)
    cnt = np.zeros(len(graph), dtype=object)
    cnt[0] = 1
    for s, d in zip(graph.edge_src, graph.edge_dst):
        cnt[d] += cnt[s]
    return int(sum(cnt[graph.terminal]))


def enumerate_trajectories(env, guard: int = TRAJECTORY_GUARD) -> list:
    """所有完整轨迹 s0 -> ... -> x -> s_f（log_pf 为空，log_pb 按均匀后向策略算好）"""
    total = count_trajectories(env)
    if total > guard:
        raise GuardExceeded(f"{total} trajectories exceeds trajectory guard {guard}")
    out = []
    stop = env.stop_action

    def walk(states, actions):
        s = states[-1]
        for a in env.legal_actions(s):
            if a == stop:
                log_pb = [0.0] + [UNIFORM_BACKWARD.log_prob(env, t) for t in states[1:]]
                out.append(Trajectory(list(states), actions + [a], np.zeros(0), np.array(log_pb)))
            else:
                walk(states + [env.step(s, a)], actions + [a])

    walk([env.initial_state], [])
    return out


def _local_log_ratios(policies, batch: TrajectoryBatch) -> np.ndarray:
    """(N, T)：log p_F^n(tau) - log p_B^n(tau|x)"""
    return np.stack([evaluate_batch(p, batch).log_pf - batch.log_pb for p in policies])


def _group_logsumexp(keys, vals):
    groups = {}
    for k, v in zip(keys, vals):
        groups.setdefault(k, []).append(v)
    return list(groups), [logsumexp(v) for v in groups.values()]


def effective_target(local_policies, env=None, guard: int = TRAJECTORY_GUARD, weights=None) -> DistributionTable:
    """pi_hat(x) ∝ E_{tau ~ p_B(.|x)}[prod_n (p_F^n(tau) / p_B^n(tau|x))^{w_n}]"""
    env = env if env is not None else local_policies[0].env
    batch = TrajectoryBatch.from_trajectories(enumerate_trajectories(env, guard))
    w = np.ones(len(local_policies)) if weights is None else np.asarray(weights, dtype=float)
    ratios = w @ _local_log_ratios(local_policies, batch)
    keys, log_w = _group_logsumexp([tau.terminal for tau in batch.trajectories], batch.log_pb + ratios)
    return DistributionTable.from_log_weights(keys, log_w, "effective-target")


@dataclass
class BoundReport:
    alpha: list
    beta: list
    jeffrey: float
    bound: float
    holds: bool
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "beta": [float(b) for b in self.beta],
            "jeffrey": float(self.jeffrey),
            "bound": float(self.bound),
            "holds": bool(self.holds),
            "degenerate": bool(self.degenerate),
        }


def robustness_bound_check(local_policies, envs, guard: int = TRAJECTORY_GUARD, table_guard: int = DEFAULT_GUARD) -> BoundReport:
    """
    1 - alpha_n <= p_F^n(tau) / (p_B^n(tau|x) pi_n(x)) <= 1 + beta_n，
    检查 D_J(pi, pi_hat) <= sum_n log((1 + beta_n) / (1 - alpha_n))。
    """
    env = envs[0]
    batch = TrajectoryBatch.from_trajectories(enumerate_trajectories(env, guard))
    ratios = _local_log_ratios(local_policies, batch)
    terminals = [tau.terminal for tau in batch.trajectories]
    alpha, beta = [], []
    bound = 0.0
    degenerate = False
    for n, e in enumerate(envs):
        pi_n = reward_table([e], guard=table_guard)
        log_ratio = ratios[n] - np.log([pi_n[x] for x in terminals])
        lo, hi = float(log_ratio.min()), float(log_ratio.max())
        alpha.append(1.0 - np.exp(lo))
        beta.append(np.exp(hi) - 1.0)
        if not np.isfinite(lo):
            degenerate = True
        bound += hi - lo
    target = reward_table(envs, guard=table_guard)
    pi_hat = effective_target(local_policies, env, guard)
    d_j = jeffrey(target, pi_hat)
    if degenerate:
        bound = float("inf")
        logger.warning("alpha_n >= 1 for some client, bound is infinite")
    # 上界本身是数值算出来的，比较时留一点浮点余量
    holds = bool(d_j <= bound + 1e-9)
    return BoundReport(alpha, beta, d_j, bound, holds, degenerate)


def cb_kl_gradient_identity_check(policy: ForwardPolicy, env=None, guard: int = TRAJECTORY_GUARD) -> float:
    """
    精确算 grad KL[p_F || p_B] 和 1/4 E_{tau,tau' ~ p_F}[grad L_CB]（对 tabular logits），
    返回两者逐元素的最大绝对差。
    """
    env = env if env is not None else policy.env
    if policy.backend != TABULAR:
        raise UnsupportedError("the gradient identity check needs a tabular policy")
    trajs = enumerate_trajectories(env, guard)
    batch = TrajectoryBatch.from_trajectories(trajs)
    ev = evaluate_batch(policy, batch)
    A = policy.n_actions
    n_states = len(policy.graph)

    # 每条轨迹 log p_F 对 logits 的梯度：sum_t (onehot(a_t) - p(s_t))
    G = np.zeros((len(trajs), n_states * A))
    rows = np.array([policy.graph.index[s] for s in batch.row_states])
    for r, (k, a) in enumerate(zip(batch.row_traj, batch.row_actions)):
        g = -ev.row_probs[r].copy()
        g[a] += 1.0
        G[k, rows[r] * A : (rows[r] + 1) * A] += g

    log_r = np.array([env.log_reward(tau.terminal) for tau in trajs])
    log_z = logsumexp([env.log_reward(x) for x in enumerate_states(env).terminals])
    v = ev.log_pf - batch.log_pb - log_r
    w = np.exp(ev.log_pf)
    grad_kl = (w * (v + log_z + 1.0)) @ G

    dv = v[:, None] - v[None, :]
    ww = w[:, None] * w[None, :]
    # sum_ij w_i w_j 2 (v_i - v_j) (g_i - g_j)
    coef = 2.0 * ww * dv
    grad_cb = coef.sum(axis=1) @ G - coef.sum(axis=0) @ G
    return float(np.max(np.abs(grad_kl - 0.25 * grad_cb)))


# ------------------- 精确平衡的策略 -------------------


def balanced_policy(env, log_reward=None):
    """
    用动态规划算精确的状态流，构造一个精确满足 TB 的 tabular 策略。
    返回 (ForwardPolicy, log Z)。
    """
    log_reward = log_reward or env.log_reward
    graph = enumerate_states(env)
    A = env.n_actions
    stop = env.stop_action
    log_f = np.full(len(graph), -np.inf)
    logits = np.full((len(graph), A), -np.inf)
    # 按逆拓扑序：F(s) = R(s)[s 终止] + sum_{s'} F(s') p_B(s|s')
    for i in range(len(graph) - 1, -1, -1):
        s = graph.states[i]
        for a in env.legal_actions(s):
            if a == stop:
                logits[i, a] = log_reward(s)
            else:
                child = env.step(s, a)
                logits[i, a] = log_f[graph.index[child]] - np.log(env.num_parents(child))
        log_f[i] = logsumexp(logits[i][np.isfinite(logits[i])])
        logits[i] = logits[i] - log_f[i]
    # 非法动作反正会被 mask，参数里放 0
    logits[~np.isfinite(logits)] = 0.0
    return ForwardPolicy(env, TABULAR, logits.ravel()), float(log_f[0])


# ------------------- 带噪奖励 -------------------


class RewardWrapper:
    """只换奖励，其它属性都转给 base 环境（指纹不变，所以 snapshot 和 tabular 策略通用）"""

    def __init__(self, base):
        self.base = base

    def __getattr__(self, name):
        if name.startswith("__") or name in ("base", "bases", "offsets", "sigma2", "weights"):
            raise AttributeError(name)
        return getattr(self.base, name)


class NoisyRewardEnv(RewardWrapper):
    """log R'(x) = log R(x) + eps_x，eps_x ~ N(0, sigma^2)，整次运行固定"""

    def __init__(self, base, offsets: dict, sigma2: float):
        super().__init__(base)
        self.offsets = offsets
        self.sigma2 = sigma2

    def log_reward(self, x) -> float:
        return self.base.log_reward(x) + self.offsets[x]


def noisy_reward_wrap(env, sigma2: float, rng: np.random.Generator) -> NoisyRewardEnv:
    terms = enumerate_terminals(env)
    noise = rng.normal(0.0, np.sqrt(sigma2), size=len(terms)) if sigma2 > 0 else np.zeros(len(terms))
    return NoisyRewardEnv(env, dict(zip(terms, noise.tolist())), sigma2)


class ProductRewardEnv(RewardWrapper):
    """log R(x) = sum_n w_n log R_n(x)，集中式基线用"""

    def __init__(self, bases, weights=None):
        bases = list(bases)
        super().__init__(bases[0])
        fp = bases[0].fingerprint()
        if any(b.fingerprint() != fp for b in bases):
            raise ConfigError("clients", "all client envs must share one state space")
        self.bases = bases
        self.weights = None if weights is None else tuple(float(w) for w in weights)

    def log_reward(self, x) -> float:
        w = self.weights or (1.0,) * len(self.bases)
        return float(sum(wn * b.log_reward(x) for wn, b in zip(w, self.bases)))


# ------------------- 报告 -------------------


@dataclass
class ModelReport:
    name: str
    l1: float
    topk: float = None
    provenance: str = ""
    extra: dict = field(default_factory=dict)


def evaluate_model(name, policy, target: DistributionTable, envs, weights=None, top_k: int = 800, samples: int = 100_000, rng=None, guard: int = DEFAULT_GUARD) -> ModelReport:
    """能枚举就精确算 p_T，否则采样；Top-K 总是在采样上算"""
    rng = rng if rng is not None else np.random.default_rng(0)
    env = policy.env
    try:
        table = exact_pT(policy, env, guard)
    except GuardExceeded:
        logger.info("[%s] enumeration guard exceeded, falling back to %d samples", name, samples)
        table = sampled_pT(policy, samples, rng)
    drawn = sample_terminals(policy, max(samples, top_k), rng)
    topk = topk_avg_log_reward(drawn, envs, top_k, weights)
    return ModelReport(name, l1(table, target), topk, table.provenance)


def write_report(path, report: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=float)
        f.write("\n")


# ------------------- 数值恒等式 -------------------


def trajectory_sum_pT(policy, env=None, guard: int = TRAJECTORY_GUARD) -> DistributionTable:
    """p_T(x) = sum_{tau -> x} p_F(tau)，逐条轨迹枚举（给 exact_pT 做对照）"""
    env = env if env is not None else policy.env
    batch = TrajectoryBatch.from_trajectories(enumerate_trajectories(env, guard))
    keys, log_w = _group_logsumexp([tau.terminal for tau in batch.trajectories], evaluate_batch(policy, batch).log_pf)
    return DistributionTable(dict(zip(keys, np.exp(log_w).tolist())), "trajectory-sum")


def random_tabular(env, rng: np.random.Generator, scale: float = 1.0) -> ForwardPolicy:
    n = len(enumerate_states(env))
    return ForwardPolicy(env, TABULAR, rng.normal(0.0, scale, n * env.n_actions))


def identity_checks(seed: int = 0, bound_instances: int = 100) -> dict:
    """
    在小环境上跑一遍各个恒等式，返回 {检查名: 最大偏差}；
    jeffrey_bound 返回违反上界的实例数（应为 0）。
    """
    rng = np.random.default_rng(seed)
    out = {}

    grid3 = GridEnv(3, [[2, 0], [0, 2]])
    policy = random_tabular(grid3, rng)
    trajs = sample_trajectories(policy, 64, 0.1, rng)
    batch = TrajectoryBatch.from_trajectories(trajs)
    lpf = evaluate_batch(policy, batch).log_pf
    log_z = rng.normal()
    v = tb_violation(lpf, batch.log_pb, batch.log_reward, log_z)
    half = len(trajs) // 2
    cb = [cb_loss(lpf[i], batch.log_pb[i], batch.log_reward[i], lpf[half + i], batch.log_pb[half + i], batch.log_reward[half + i])[0] for i in range(half)]
    out["cb_tb"] = float(np.max(np.abs(np.array(cb) - (v[:half] - v[half:]) ** 2)))

    v16 = v[:16]
    pairs = np.mean((v16[:, None] - v16[None, :]) ** 2)
    out["cb_vl"] = abs(float(pairs) - 2.0 * vl_loss(lpf[:16], batch.log_pb[:16], batch.log_reward[:16])[0])

    out["dp_vs_trajectory_sum"] = l1(exact_pT(policy), trajectory_sum_pT(policy))

    grid2 = GridEnv(2, [[1, 1]])
    out["cb_kl_grid"] = cb_kl_gradient_identity_check(random_tabular(grid2, rng))
    ms = MultisetEnv(2, 2, rng.uniform(0.0, 1.0, 2))
    out["cb_kl_multiset"] = cb_kl_gradient_identity_check(random_tabular(ms, rng))

    violations = 0
    for _ in range(bound_instances):
        envs = [MultisetEnv(3, 2, rng.uniform(0.0, 1.0, 3)) for _ in range(2)]
        locals_ = []
        for e in envs:
            balanced, _ = balanced_policy(e)
            noise = rng.normal(0.0, 0.3, balanced.params.shape)
            locals_.append(balanced.with_params(balanced.params + noise))
        if not robustness_bound_check(locals_, envs).holds:
            violations += 1
    out["jeffrey_bound"] = violations
    return out
