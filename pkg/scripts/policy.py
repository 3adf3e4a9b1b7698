# scripts/policy.py
"""
前向 / 后向策略、轨迹采样，以及客户端发给服务器的 snapshot 格式。

前向策略有两种后端：
    tabular : 每个状态一行 logits（按 enumerate_states 的顺序）
    mlp     : featurize(s) 过一个 MLP
输出维度统一是 env.n_actions，非法动作先 mask 再 softmax。
后向策略固定为在父节点上均匀分布。
"""

import base64
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from env import SINK, enumerate_states
from errors import EnvIntegrityError, MalformedStateError, SnapshotError
from nn import MlpSpec, init_params, mlp_backward, mlp_forward

logger = logging.getLogger(__name__)

TABULAR = "tabular"
MLP = "mlp"
SNAPSHOT_VERSION = 1


# ------------------- 策略 -------------------


class ForwardPolicy:
    def __init__(self, env, backend: str, params: np.ndarray, spec: MlpSpec = None):
        if backend not in (TABULAR, MLP):
            raise ValueError(f"unknown backend {backend!r}")
        self.env = env
        self.backend = backend
        self.spec = spec
        self.params = np.asarray(params, dtype=float)
        if backend == TABULAR:
            self.graph = enumerate_states(env)
            expected = len(self.graph) * env.n_actions
        else:
            if spec is None or spec.widths[-1] != env.n_actions:
                raise ValueError("mlp backend needs an MlpSpec whose output width is env.n_actions")
            expected = spec.n_params
        if self.params.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {self.params.shape}")

    @classmethod
    def create(cls, env, backend: str = MLP, hidden=(64, 64), rng: np.random.Generator = None):
        """新建策略；tabular 初始化为全 0 logits（均匀策略）"""
        if backend == TABULAR:
            n = len(enumerate_states(env))
            return cls(env, TABULAR, np.zeros(n * env.n_actions))
        spec = MlpSpec((env.feature_dim, *hidden, env.n_actions))
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(env, MLP, init_params(spec, rng), spec)

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    @property
    def arch(self) -> dict:
        if self.backend == TABULAR:
            return {"n_states": len(self.graph), "n_actions": self.n_actions}
        return {"widths": list(self.spec.widths), "negative_slope": self.spec.negative_slope}

    def with_params(self, params: np.ndarray) -> "ForwardPolicy":
        return ForwardPolicy(self.env, self.backend, params, self.spec)

    def masks(self, states) -> np.ndarray:
        masks = np.stack([self.env.action_mask(s) for s in states])
        if not masks.any(axis=1).all():
            raise MalformedStateError("state with no legal action (no children and no stop)")
        return masks

    def logits(self, states):
        """返回 (R, A) 的原始 logits 和反向用的 cache"""
        if self.backend == TABULAR:
            rows = np.array([self.graph.index[s] for s in states], dtype=np.int64)
            table = self.params.reshape(len(self.graph), self.n_actions)
            return table[rows], rows
        x = self.env.featurize_batch(states)
        out, cache = mlp_forward(self.spec, self.params, x)
        return out, cache

    def logits_backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        if self.backend == TABULAR:
            grad = np.zeros((len(self.graph), self.n_actions))
            np.add.at(grad, cache, dlogits)
            return grad.ravel()
        grad, _ = mlp_backward(self.spec, self.params, cache, dlogits)
        return grad

    def log_probs(self, states):
        """
        masked log-softmax。
        返回 (logp, probs, masks, cache)：非法动作 logp=-inf、prob=0。
        """
        masks = self.masks(states)
        z, cache = self.logits(states)
        logp = log_softmax(np.where(masks, z, -np.inf), axis=1)
        probs = np.where(masks, np.exp(logp), 0.0)
        return logp, probs, masks, cache

    def grad_from_logp(self, cache, probs: np.ndarray, g_logp: np.ndarray) -> np.ndarray:
        """对 logp 矩阵的梯度（非法位置为 0）换成对参数的梯度"""
        dlogits = g_logp - probs * g_logp.sum(axis=1, keepdims=True)
        return self.logits_backward(cache, dlogits)

    def action_distribution(self, s) -> np.ndarray:
        _, probs, _, _ = self.log_probs([s])
        return probs[0]


@dataclass(frozen=True)
class BackwardPolicy:
    """p_B(s|s') = 1/|parents(s')|"""

    mode: str = "uniform"

    def __post_init__(self):
        if self.mode != "uniform":
            raise ValueError(f"unsupported backward policy {self.mode!r}")

    def log_prob(self, env, s_next) -> float:
        return -float(np.log(env.num_parents(s_next)))


UNIFORM_BACKWARD = BackwardPolicy()


# ------------------- 轨迹 -------------------


@dataclass
class Trajectory:
    """
    states : s0 ... x
    actions: 每个状态上选的动作，最后一个是停止
    log_pf : 每个动作在策略下的 log 概率（总是 on-policy 的值，不是混合分布的）
    log_pb : 和 states 对齐，log_pb[0] = 0，log_pb[t] = log p_B(s_{t-1}|s_t)
    """

    states: list
    actions: list
    log_pf: np.ndarray
    log_pb: np.ndarray
    log_reward: float = float("nan")
    explored: bool = False

    @property
    def terminal(self):
        return self.states[-1]

    @property
    def total_log_pf(self) -> float:
        return float(np.sum(self.log_pf))

    @property
    def total_log_pb(self) -> float:
        return float(np.sum(self.log_pb))


def sample_trajectories(
    policy: ForwardPolicy,
    n: int,
    epsilon: float,
    rng: np.random.Generator,
    with_reward: bool = True,
    backward: BackwardPolicy = UNIFORM_BACKWARD,
) -> list:
    """
    一批轨迹同步往前走。每一步以 epsilon 的概率在合法动作里均匀选，
    否则按 action_distribution 选。with_reward=False 时不碰 log_reward（服务器端用）。
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    env = policy.env
    s0 = env.initial_state
    states = [[s0] for _ in range(n)]
    actions = [[] for _ in range(n)]
    log_pf = [[] for _ in range(n)]
    log_pb = [[0.0] for _ in range(n)]
    active = list(range(n))

    for _ in range(env.max_steps()):
        if not active:
            break
        cur = [states[i][-1] for i in active]
        logp, probs, masks, _ = policy.log_probs(cur)
        if epsilon > 0:
            uniform = masks / masks.sum(axis=1, keepdims=True)
            q = (1.0 - epsilon) * probs + epsilon * uniform
        else:
            q = probs
        cdf = np.cumsum(q, axis=1)
        u = rng.random(len(active))
        picks = np.argmax(cdf > (u * cdf[:, -1])[:, None], axis=1)

        still = []
        for row, i in enumerate(active):
            a = int(picks[row])
            actions[i].append(a)
            log_pf[i].append(float(logp[row, a]))
            nxt = env.step(cur[row], a)
            if nxt is SINK:
                continue
            states[i].append(nxt)
            log_pb[i].append(backward.log_prob(env, nxt))
            still.append(i)
        active = still

    if active:
        raise EnvIntegrityError(f"{len(active)} trajectories exceeded the step budget {env.max_steps()}")

    out = []
    for i in range(n):
        x = states[i][-1]
        out.append(
            Trajectory(
                states=states[i],
                actions=actions[i],
                log_pf=np.array(log_pf[i]),
                log_pb=np.array(log_pb[i]),
                log_reward=env.log_reward(x) if with_reward else float("nan"),
                explored=epsilon > 0,
            )
        )
    return out


def sample_trajectory(policy: ForwardPolicy, epsilon: float, rng: np.random.Generator, with_reward: bool = True) -> Trajectory:
    return sample_trajectories(policy, 1, epsilon, rng, with_reward=with_reward)[0]


def _check_path(env, tau: Trajectory):
    if len(tau.actions) != len(tau.states):
        raise MalformedStateError("trajectory must have one action per state (last one is stop)")
    for t, (s, a) in enumerate(zip(tau.states, tau.actions)):
        if not env.action_mask(s)[a]:
            raise MalformedStateError(f"illegal action {a} at {s!r}")
        nxt = env.step(s, a)
        expected = tau.states[t + 1] if t + 1 < len(tau.states) else SINK
        if nxt != expected:
            raise MalformedStateError(f"invalid transition {s!r} -{a}-> {expected!r}")


def traj_log_pf(policy: ForwardPolicy, tau: Trajectory) -> float:
    """从头重新算 log p_F(tau)"""
    _check_path(policy.env, tau)
    logp, _, _, _ = policy.log_probs(tau.states)
    return float(logp[np.arange(len(tau.states)), tau.actions].sum())


def traj_log_pb(env, tau: Trajectory, backward: BackwardPolicy = UNIFORM_BACKWARD) -> float:
    _check_path(env, tau)
    return float(sum(backward.log_prob(env, s) for s in tau.states[1:]))


@dataclass
class TrajectoryBatch:
    """把一批轨迹摊平成 (状态, 动作) 行，方便一次性前向 / 反向"""

    trajectories: list
    row_states: list
    row_actions: np.ndarray
    row_traj: np.ndarray
    log_pb: np.ndarray
    log_reward: np.ndarray

    @classmethod
    def from_trajectories(cls, trajectories) -> "TrajectoryBatch":
        row_states, row_actions, row_traj = [], [], []
        for k, tau in enumerate(trajectories):
            row_states.extend(tau.states)
            row_actions.extend(tau.actions)
            row_traj.extend([k] * len(tau.states))
        return cls(
            trajectories=list(trajectories),
            row_states=row_states,
            row_actions=np.array(row_actions, dtype=np.int64),
            row_traj=np.array(row_traj, dtype=np.int64),
            log_pb=np.array([tau.total_log_pb for tau in trajectories]),
            log_reward=np.array([tau.log_reward for tau in trajectories]),
        )

    def __len__(self):
        return len(self.trajectories)


@dataclass
class BatchEval:
    """某个前向策略在一批轨迹上的结果"""

    log_pf: np.ndarray  # (B,)
    row_logp: np.ndarray  # (R, A)
    row_probs: np.ndarray
    cache: object = field(repr=False, default=None)


def evaluate_batch(policy: ForwardPolicy, batch: TrajectoryBatch) -> BatchEval:
    logp, probs, _, cache = policy.log_probs(batch.row_states)
    chosen = logp[np.arange(len(batch.row_actions)), batch.row_actions]
    lpf = np.bincount(batch.row_traj, weights=chosen, minlength=len(batch))
    return BatchEval(log_pf=lpf, row_logp=logp, row_probs=probs, cache=cache)


def traj_grad_to_logp(batch: TrajectoryBatch, d_log_pf: np.ndarray, n_actions: int) -> np.ndarray:
    """每条轨迹 log p_F 的梯度 -> 每行所选动作 logp 的梯度矩阵"""
    g = np.zeros((len(batch.row_actions), n_actions))
    g[np.arange(len(batch.row_actions)), batch.row_actions] = d_log_pf[batch.row_traj]
    return g


# ------------------- snapshot -------------------


@dataclass
class PolicySnapshot:
    """客户端唯一要发给服务器的东西"""

    env_fingerprint: str
    backend: str
    arch: dict
    params: np.ndarray
    backward: str = "uniform"
    meta: dict = field(default_factory=dict)
    version: int = SNAPSHOT_VERSION

    @classmethod
    def from_policy(cls, policy: ForwardPolicy, meta: dict = None, backward: BackwardPolicy = UNIFORM_BACKWARD):
        return cls(
            env_fingerprint=policy.env.fingerprint(),
            backend=policy.backend,
            arch=policy.arch,
            params=policy.params.copy(),
            backward=backward.mode,
            meta=dict(meta or {}),
        )

    def dumps(self) -> bytes:
        # 小端 float64 再 base64，逐位无损
        payload = {
            "version": self.version,
            "env_fingerprint": self.env_fingerprint,
            "backend": self.backend,
            "arch": self.arch,
            "params_b64": base64.b64encode(np.asarray(self.params, dtype="<f8").tobytes()).decode("ascii"),
            "backward": self.backward,
            "meta": self.meta,
        }
        return (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8")

    @classmethod
    def loads(cls, data: bytes) -> "PolicySnapshot":
        try:
            payload = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SnapshotError(f"truncated or corrupt snapshot: {e}")
        if not isinstance(payload, dict):
            raise SnapshotError(f"snapshot must hold a JSON object, got {type(payload).__name__}")
        missing = {"version", "env_fingerprint", "backend", "arch", "params_b64", "backward"} - set(payload)
        if missing:
            raise SnapshotError(f"snapshot is missing fields {sorted(missing)}")
        if payload["version"] != SNAPSHOT_VERSION:
            raise SnapshotError(f"unknown snapshot version {payload['version']}")
        try:
            raw = base64.b64decode(payload["params_b64"], validate=True)
        except (TypeError, ValueError) as e:
            raise SnapshotError(f"corrupt parameter payload: {e}")
        if len(raw) % 8:
            raise SnapshotError("truncated parameter payload")
        params = np.frombuffer(raw, dtype="<f8").astype(float)
        arch = payload["arch"]
        if payload["backend"] not in (MLP, TABULAR):
            raise SnapshotError(f"unknown backend {payload['backend']!r}")
        try:
            if payload["backend"] == MLP:
                expected = MlpSpec(tuple(arch["widths"]), arch.get("negative_slope", 0.01)).n_params
            else:
                expected = int(arch["n_states"]) * int(arch["n_actions"])
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise SnapshotError(f"malformed arch {arch!r}: {type(e).__name__}: {e}")
        if params.shape[0] != expected:
            raise SnapshotError(f"truncated parameter payload: {params.shape[0]} of {expected} values")
        return cls(
            env_fingerprint=payload["env_fingerprint"],
            backend=payload["backend"],
            arch=arch,
            params=params,
            backward=payload["backward"],
            meta=payload.get("meta", {}),
            version=payload["version"],
        )

    def to_policy(self, env):
        if env.fingerprint() != self.env_fingerprint:
            raise SnapshotError(f"env fingerprint mismatch: snapshot {self.env_fingerprint}, env {env.fingerprint()}")
        spec = None
        if self.backend == MLP:
            spec = MlpSpec(tuple(self.arch["widths"]), self.arch.get("negative_slope", 0.01))
        return ForwardPolicy(env, self.backend, self.params.copy(), spec), BackwardPolicy(self.backward)


def save_snapshot(policy: ForwardPolicy, meta: dict = None) -> bytes:
    return PolicySnapshot.from_policy(policy, meta).dumps()


def load_snapshot(data: bytes, env):
    """返回 (ForwardPolicy, BackwardPolicy, meta)"""
    snap = PolicySnapshot.loads(data)
    forward, backward = snap.to_policy(env)
    return forward, backward, snap.meta


def write_snapshot(path, data: bytes):
    with open(path, "wb") as f:
        f.write(data)


def read_snapshot(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()
