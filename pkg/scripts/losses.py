# scripts/losses.py
"""
各种 balance 准则：TB, DB, DBC, CB, VL, AB。

底层函数只处理数值（每条轨迹 / 每条边的 log 量），返回 loss 和对这些量的梯度；
Objective 把它们和策略、logZ、状态流网络串起来，给训练循环一个
params -> (loss, grad) 的接口。所有 loss 都是 batch 内的均值。
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, NumericError, SnapshotError, UnsupportedError
from nn import MlpSpec, ParamGroup, init_params, mlp_backward, mlp_forward
from policy import MLP, TABULAR, TrajectoryBatch, evaluate_batch, traj_grad_to_logp

logger = logging.getLogger(__name__)

LOSS_KINDS = ("TB", "DB", "DBC", "CB", "VL", "AB")
PAIR_LOSSES = ("CB", "AB")


@dataclass
class LossSpec:
    kind: str = "CB"
    logz_lr: float = 0.1
    weights: tuple = None
    epsilon: float = 0.1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError("loss.kind", f"must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.logz_lr <= 0:
            raise ConfigError("loss.logz_lr", "must be > 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("loss.epsilon", "must be in [0, 1]")
        if self.weights is not None:
            self.weights = tuple(float(w) for w in self.weights)
            if any(w <= 0 for w in self.weights):
                raise ConfigError("loss.weights", "all weights must be > 0")


def _check_rewards(*log_rs):
    for lr in log_rs:
        if not np.all(np.isfinite(lr)):
            raise NumericError("reward-support: R(x) = 0 (or non-finite) at a terminal state")


# ------------------- 逐条轨迹的准则 -------------------


def tb_violation(log_pf, log_pb, log_r, log_z):
    """V_TB = log p_F(tau) + log Z - log p_B(tau|x) - log R(x)"""
    return np.asarray(log_pf) + log_z - np.asarray(log_pb) - np.asarray(log_r)


def tb_loss(log_pf, log_pb, log_r, log_z):
    """返回 (loss, d loss / d log_pf, d loss / d log_z)"""
    _check_rewards(log_r)
    v = np.atleast_1d(tb_violation(log_pf, log_pb, log_r, log_z))
    d = 2.0 * v / v.size
    return float(np.mean(v**2)), d, float(d.sum())


def cb_loss(log_pf, log_pb, log_r, log_pf2, log_pb2, log_r2):
    """成对：(log p_F/p_B(tau) - log p_F/p_B(tau') + log R(x')/R(x))^2"""
    _check_rewards(log_r, log_r2)
    d = np.atleast_1d(
        (np.asarray(log_pf) - log_pb - log_r) - (np.asarray(log_pf2) - log_pb2 - log_r2)
    )
    g = 2.0 * d / d.size
    return float(np.mean(d**2)), g, -g


def vl_loss(log_pf, log_pb, log_r):
    """违背量对 batch 均值的方差；logZ 在这里抵消掉了"""
    _check_rewards(log_r)
    v = np.atleast_1d(tb_violation(log_pf, log_pb, log_r, 0.0))
    if v.size < 2:
        raise NumericError("variance loss needs a batch of at least 2 trajectories")
    dev = v - v.mean()
    return float(np.mean(dev**2)), 2.0 * dev / v.size


def ab_loss(g_pf, g_pb, g_pf2, g_pb2, local_deltas, weights=None):
    """
    (Delta_global - sum_n w_n Delta_n)^2，
    Delta = [log p_F(tau) - log p_B(tau|x)] - [log p_F(tau') - log p_B(tau'|x')]。
    local_deltas: (N, P)，本地模型不带梯度，也从不计算任何 R_n。
    """
    local_deltas = np.atleast_2d(np.asarray(local_deltas, dtype=float))
    if local_deltas.shape[0] == 0:
        raise NumericError("aggregating balance needs at least one local model")
    w = np.ones(local_deltas.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (local_deltas.shape[0],):
        raise ConfigError("loss.weights", f"need {local_deltas.shape[0]} weights, got {w.shape[0]}")
    delta_g = (np.asarray(g_pf) - g_pb) - (np.asarray(g_pf2) - g_pb2)
    e = np.atleast_1d(delta_g - w @ local_deltas)
    g = 2.0 * e / e.size
    return float(np.mean(e**2)), g, -g


# ------------------- 逐条边的准则 -------------------


def db_loss(log_f_src, log_pf_edge, log_f_dst, log_pb_edge, is_stop, log_r):
    """
    内部边：(log F(s) + log p_F(s'|s) - log F(s') - log p_B(s|s'))^2
    终止边：(log F(s) + log p_F(s_f|s) - log R(s))^2
    终止边上 log_f_dst / log_pb_edge 不用，log_r 只在终止边上用。
    返回 (loss, d/d log_f_src, d/d log_pf_edge, d/d log_f_dst)
    """
    is_stop = np.atleast_1d(np.asarray(is_stop, dtype=bool))
    log_r = np.broadcast_to(np.asarray(log_r, dtype=float), is_stop.shape)
    _check_rewards(log_r[is_stop])
    head = np.asarray(log_f_src, dtype=float) + log_pf_edge
    tail = np.where(is_stop, log_r, np.asarray(log_f_dst, dtype=float) + log_pb_edge)
    v = np.atleast_1d(head - tail)
    g = 2.0 * v / v.size
    return float(np.mean(v**2)), g, g, np.where(is_stop, 0.0, -g)


def dbc_loss(log_r_s, log_r_next, log_pb_edge, log_pf_stop_s, log_pf_edge, log_pf_stop_next):
    """
    所有状态都是终止态时的 DB：
        R(s') p_B(s|s') p_F(s_f|s) = R(s) p_F(s'|s) p_F(s_f|s')
    返回 (loss, d/d log_pf_stop_s, d/d log_pf_edge, d/d log_pf_stop_next)
    """
    _check_rewards(log_r_s, log_r_next)
    v = np.atleast_1d(
        np.asarray(log_r_next) + log_pb_edge + log_pf_stop_s - log_r_s - log_pf_edge - log_pf_stop_next
    )
    if v.size == 0:
        return 0.0, v, v, v
    g = 2.0 * v / v.size
    return float(np.mean(v**2)), g, -g, -g


# ------------------- 状态流 (DB 用) -------------------


class StateFlow:
    """log F(s)；结构和策略一致，只是输出维度为 1"""

    def __init__(self, policy, params: np.ndarray = None, rng: np.random.Generator = None):
        self.env = policy.env
        self.backend = policy.backend
        if self.backend == TABULAR:
            self.graph = policy.graph
            self.spec = None
            size = len(self.graph)
        else:
            widths = policy.spec.widths
            self.spec = MlpSpec((*widths[:-1], 1), policy.spec.negative_slope)
            size = self.spec.n_params
        if params is None:
            if self.spec is None:
                params = np.zeros(size)
            else:
                params = init_params(self.spec, rng if rng is not None else np.random.default_rng(0))
        self.params = np.asarray(params, dtype=float)

    def log_flow(self, states):
        if self.backend == TABULAR:
            rows = np.array([self.graph.index[s] for s in states], dtype=np.int64)
            return self.params[rows], rows
        out, cache = mlp_forward(self.spec, self.params, self.env.featurize_batch(states))
        return out[:, 0], cache

    def backward(self, cache, d_log_flow: np.ndarray) -> np.ndarray:
        if self.backend == TABULAR:
            grad = np.zeros_like(self.params)
            np.add.at(grad, cache, d_log_flow)
            return grad
        grad, _ = mlp_backward(self.spec, self.params, cache, d_log_flow[:, None])
        return grad


# ------------------- 训练目标 -------------------


class Objective:
    """
    把一个 LossSpec 和可训练的东西绑在一起：
        全局 / 本地前向策略参数，TB 的 logZ，DB 的状态流。
    AB 需要 local_policies（冻结的 snapshot），且不会访问任何奖励。
    """

    def __init__(self, spec: LossSpec, policy, local_policies=None, local_backwards=None, rng=None):
        self.spec = spec
        self.policy = policy
        self.env = policy.env
        self.log_z = np.zeros(1)
        self.flow = None
        self.local_policies = list(local_policies or [])
        if spec.kind == "DB":
            self.flow = StateFlow(policy, rng=rng)
        if spec.kind == "DBC" and not self.env.all_terminal:
            raise UnsupportedError(f"DBC needs an env where every state is terminal, {self.env.kind} is not")
        if spec.kind == "AB":
            if not self.local_policies:
                raise NumericError("aggregating balance needs at least one local snapshot")
            fp = self.env.fingerprint()
            for p in self.local_policies:
                if p.env.fingerprint() != fp:
                    raise SnapshotError(f"env fingerprint mismatch: {p.env.fingerprint()} vs {fp}")
            for b in local_backwards or []:
                if b.mode != "uniform":
                    raise UnsupportedError("only uniform backward policies are supported")
            if spec.weights is not None and len(spec.weights) != len(self.local_policies):
                raise ConfigError("loss.weights", f"need {len(self.local_policies)} weights, got {len(spec.weights)}")

    @property
    def needs_reward(self) -> bool:
        return self.spec.kind != "AB"

    def param_groups(self) -> list:
        groups = [ParamGroup("policy", self.policy.params.size, decay=self.policy.backend == MLP)]
        if self.spec.kind == "TB":
            groups.append(ParamGroup("log_z", 1, lr=self.spec.logz_lr, decay=False))
        if self.flow is not None:
            groups.append(ParamGroup("flow", self.flow.params.size, decay=self.flow.backend == MLP))
        return groups

    def get_params(self) -> np.ndarray:
        parts = [self.policy.params]
        if self.spec.kind == "TB":
            parts.append(self.log_z)
        if self.flow is not None:
            parts.append(self.flow.params)
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray):
        n = self.policy.params.size
        self.policy.params = flat[:n].copy()
        off = n
        if self.spec.kind == "TB":
            self.log_z = flat[off : off + 1].copy()
            off += 1
        if self.flow is not None:
            self.flow.params = flat[off : off + self.flow.params.size].copy()

    def __call__(self, batch: TrajectoryBatch):
        """返回 (loss, 扁平梯度)，梯度顺序和 get_params 一致"""
        kind = self.spec.kind
        ev = evaluate_batch(self.policy, batch)
        A = self.policy.n_actions
        extra = []

        if kind == "TB":
            loss, d_pf, d_z = tb_loss(ev.log_pf, batch.log_pb, batch.log_reward, self.log_z[0])
            g_logp = traj_grad_to_logp(batch, d_pf, A)
            extra.append(np.array([d_z]))
        elif kind == "VL":
            loss, d_pf = vl_loss(ev.log_pf, batch.log_pb, batch.log_reward)
            g_logp = traj_grad_to_logp(batch, d_pf, A)
        elif kind in PAIR_LOSSES:
            loss, d_pf = self._pair_loss(batch, ev)
            g_logp = traj_grad_to_logp(batch, d_pf, A)
        elif kind == "DB":
            loss, g_logp, g_flow = self._db(batch, ev)
            extra.append(g_flow)
        else:
            loss, g_logp = self._dbc(batch, ev)

        grad = self.policy.grad_from_logp(ev.cache, ev.row_probs, g_logp)
        return loss, np.concatenate([grad, *extra])

    def _pairs(self, batch):
        half = len(batch) // 2
        if half < 1:
            raise NumericError("pair losses need a batch of at least 2 trajectories")
        return np.arange(half), np.arange(half, 2 * half)

    def _pair_loss(self, batch, ev):
        i, j = self._pairs(batch)
        lpb = batch.log_pb
        d_pf = np.zeros(len(batch))
        if self.spec.kind == "CB":
            loss, d1, d2 = cb_loss(ev.log_pf[i], lpb[i], batch.log_reward[i], ev.log_pf[j], lpb[j], batch.log_reward[j])
        else:
            deltas = []
            for local in self.local_policies:
                lpf_n = evaluate_batch(local, batch).log_pf
                # 本地后向策略也是均匀的，log p_B 和 batch 里的一致
                deltas.append((lpf_n[i] - lpb[i]) - (lpf_n[j] - lpb[j]))
            loss, d1, d2 = ab_loss(ev.log_pf[i], lpb[i], ev.log_pf[j], lpb[j], np.array(deltas), self.spec.weights)
        np.add.at(d_pf, i, d1)
        np.add.at(d_pf, j, d2)
        return loss, d_pf

    def _edges(self, batch):
        """每一行是一条边 s_t -a_t-> s_{t+1}（或 s_f）"""
        rows = np.arange(len(batch.row_actions))
        is_stop = batch.row_actions == self.env.stop_action
        nxt = np.where(is_stop, rows, rows + 1)
        log_pb_edge = np.zeros(len(rows))
        log_r = np.zeros(len(rows))
        r = 0
        for tau in batch.trajectories:
            n = len(tau.states)
            log_pb_edge[r : r + n - 1] = tau.log_pb[1:]
            log_r[r + n - 1] = tau.log_reward
            r += n
        return rows, is_stop, nxt, log_pb_edge, log_r

    def _db(self, batch, ev):
        rows, is_stop, nxt, log_pb_edge, log_r = self._edges(batch)
        log_f, cache = self.flow.log_flow(batch.row_states)
        chosen = ev.row_logp[rows, batch.row_actions]
        loss, d_src, d_pf, d_dst = db_loss(log_f, chosen, log_f[nxt], log_pb_edge, is_stop, log_r)
        g_logp = np.zeros_like(ev.row_logp)
        g_logp[rows, batch.row_actions] = d_pf
        d_flow = d_src.copy()
        np.add.at(d_flow, nxt, d_dst)
        return loss, g_logp, self.flow.backward(cache, d_flow)

    def _dbc(self, batch, ev):
        rows, is_stop, nxt, log_pb_edge, _ = self._edges(batch)
        stop = self.env.stop_action
        inner = rows[~is_stop]
        nx_rows = nxt[~is_stop]
        log_r_row = np.array([self.env.log_reward(s) for s in batch.row_states])
        loss, d_stop_s, d_edge, d_stop_next = dbc_loss(
            log_r_row[inner],
            log_r_row[nx_rows],
            log_pb_edge[inner],
            ev.row_logp[inner, stop],
            ev.row_logp[inner, batch.row_actions[inner]],
            ev.row_logp[nx_rows, stop],
        )
        g_logp = np.zeros_like(ev.row_logp)
        np.add.at(g_logp, (inner, np.full(len(inner), stop)), d_stop_s)
        np.add.at(g_logp, (inner, batch.row_actions[inner]), d_edge)
        np.add.at(g_logp, (nx_rows, np.full(len(nx_rows), stop)), d_stop_next)
        return loss, g_logp
