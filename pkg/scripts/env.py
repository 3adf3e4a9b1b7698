# scripts/env.py
"""
四个实验环境的状态 DAG：网格、多重集合、序列、系统发育树。

状态统一用可哈希的 tuple 表示（StateKey）：
    grid     : (x, y)
    multiset : 长度 |U| 的计数向量
    sequence : token 序列
    phylo    : 排好序的树字符串，例如 ("(0,(1,2))", "3")
终止汇点 s_f 用 SINK (None) 表示。
"""

import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import networkx as nx
import numpy as np

from errors import (
    ConfigError,
    GuardExceeded,
    MalformedStateError,
    NoParentsError,
    NotTerminalError,
    ShardError,
    UnsupportedError,
)

logger = logging.getLogger(__name__)

SINK = None
NUCLEOTIDES = "ACGT"
DEFAULT_GUARD = 5_000_000


# ------------------- 基类 -------------------


class Env:
    """所有环境共享的接口；子类只实现具体的转移和奖励"""

    kind = ""
    # grid / sequence 每个状态都能停下
    all_terminal = False

    def __init__(self):
        self._mask_cache = {}
        self._feat_cache = {}
        self._reward_cache = {}

    # --- 子类实现 ---
    @property
    def initial_state(self):
        raise NotImplementedError

    @property
    def n_actions(self) -> int:
        raise NotImplementedError

    def structure(self) -> dict:
        raise NotImplementedError

    def validate_state(self, s):
        raise NotImplementedError

    def is_terminal(self, s) -> bool:
        raise NotImplementedError

    def step(self, s, a):
        raise NotImplementedError

    def legal_actions(self, s) -> list:
        raise NotImplementedError

    def parents(self, s) -> list:
        raise NotImplementedError

    def _log_reward(self, x) -> float:
        raise NotImplementedError

    def _featurize(self, s) -> np.ndarray:
        raise UnsupportedError(f"{self.kind} states are not featurized")

    def estimated_state_count(self) -> int:
        raise NotImplementedError

    def max_steps(self) -> int:
        raise NotImplementedError

    # --- 公共实现 ---
    @property
    def stop_action(self) -> int:
        return self.n_actions - 1

    def fingerprint(self) -> str:
        """只覆盖状态空间结构，不含奖励，这样不同客户端的 snapshot 可以比对"""
        payload = json.dumps({"kind": self.kind, **self.structure()}, sort_keys=True)
        return f"{self.kind}:{hashlib.sha256(payload.encode()).hexdigest()[:16]}"

    def children(self, s) -> list:
        """[(action, child, is_stop), ...]，停止动作的 child 是 SINK"""
        self.validate_state(s)
        out = []
        for a in self.legal_actions(s):
            if a == self.stop_action:
                out.append((a, SINK, True))
            else:
                out.append((a, self.step(s, a), False))
        return out

    def num_parents(self, s) -> int:
        return len(self.parents(s))

    def action_mask(self, s) -> np.ndarray:
        mask = self._mask_cache.get(s)
        if mask is None:
            self.validate_state(s)
            mask = np.zeros(self.n_actions, dtype=bool)
            mask[self.legal_actions(s)] = True
            mask.flags.writeable = False
            self._mask_cache[s] = mask
        return mask

    def log_reward(self, x) -> float:
        self.validate_state(x)
        if not self.is_terminal(x):
            raise NotTerminalError(f"{x!r} is not terminal")
        val = self._reward_cache.get(x)
        if val is None:
            val = self._reward_cache[x] = self._log_reward(x)
        return val

    def featurize(self, s) -> np.ndarray:
        feat = self._feat_cache.get(s)
        if feat is None:
            self.validate_state(s)
            feat = self._featurize(s)
            feat.flags.writeable = False
            self._feat_cache[s] = feat
        return feat

    def featurize_batch(self, states) -> np.ndarray:
        return np.stack([self.featurize(s) for s in states])

    @property
    def feature_dim(self) -> int:
        return int(self.featurize(self.initial_state).shape[0])

    def __getstate__(self):
        # 缓存不跟着进程间传
        state = self.__dict__.copy()
        state["_mask_cache"] = {}
        state["_feat_cache"] = {}
        state["_reward_cache"] = {}
        return state


# ------------------- grid world -------------------


class GridEnv(Env):
    """H=W 的方格，动作：0 向右 (x+1)，1 向上 (y+1)，2 停止"""

    kind = "grid"
    all_terminal = True

    def __init__(self, size: int, beacons, kappa: float = 1.0, delta: float = 2.0):
        super().__init__()
        if size < 2:
            raise ConfigError("env.grid.size", f"must be >= 2, got {size}")
        beacons = np.asarray(beacons, dtype=float).reshape(-1, 2)
        if len(beacons) == 0:
            raise ConfigError("env.grid.beacons", "each client needs at least one beacon")
        if not np.all(np.isfinite(beacons)):
            raise ConfigError("env.grid.beacons", "beacon coordinates must be finite")
        self.size = int(size)
        self.beacons = beacons
        self.kappa = float(kappa)
        self.delta = float(delta)

    @property
    def initial_state(self):
        return (0, 0)

    @property
    def n_actions(self) -> int:
        return 3

    def structure(self) -> dict:
        return {"size": self.size}

    def validate_state(self, s):
        if not (
            isinstance(s, tuple)
            and len(s) == 2
            and all(isinstance(v, (int, np.integer)) for v in s)
            and 0 <= s[0] < self.size
            and 0 <= s[1] < self.size
        ):
            raise MalformedStateError(f"bad grid state {s!r}")

    def is_terminal(self, s) -> bool:
        return True

    def legal_actions(self, s) -> list:
        acts = []
        if s[0] + 1 < self.size:
            acts.append(0)
        if s[1] + 1 < self.size:
            acts.append(1)
        acts.append(2)
        return acts

    def step(self, s, a):
        if a == 0:
            return (s[0] + 1, s[1])
        if a == 1:
            return (s[0], s[1] + 1)
        return SINK

    def parents(self, s) -> list:
        self.validate_state(s)
        if s == self.initial_state:
            raise NoParentsError("s0 has no parents")
        out = []
        if s[0] > 0:
            out.append(((s[0] - 1, s[1]), 0))
        if s[1] > 0:
            out.append(((s[0], s[1] - 1), 1))
        return out

    def num_parents(self, s) -> int:
        return int(s[0] > 0) + int(s[1] > 0)

    def _log_reward(self, x) -> float:
        d_min = np.sqrt(((self.beacons - np.asarray(x, dtype=float)) ** 2).sum(axis=1)).min()
        z = self.kappa * (self.delta - d_min)
        # log sigmoid(z)
        return float(-np.logaddexp(0.0, -z))

    def _featurize(self, s) -> np.ndarray:
        return np.array([s[0] / self.size, s[1] / self.size], dtype=float)

    def estimated_state_count(self) -> int:
        return self.size * self.size

    def max_steps(self) -> int:
        return 2 * (self.size - 1) + 1


# ------------------- multisets -------------------


class MultisetEnv(Env):
    """从字典 U 里逐个加元素，只有大小为 S 的多重集合是终止态"""

    kind = "multiset"

    def __init__(self, dict_size: int, target_size: int, values):
        super().__init__()
        if dict_size < 1:
            raise ConfigError("env.multiset.dict_size", "must be >= 1")
        if target_size < 1:
            raise ConfigError("env.multiset.target_size", "must be >= 1")
        values = np.asarray(values, dtype=float)
        if values.shape != (dict_size,) or not np.all(np.isfinite(values)):
            raise ConfigError("env.multiset.values", "need one finite value per item")
        self.dict_size = int(dict_size)
        self.target_size = int(target_size)
        self.values = values

    @property
    def initial_state(self):
        return (0,) * self.dict_size

    @property
    def n_actions(self) -> int:
        return self.dict_size + 1

    def structure(self) -> dict:
        return {"dict_size": self.dict_size, "target_size": self.target_size}

    def validate_state(self, s):
        if not (
            isinstance(s, tuple)
            and len(s) == self.dict_size
            and all(isinstance(c, (int, np.integer)) and c >= 0 for c in s)
            and sum(s) <= self.target_size
        ):
            raise MalformedStateError(f"bad multiset state {s!r}")

    def is_terminal(self, s) -> bool:
        return sum(s) == self.target_size

    def legal_actions(self, s) -> list:
        if sum(s) == self.target_size:
            return [self.stop_action]
        return list(range(self.dict_size))

    def step(self, s, a):
        if a == self.stop_action:
            return SINK
        counts = list(s)
        counts[a] += 1
        return tuple(counts)

    def parents(self, s) -> list:
        self.validate_state(s)
        if sum(s) == 0:
            raise NoParentsError("s0 has no parents")
        out = []
        for u, c in enumerate(s):
            if c > 0:
                counts = list(s)
                counts[u] -= 1
                out.append((tuple(counts), u))
        return out

    def num_parents(self, s) -> int:
        return sum(1 for c in s if c > 0)

    def _log_reward(self, x) -> float:
        return float(np.dot(np.asarray(x, dtype=float), self.values))

    def _featurize(self, s) -> np.ndarray:
        return np.asarray(s, dtype=float) / self.target_size

    def estimated_state_count(self) -> int:
        return math.comb(self.target_size + self.dict_size, self.dict_size)

    def max_steps(self) -> int:
        return self.target_size + 1


# ------------------- sequences -------------------


class SequenceEnv(Env):
    """逐个追加 token，任意时刻都可以选停止 token，长度到 S 只能停"""

    kind = "sequence"
    all_terminal = True

    def __init__(self, max_len: int, num_tokens: int, position_scores, token_scores):
        super().__init__()
        if max_len < 1:
            raise ConfigError("env.sequence.max_len", "must be >= 1")
        if num_tokens < 1:
            raise ConfigError("env.sequence.num_tokens", "must be >= 1")
        p = np.asarray(position_scores, dtype=float)
        t = np.asarray(token_scores, dtype=float)
        if p.shape != (max_len,) or not np.all(np.isfinite(p)):
            raise ConfigError("env.sequence.position_scores", "need max_len finite scores")
        if t.shape != (num_tokens,) or not np.all(np.isfinite(t)):
            raise ConfigError("env.sequence.token_scores", "need num_tokens finite scores")
        self.max_len = int(max_len)
        self.num_tokens = int(num_tokens)
        self.position_scores = p
        self.token_scores = t

    @property
    def initial_state(self):
        return ()

    @property
    def n_actions(self) -> int:
        return self.num_tokens + 1

    def structure(self) -> dict:
        return {"max_len": self.max_len, "num_tokens": self.num_tokens}

    def validate_state(self, s):
        if not (
            isinstance(s, tuple)
            and len(s) <= self.max_len
            and all(isinstance(u, (int, np.integer)) and 0 <= u < self.num_tokens for u in s)
        ):
            raise MalformedStateError(f"bad sequence state {s!r}")

    def is_terminal(self, s) -> bool:
        return True

    def legal_actions(self, s) -> list:
        if len(s) == self.max_len:
            return [self.stop_action]
        return list(range(self.n_actions))

    def step(self, s, a):
        if a == self.stop_action:
            return SINK
        return s + (a,)

    def parents(self, s) -> list:
        self.validate_state(s)
        if len(s) == 0:
            raise NoParentsError("s0 has no parents")
        return [(s[:-1], s[-1])]

    def num_parents(self, s) -> int:
        return 1

    def _log_reward(self, x) -> float:
        if len(x) == 0:
            return 0.0
        return float(np.dot(self.position_scores[: len(x)], self.token_scores[list(x)]))

    def _featurize(self, s) -> np.ndarray:
        # 每个位置一个 one-hot，空位用 blank (= num_tokens)
        width = self.num_tokens + 1
        feat = np.zeros(self.max_len * width + 1, dtype=float)
        for i in range(self.max_len):
            u = s[i] if i < len(s) else self.num_tokens
            feat[i * width + u] = 1.0
        feat[-1] = len(s) / self.max_len
        return feat

    def estimated_state_count(self) -> int:
        return sum(self.num_tokens**k for k in range(self.max_len + 1))

    def max_steps(self) -> int:
        return self.max_len + 1


# ------------------- phylogenetics -------------------


def join_trees(a: str, b: str) -> str:
    lo, hi = sorted([a, b])
    return f"({lo},{hi})"


def split_tree(tree: str):
    """把根拆开，返回两个子树；叶子返回 None"""
    if not tree.startswith("("):
        return None
    depth = 0
    for i, ch in enumerate(tree):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 1:
            return tree[1:i], tree[i + 1 : -1]
    raise MalformedStateError(f"bad tree encoding {tree!r}")


@lru_cache(maxsize=None)
def parse_tree(tree: str):
    """字符串 -> 嵌套 tuple，叶子是 int"""
    parts = split_tree(tree)
    if parts is None:
        if not tree.isdigit():
            raise MalformedStateError(f"bad leaf {tree!r}")
        return int(tree)
    return (parse_tree(parts[0]), parse_tree(parts[1]))


def canonical_tree(node) -> str:
    """嵌套 tuple（任意子节点顺序）-> 规范字符串"""
    if isinstance(node, (int, np.integer)):
        return str(int(node))
    left, right = node
    return join_trees(canonical_tree(left), canonical_tree(right))


def canonical_forest(trees) -> tuple:
    return tuple(sorted(canonical_tree(parse_tree(t) if isinstance(t, str) else t) for t in trees))


def tree_leaves(node) -> list:
    if isinstance(node, int):
        return [node]
    return tree_leaves(node[0]) + tree_leaves(node[1])


def num_topologies(n_leaves: int) -> int:
    """带根二叉树拓扑数 (2n-3)!!"""
    out = 1
    for k in range(3, 2 * n_leaves - 2, 2):
        out *= k
    return out


def count_forests(n_leaves: int) -> int:
    """森林状态总数：F(n) = sum_k C(n-1,k-1) t(k) F(n-k)"""
    f = [1]
    for n in range(1, n_leaves + 1):
        f.append(sum(math.comb(n - 1, k - 1) * num_topologies(k) * f[n - k] for k in range(1, n + 1)))
    return f[n_leaves]


def jc69_matrix(branch_length: float, mu: float) -> np.ndarray:
    """P_same = 1/4 + 3/4 e^{-mu b}, P_diff = 1/4 - 1/4 e^{-mu b}"""
    e = math.exp(-mu * branch_length)
    return np.full((4, 4), 0.25 - 0.25 * e) + np.eye(4) * e


def felsenstein_loglik(tree, sites: np.ndarray, branch_length: float, mu: float) -> np.ndarray:
    """
    Felsenstein 剪枝，返回每个位点的 log(P_r(Y_m|T)^T pi)。
    sites: (N_leaves, M) 的 0..3 矩阵；每个节点按最大值做对数缩放，防止下溢。
    """
    node = parse_tree(tree) if isinstance(tree, str) else tree
    sites = np.atleast_2d(np.asarray(sites))
    P = jc69_matrix(branch_length, mu)
    eye = np.eye(4)

    def partials(n):
        if isinstance(n, (int, np.integer)):
            return eye[sites[int(n)]], np.zeros(sites.shape[1])
        la, sa = partials(n[0])
        lb, sb = partials(n[1])
        L = (la @ P.T) * (lb @ P.T)
        m = L.max(axis=1)
        return L / m[:, None], sa + sb + np.log(m)

    L, scale = partials(node)
    return np.log(L @ np.full(4, 0.25)) + scale


def jc69_site_loglik(env, topology, site) -> float:
    """单个位点的 JC69 对数似然；topology 是单棵树的 StateKey 或树字符串"""
    if isinstance(topology, tuple):
        if len(topology) != 1:
            raise MalformedStateError("topology must be a single tree")
        topology = topology[0]
    column = np.asarray(site).reshape(-1, 1)
    return float(felsenstein_loglik(topology, column, env.branch_length, env.mu)[0])


@dataclass(frozen=True)
class PhyloParams:
    n_leaves: int = 5
    branch_length: float = 0.1
    mu: float = 1.0
    gamma: float = 2.0
    n_clients: int = 1

    def __post_init__(self):
        if self.n_leaves < 3:
            raise ConfigError("env.phylo.leaves", "must be >= 3")
        if self.branch_length <= 0:
            raise ConfigError("env.phylo.branch_length", "must be > 0")
        if self.mu <= 0:
            raise ConfigError("env.phylo.mu", "must be > 0")
        if self.gamma <= 0:
            raise ConfigError("env.phylo.gamma", "must be > 0")
        if self.n_clients < 1:
            raise ConfigError("env.phylo.clients", "must be >= 1")


class PhyloEnv(Env):
    """森林状态：每步选两棵树把根接到一个新节点上，只剩一棵树时终止"""

    kind = "phylo"

    def __init__(self, params: PhyloParams, sites):
        super().__init__()
        sites = np.asarray(sites, dtype=np.int64)
        if sites.ndim != 2 or sites.shape[0] != params.n_leaves or sites.shape[1] < 1:
            raise ConfigError("env.phylo.sites", f"site matrix must be {params.n_leaves} x M (M >= 1)")
        if sites.min() < 0 or sites.max() > 3:
            raise ConfigError("env.phylo.sites", "site entries must be in {0,1,2,3}")
        self.params = params
        self.sites = sites
        self._pairs = list(itertools.combinations(range(params.n_leaves), 2))
        self._pair_id = {p: k for k, p in enumerate(self._pairs)}

    n_leaves = property(lambda self: self.params.n_leaves)
    branch_length = property(lambda self: self.params.branch_length)
    mu = property(lambda self: self.params.mu)
    gamma = property(lambda self: self.params.gamma)

    @property
    def initial_state(self):
        return tuple(sorted(str(i) for i in range(self.n_leaves)))

    @property
    def n_actions(self) -> int:
        return len(self._pairs) + 1

    def structure(self) -> dict:
        return {"leaves": self.n_leaves}

    def validate_state(self, s):
        ok = isinstance(s, tuple) and len(s) >= 1 and all(isinstance(t, str) for t in s)
        if ok:
            try:
                leaves = sorted(leaf for t in s for leaf in tree_leaves(parse_tree(t)))
                ok = leaves == list(range(self.n_leaves)) and canonical_forest(s) == s
            except (MalformedStateError, RecursionError, TypeError):
                ok = False
        if not ok:
            raise MalformedStateError(f"bad phylo state {s!r}")

    def is_terminal(self, s) -> bool:
        return len(s) == 1

    def legal_actions(self, s) -> list:
        if len(s) == 1:
            return [self.stop_action]
        return [self._pair_id[p] for p in itertools.combinations(range(len(s)), 2)]

    def step(self, s, a):
        if a == self.stop_action:
            return SINK
        i, j = self._pairs[a]
        rest = [t for k, t in enumerate(s) if k not in (i, j)]
        return tuple(sorted(rest + [join_trees(s[i], s[j])]))

    def parents(self, s) -> list:
        self.validate_state(s)
        out = []
        for k, t in enumerate(s):
            parts = split_tree(t)
            if parts is None:
                continue
            parent = tuple(sorted(list(s[:k]) + list(s[k + 1 :]) + list(parts)))
            i, j = sorted([parent.index(parts[0]), parent.index(parts[1])])
            out.append((parent, self._pair_id[(i, j)]))
        if not out:
            raise NoParentsError("s0 has no parents")
        return out

    def num_parents(self, s) -> int:
        return sum(1 for t in s if t.startswith("("))

    def log_likelihood(self, tree: str) -> float:
        return float(felsenstein_loglik(tree, self.sites, self.branch_length, self.mu).sum())

    def _log_reward(self, x) -> float:
        log_prior = -math.log(num_topologies(self.n_leaves))
        return self.gamma * self.log_likelihood(x[0]) + log_prior / self.params.n_clients

    def estimated_state_count(self) -> int:
        return count_forests(self.n_leaves)

    def max_steps(self) -> int:
        return self.n_leaves


# ------------------- 位点数据 -------------------


def random_topology(n_leaves: int, rng: np.random.Generator) -> tuple:
    """随机两两合并得到一棵树（终止态 StateKey）"""
    forest = [str(i) for i in range(n_leaves)]
    while len(forest) > 1:
        i, j = sorted(rng.choice(len(forest), size=2, replace=False))
        joined = join_trees(forest[i], forest[j])
        forest = [t for k, t in enumerate(forest) if k not in (i, j)] + [joined]
    return (forest[0],)


def simulate_sites(params: PhyloParams, truth, M: int, rng: np.random.Generator) -> np.ndarray:
    """从根往下按 JC69 模拟 M 个位点，返回 (N_leaves, M)"""
    tree = truth[0] if isinstance(truth, tuple) else truth
    node = parse_tree(tree)
    e = math.exp(-params.mu * params.branch_length)
    p_same = 0.25 + 0.75 * e
    out = np.zeros((params.n_leaves, M), dtype=np.int64)

    def descend(n, parent_states):
        keep = rng.random(M) < p_same
        # 不保持时在另外三个碱基里均匀选
        shifted = (parent_states + rng.integers(1, 4, size=M)) % 4
        states = np.where(keep, parent_states, shifted)
        if isinstance(n, int):
            out[n] = states
        else:
            descend(n[0], states)
            descend(n[1], states)

    root = rng.integers(0, 4, size=M)
    if isinstance(node, int):
        out[node] = root
    else:
        descend(node[0], root)
        descend(node[1], root)
    return out


def split_sites(data: np.ndarray, N: int, params: PhyloParams, rng=None) -> list:
    """
    把列切成 N 份，每份对应一个客户端的 PhyloEnv（先验指数 1/N）。
    默认连续切分；给了 rng 就随机打乱列再切。
    """
    data = np.asarray(data)
    M = data.shape[1]
    if N < 1 or M < N:
        raise ShardError(f"cannot split {M} sites across {N} clients")
    cols = np.arange(M)
    if rng is not None:
        cols = rng.permutation(M)
    shard_params = PhyloParams(
        n_leaves=params.n_leaves,
        branch_length=params.branch_length,
        mu=params.mu,
        gamma=params.gamma,
        n_clients=N,
    )
    return [PhyloEnv(shard_params, data[:, np.sort(chunk)]) for chunk in np.array_split(cols, N)]


def save_sites(path, data: np.ndarray):
    """ACGT 文本矩阵，一行一个叶子"""
    lines = ["".join(NUCLEOTIDES[v] for v in row) for row in np.asarray(data)]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_sites(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip().upper()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([NUCLEOTIDES.index(ch) for ch in line])
            except ValueError:
                raise ConfigError("env.phylo.sites_file", f"non-ACGT character in {path}")
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError("env.phylo.sites_file", f"ragged or empty site matrix in {path}")
    return np.array(rows, dtype=np.int64)


# ------------------- 枚举 -------------------


@dataclass
class StateGraph:
    """按拓扑层排好的全部状态，非停止边用下标数组存"""

    states: list
    index: dict
    terminal: np.ndarray
    layer: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_action: np.ndarray

    @property
    def terminals(self) -> list:
        return [s for s, t in zip(self.states, self.terminal) if t]

    def __len__(self):
        return len(self.states)


_GRAPH_CACHE = {}


def enumerate_states(env: Env, guard: int = DEFAULT_GUARD) -> StateGraph:
    """
    从 s0 开始一层一层展开。所有环境的每个动作都让“步数”加一，
    所以按层的顺序就是拓扑序。
    """
    est = env.estimated_state_count()
    if est > guard:
        raise GuardExceeded(f"{env.kind}: ~{est} states exceeds enumeration guard {guard}")
    key = env.fingerprint()
    cached = _GRAPH_CACHE.get(key)
    if cached is not None:
        return cached

    index = {env.initial_state: 0}
    states = [env.initial_state]
    layers = [0]
    src, dst, act = [], [], []
    frontier = [env.initial_state]
    depth = 0
    while frontier:
        depth += 1
        nxt = []
        for s in frontier:
            i = index[s]
            for a in env.legal_actions(s):
                if a == env.stop_action:
                    continue
                child = env.step(s, a)
                j = index.get(child)
                if j is None:
                    j = len(states)
                    index[child] = j
                    states.append(child)
                    layers.append(depth)
                    nxt.append(child)
                src.append(i)
                dst.append(j)
                act.append(a)
        frontier = nxt

    graph = StateGraph(
        states=states,
        index=index,
        terminal=np.array([env.is_terminal(s) for s in states], dtype=bool),
        layer=np.array(layers, dtype=np.int64),
        edge_src=np.array(src, dtype=np.int64),
        edge_dst=np.array(dst, dtype=np.int64),
        edge_action=np.array(act, dtype=np.int64),
    )
    logger.debug("enumerated %d states (%d terminal) for %s", len(states), graph.terminal.sum(), key)
    _GRAPH_CACHE[key] = graph
    return graph


def to_networkx(graph: StateGraph) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(range(len(graph.states)))
    g.add_edges_from(zip(graph.edge_src.tolist(), graph.edge_dst.tolist()))
    return g


def all_topologies(n_leaves: int) -> list:
    """逐个把叶子 k 插到已有树的每条边上（包括根上方），得到全部 (2n-3)!! 棵树"""

    def insert(node, leaf):
        yield (node, leaf)
        if not isinstance(node, int):
            left, right = node
            for t in insert(left, leaf):
                yield (t, right)
            for t in insert(right, leaf):
                yield (left, t)

    trees = [(0, 1)]
    for k in range(2, n_leaves):
        trees = [t for tree in trees for t in insert(tree, k)]
    return [canonical_forest([t]) for t in trees]


def enumerate_terminals(env: Env, guard: int = DEFAULT_GUARD) -> list:
    """全部终止态；phylo 的状态图太大时直接枚举拓扑"""
    try:
        return enumerate_states(env, guard).terminals
    except GuardExceeded:
        if env.kind != "phylo" or num_topologies(env.n_leaves) > guard:
            raise
    return all_topologies(env.n_leaves)
