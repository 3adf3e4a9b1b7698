# scripts/nn.py
"""
最小的全连接网络：扁平参数向量、前向、反向、AdamW。
全部用 float64，方便和有限差分 / 手算结果逐位对比。

参数布局（ParamVector）：逐层存放，先权重 W (fan_in x fan_out, 行优先) 再偏置 b。
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import NumericError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    negative_slope: float = 0.01

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 3:
            raise ValueError(f"MLP needs at least one hidden layer, got widths {widths}")
        if min(widths) < 1:
            raise ValueError(f"all widths must be >= 1, got {widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def layers(self):
        """逐层返回 (W 的切片, W 的形状, b 的切片)"""
        out = []
        off = 0
        for i, o in zip(self.widths[:-1], self.widths[1:]):
            w = slice(off, off + i * o)
            off += i * o
            b = slice(off, off + o)
            off += o
            out.append((w, (i, o), b))
        return out


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot 均匀初始化，偏置为 0"""
    params = np.zeros(spec.n_params)
    for w, (i, o), _ in spec.layers():
        limit = np.sqrt(6.0 / (i + o))
        params[w] = rng.uniform(-limit, limit, size=i * o)
    return params


def _check(spec: MlpSpec, params: np.ndarray):
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """
    x: (d,) 或 (R, d)。最后一层是线性的（输出 logits）。
    返回 (输出, cache)，cache 给 mlp_backward 用。
    """
    _check(spec, params)
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {h.shape[1]} != {spec.widths[0]}")
    cache = []
    layers = spec.layers()
    for k, (w, shape, b) in enumerate(layers):
        z = h @ params[w].reshape(shape) + params[b]
        cache.append((h, z))
        if k < len(layers) - 1:
            h = np.where(z > 0, z, spec.negative_slope * z)
        else:
            h = z
    return (h[0] if squeeze else h), (squeeze, cache)


def mlp_backward(spec: MlpSpec, params: np.ndarray, cache, dout: np.ndarray):
    """反向累积梯度，返回 (参数梯度, 输入梯度)"""
    _check(spec, params)
    squeeze, acts = cache
    layers = spec.layers()
    if len(acts) != len(layers):
        raise ValueError("stale cache: layer count does not match spec")
    g = np.atleast_2d(np.asarray(dout, dtype=float))
    if g.shape != acts[-1][1].shape:
        raise ValueError(f"output gradient shape {g.shape} != {acts[-1][1].shape}")
    grad = np.zeros_like(params)
    for k in range(len(layers) - 1, -1, -1):
        w, shape, b = layers[k]
        h, z = acts[k]
        if k < len(layers) - 1:
            g = g * np.where(z > 0, 1.0, spec.negative_slope)
        grad[w] = (h.T @ g).ravel()
        grad[b] = g.sum(axis=0)
        g = g @ params[w].reshape(shape).T
    return grad, (g[0] if squeeze else g)


# ------------------- AdamW -------------------


@dataclass
class ParamGroup:
    """一段连续参数；lr=None 表示用全局 lr，decay=False 表示不做权重衰减"""

    name: str
    size: int
    lr: float = None
    decay: bool = True


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    max_grad_norm: float = None
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0
    # 逐元素的 lr / 衰减开关，由参数组展开得到
    lr_vector: np.ndarray = None
    decay_mask: np.ndarray = None
    groups: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def make_adamw(groups, lr: float, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, max_grad_norm=None) -> AdamWState:
    size = sum(g.size for g in groups)
    lr_vec = np.concatenate([np.full(g.size, lr if g.lr is None else g.lr) for g in groups]) if groups else np.zeros(0)
    decay = np.concatenate([np.full(g.size, g.decay) for g in groups]) if groups else np.zeros(0, dtype=bool)
    return AdamWState(
        lr=lr,
        beta1=betas[0],
        beta2=betas[1],
        eps=eps,
        weight_decay=weight_decay,
        max_grad_norm=max_grad_norm,
        m=np.zeros(size),
        v=np.zeros(size),
        lr_vector=lr_vec,
        decay_mask=decay.astype(bool),
        groups=list(groups),
    )


def adamw_step(state: AdamWState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """偏差修正的 Adam 矩估计 + 解耦权重衰减；原地更新 state，返回新参数"""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ValueError(f"param/grad shape mismatch {params.shape} vs {grad.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ValueError("optimizer state does not match parameter vector")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient, step rejected")

    if state.max_grad_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > state.max_grad_norm:
            grad = grad * (state.max_grad_norm / norm)

    lr = state.lr if state.lr_vector is None else state.lr_vector
    decay = state.weight_decay if state.decay_mask is None else state.weight_decay * state.decay_mask

    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)

    new = params * (1.0 - lr * decay)
    return new - lr * m_hat / (np.sqrt(v_hat) + state.eps)
