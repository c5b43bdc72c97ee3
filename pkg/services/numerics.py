"""
稠密张量运算、反向模式自动微分与 Adam 优化器。

职责定位：
1. `Tensor`：float64 只读数组 + `requires_grad` 标记，创建时检查有限性。
2. `Tape`：按执行顺序记录原语运算，天然满足拓扑序；`backward()` 逆序回放求梯度。
3. `AdamState` / `adam_step()`：带偏差修正的 Adam，用于训练 VAE 与两个 DDPM。

调用关系：
- 上游：`layers.py`（网络积木）、`vae.py`、`diffusion.py`
- 下游：numpy / scipy.special

使用方式：
    with Tape() as tape:
        loss = model.loss(...)
    grads = backward(tape, loss)

排查建议：
- 报 NonFiniteError：通常是学习率过大或 log 输入非正，先看最近一次前向的输入范围。
- 梯度全 0：确认前向是否在 `with Tape()` 内执行，参数是否 `requires_grad=True`。
"""
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, RefineError, ShapeMismatchError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tensor:
    """不可变的 float64 张量。

    数据在创建后被标记为只读；所有运算都产生新张量。
    `requires_grad=True` 的叶子张量会出现在 `backward()` 的结果里。
    """

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        self._set(arr, requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        obj = cls.__new__(cls)
        obj._set(np.asarray(arr, dtype=np.float64), requires_grad)
        return obj

    def _set(self, arr: np.ndarray, requires_grad: bool):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"张量包含非有限值，shape={arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"只有单元素张量可以转换为标量，当前 shape={self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # 运算符只是原语函数的语法糖
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("张量之间不支持除法，请改用 mul/exp/log 组合")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: ArrayLike) -> Tensor:
    """把常量包装成不需要梯度的张量，已是张量则原样返回。"""
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: VJP


class Tape:
    """原语运算记录带。

    通过 `with Tape() as tape:` 激活；激活期间，凡是输入里有 `requires_grad`
    张量的原语都会被追加到 `records`。单写者，使用一次后即被 `backward()` 消费。
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP):
        if self.consumed:
            raise RefineError("Tape 已被 backward 消费，不能继续记录")
        self.records.append(_Record(output, inputs, vjp))


class Gradients:
    """`backward()` 的结果：按张量身份索引的梯度表。

    查询不可达张量时返回同形状的全 0 数组，而不是报错。
    """

    def __init__(self, entries: Dict[int, Tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._entries.get(id(tensor))
        if entry is None or entry[0] is not tensor:
            return np.zeros(tensor.shape)
        return entry[1]

    def __contains__(self, tensor: Tensor) -> bool:
        entry = self._entries.get(id(tensor))
        return entry is not None and entry[0] is tensor

    def __len__(self):
        return len(self._entries)

    def tensors(self) -> List[Tensor]:
        return [t for t, _ in self._entries.values()]


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """逆序回放 tape，返回 dLoss/dInput。

    - loss 必须是单元素张量；
    - 同一张量经多条路径使用时梯度相加；
    - tape 被标记为已消费，记录被清空。
    """
    if tape.consumed:
        raise RefineError("Tape 已被消费，不能重复 backward")
    if loss.size != 1:
        raise ShapeMismatchError(f"loss 必须是标量，当前 shape={loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    produced = {id(rec.output) for rec in tape.records}
    leaves: Dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    for rec in reversed(tape.records):
        for inp in rec.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves.setdefault(id(inp), inp)
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, ig in zip(rec.inputs, rec.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig

    tape.consumed = True
    tape.records.clear()

    entries = {}
    for key, tensor in leaves.items():
        g = grads.get(key)
        entries[key] = (tensor, np.zeros(tensor.shape) if g is None else np.asarray(g).reshape(tensor.shape))
    return Gradients(entries)


def _emit(out: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        tape.record(result, inputs, vjp)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ========== 逐元素二元运算 ==========

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """批量矩阵乘，两侧至少二维，批维按 numpy 规则广播。"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul 形状不匹配: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), vjp)


# ========== 形状运算 ==========

def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeMismatchError(f"无法把 {a.shape} 广播到 {shape}") from e
    return _emit(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeMismatchError("concat 至少需要一个张量")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat 形状不匹配: {[p.shape for p in parts]}") from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


# ========== 归约 ==========

def sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _emit(np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_pool(a: ArrayLike, axis: int = -2) -> Tensor:
    """沿点维取最大值（对称池化），梯度只回传给首个最大元素。"""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _emit(out, (a,), vjp)


# ========== 逐元素一元运算 ==========

def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _emit(y, (a,), lambda g: (g / a.data,))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


# ========== 索引 ==========

def gather(a: ArrayLike, index: np.ndarray, axis: int = 0) -> Tensor:
    """按整数索引取行（或指定轴），反向为 scatter-add。"""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim

    def vjp(g):
        grad = np.zeros(a.shape)
        np.add.at(np.moveaxis(grad, axis, 0), index, np.moveaxis(g, axis, 0))
        return (grad,)

    return _emit(np.take(a.data, index, axis=axis), (a,), vjp)


def scatter_add(a: ArrayLike, index: np.ndarray, size: int, axis: int = 0) -> Tensor:
    """把 a 的各切片累加到长度为 size 的输出轴上，反向为 gather。"""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    shape = list(a.shape)
    shape[axis] = int(size)
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(a.data, axis, 0))
    return _emit(out, (a,), lambda g: (np.take(g, index, axis=axis),))


# ========== 优化器 ==========

@dataclass
class AdamState:
    """Adam 一阶/二阶矩累加器与超参数。"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[Union[Tensor, np.ndarray]],
              state: AdamState) -> List[Tensor]:
    """执行一步带偏差修正的 Adam，返回新的参数张量，并把 state 推进一步。"""
    if len(params) != len(grads):
        raise ShapeMismatchError(f"参数数量 {len(params)} 与梯度数量 {len(grads)} 不一致")
    grad_arrays = [g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64) for g in grads]
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatchError("AdamState 累加器数量与参数数量不一致")
    for p, g, m in zip(params, grad_arrays, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatchError(f"Adam 形状不一致: param={p.shape} grad={g.shape} state={m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"梯度包含非有限值，shape={g.shape}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grad_arrays)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        updated.append(Tensor._wrap(p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps),
                                    requires_grad=True))
    return updated


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5,
                      indices: Optional[Iterable[Tuple[int, ...]]] = None) -> np.ndarray:
    """中心差分数值梯度，用于校验解析梯度。

    indices 为空时遍历全部元素；否则只计算给定位置，其余为 0。
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    positions = np.ndindex(x.shape) if indices is None else indices
    for pos in positions:
        orig = x[pos]
        x[pos] = orig + step
        up = fn(x.copy())
        x[pos] = orig - step
        down = fn(x.copy())
        x[pos] = orig
        grad[pos] = (up - down) / (2.0 * step)
    return grad
