"""
表单结构解析器 - 自动微分核心

基于 numpy 的稠密张量、反向模式自动微分 (Tape) 与 Adam 优化器。
仅在 Tape 激活且至少有一个输入被跟踪时记录运算；推理无需 Tape。
"""

import math
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import AdamConfig
from .models import FormParserError


class ShapeError(FormParserError):
    """张量形状不匹配"""

    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = ""):
        text = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        super().__init__(f"{text} ({detail})" if detail else text)
        self.op = op
        self.shapes = shapes


class NonFiniteError(FormParserError):
    """梯度或损失出现非有限值"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


# ============== 数值精度 ==============

_DTYPE: List[type] = [np.float32]


def get_default_dtype() -> np.dtype:
    return np.dtype(_DTYPE[0])


def set_default_dtype(dtype: Union[str, type, np.dtype]) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}")
    _DTYPE[0] = dt.type


@contextmanager
def precision(dtype: Union[str, type, np.dtype]) -> Iterator[None]:
    """临时切换默认精度（梯度检查使用 float64）"""
    old = _DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE[0] = old


# ============== 张量与 Tape ==============

class Tensor:
    """不可变的稠密张量；name 非空表示可学习参数"""

    __slots__ = ("data", "name", "tracked")

    def __init__(self, data, name: Optional[str] = None, tracked: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.name = name
        self.tracked = tracked

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tape:
    """
    运算记录带

    一次训练步使用一条 Tape；不同 Tape 互相独立，可在不同线程中并行使用。
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor, params: Optional["ParamStore"] = None) -> Dict[str, np.ndarray]:
        """
        反向传播

        Args:
            loss: 标量损失
            params: 参数表；给出时不可达参数得到全零梯度

        Returns:
            参数名 -> 梯度
        """
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.tracked:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if t.name is not None:
                    leaves[key] = t
        if params is not None:
            return {
                name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
            }
        return {t.name: grads[key] for key, t in leaves.items() if key in grads}


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ============== 基本运算 ==============

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m)"""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expects a matrix")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    out = Tensor(data)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """沿最后一维拼接"""
    tensors = [as_tensor(t) for t in tensors]
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1 or axis not in (-1, tensors[0].ndim - 1):
        raise ShapeError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[-1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _record(out, tensors, backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """取最后一维的 [start, stop) 区间"""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError("slice_cols", a.shape, detail=f"columns {start}:{stop}")
    out = Tensor(a.data[..., start:stop])

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (a,), backward)


def embedding_lookup(table: Tensor, indices: Sequence[int]) -> Tensor:
    """按行索引取出嵌入（也用于按单元索引收集行）"""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ShapeError("embedding_lookup", table.shape, idx.shape, detail="index out of range")
    out = Tensor(table.data[idx])

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (table,), backward)


take_rows = embedding_lookup


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def pairwise_add(a: Tensor, b: Tensor) -> Tensor:
    """out[i, j] = a[i] + b[j]，输出形状 (n, m, h)"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("pairwise_add", a.shape, b.shape)
    out = Tensor(a.data[:, None, :] + b.data[None, :, :])
    return _record(out, (a, b), lambda g: (g.sum(axis=1), g.sum(axis=0)))


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    最后一维 softmax

    Args:
        mask: 可广播到 x 的布尔数组，True 表示允许；每一行至少要有一个 True
    """
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax", x.shape, detail="a row is fully masked")
        data = np.where(mask, data, -np.inf)
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """最后一维的层归一化"""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, target: Sequence[int], reduction: str = "mean") -> Tensor:
    """
    softmax 交叉熵

    Args:
        logits: (M, C)
        target: 长度 M 的类别索引
        reduction: mean / sum / none
    """
    t = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy", logits.shape, t.shape, detail="target out of range")
    m = logits.shape[0]
    if m == 0 and reduction == "mean":
        raise ShapeError("cross_entropy", logits.shape, detail="mean over zero rows")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(m)
    losses = -logp[rows, t]
    if reduction == "none":
        out = Tensor(losses)
    elif reduction == "sum":
        out = Tensor(np.asarray(losses.sum()))
    else:
        out = Tensor(np.asarray(losses.mean()))

    def backward(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        if reduction == "none":
            return (grad * g[:, None],)
        if reduction == "mean":
            return (grad * (g / m),)
        return (grad * g,)

    return _record(out, (logits,), backward)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """缩放点积注意力；mask[i, j] 为 True 表示查询 i 可以关注键 j"""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError("masked_attention", q.shape, k.shape, v.shape)
    if mask is not None and np.shape(mask) != (q.shape[0], k.shape[0]):
        raise ShapeError("masked_attention", q.shape, k.shape, np.shape(mask), detail="mask shape")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax(scores, mask), v)


# ============== 参数表 ==============

class ParamStore:
    """
    可学习参数表及 Adam 一阶/二阶矩

    参数名唯一；矩与参数同形。adam_step 返回新的参数表，旧表不被修改。
    """

    def __init__(
        self,
        params: Optional[Dict[str, Tensor]] = None,
        m: Optional[Dict[str, np.ndarray]] = None,
        v: Optional[Dict[str, np.ndarray]] = None,
        step: int = 0,
    ):
        self._params: Dict[str, Tensor] = dict(params or {})
        self._m: Dict[str, np.ndarray] = dict(m or {})
        self._v: Dict[str, np.ndarray] = dict(v or {})
        self.step = step

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already registered")
        data = np.asarray(array, dtype=get_default_dtype())
        tensor = Tensor(data, name=name, tracked=True)
        self._params[name] = tensor
        self._m[name] = np.zeros_like(data)
        self._v[name] = np.zeros_like(data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def moments(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    @property
    def dtype(self) -> np.dtype:
        first = next(iter(self._params.values()), None)
        return first.data.dtype if first is not None else get_default_dtype()

    def n_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))

    def replace(self, name: str, array: np.ndarray) -> "ParamStore":
        """返回替换了一个参数值的新参数表"""
        params = dict(self._params)
        params[name] = Tensor(np.asarray(array, dtype=self._params[name].data.dtype), name=name, tracked=True)
        return ParamStore(params, self._m, self._v, self.step)

    def astype(self, dtype) -> "ParamStore":
        dt = np.dtype(dtype)
        params = {n: Tensor(p.data.astype(dt), name=n, tracked=True) for n, p in self._params.items()}
        m = {n: a.astype(dt) for n, a in self._m.items()}
        v = {n: a.astype(dt) for n, a in self._v.items()}
        return ParamStore(params, m, v, self.step)

    def state(self) -> Dict[str, np.ndarray]:
        """平铺为命名数组（用于检查点）"""
        out: Dict[str, np.ndarray] = {n: p.data for n, p in self._params.items()}
        for n in self._params:
            out[f"adam.m.{n}"] = self._m[n]
            out[f"adam.v.{n}"] = self._v[n]
        out["adam.step"] = np.asarray([self.step], dtype=np.int64)
        return out

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "ParamStore":
        names = [n for n in state if not n.startswith("adam.")]
        params = {n: Tensor(state[n], name=n, tracked=True) for n in names}
        m = {n: state.get(f"adam.m.{n}", np.zeros_like(state[n])) for n in names}
        v = {n: state.get(f"adam.v.{n}", np.zeros_like(state[n])) for n in names}
        step = int(state["adam.step"][0]) if "adam.step" in state else 0
        return cls(params, m, v, step)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ============== 优化器 ==============

def adam_step(
    store: ParamStore,
    grads: Dict[str, np.ndarray],
    hyper: AdamConfig,
    lr: Optional[float] = None,
) -> ParamStore:
    """
    带偏差修正与解耦权重衰减的 Adam 更新

    Args:
        store: 当前参数表
        grads: 参数名 -> 梯度；缺失的参数视为零梯度
        hyper: Adam 超参数
        lr: 覆盖 hyper.lr（用于学习率预热）

    Raises:
        NonFiniteError: 梯度含 NaN/Inf，附带步数
        ShapeError: 梯度与参数不同形
    """
    rate = hyper.lr if lr is None else lr
    t = store.step + 1
    params: Dict[str, Tensor] = {}
    m_new: Dict[str, np.ndarray] = {}
    v_new: Dict[str, np.ndarray] = {}
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{name}' at step {t}", step=t)
        m_prev, v_prev = store.moments(name)
        m = hyper.beta1 * m_prev + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v_prev + (1.0 - hyper.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps) + hyper.weight_decay * p.data
        params[name] = Tensor((p.data - rate * update).astype(p.data.dtype), name=name, tracked=True)
        m_new[name] = m.astype(p.data.dtype)
        v_new[name] = v.astype(p.data.dtype)
    return ParamStore(params, m_new, v_new, t)


# ============== 梯度检查 ==============

def finite_difference_check(
    fn: Callable[[ParamStore], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    names: Optional[Sequence[str]] = None,
    max_entries: int = 24,
    seed: int = 0,
    retry_above: float = 1e-5,
) -> float:
    """
    中心差分梯度检查（应在 float64 精度下运行）

    误差超过 retry_above 的条目以 eps / 100 重测一次并取较小误差：
    差分区间跨过 ReLU 拐点时，大步长的数值梯度不可信。

    Returns:
        抽样条目上的最大相对误差 |a - n| / max(|a| + |n|, 1e-4)
    """
    with Tape() as tape:
        loss = fn(store)
    analytic = tape.backward(loss, store)
    rng = np.random.default_rng(seed)

    def central(name: str, idx: Tuple[int, ...], step: float) -> float:
        base = store[name].data
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        f_plus = fn(store.replace(name, plus)).item()
        f_minus = fn(store.replace(name, minus)).item()
        return (f_plus - f_minus) / (2 * step)

    def rel_err(a: float, numeric: float) -> float:
        return abs(a - numeric) / max(abs(a) + abs(numeric), 1e-4)

    worst = 0.0
    for name in names or store.names():
        shape = store[name].shape
        flat_count = store[name].data.size
        picks = rng.choice(flat_count, size=min(max_entries, flat_count), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, shape)
            a = float(analytic[name][idx])
            err = rel_err(a, central(name, idx, eps))
            if err > retry_above:
                err = min(err, rel_err(a, central(name, idx, eps * 1e-2)))
            worst = max(worst, err)
    return worst
