"""
表单结构解析器 - 网络层

带参数的基本构件：线性层、MLP、层归一化、嵌入、多头注意力、前馈层与 Transformer 层。
参数存放在 ParamStore 中，层对象只保存名称前缀与形状；前向时从参数表读取参数。
"""

import math
from abc import ABC, abstractmethod
from typing import List, Optional

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor


class Block(ABC):
    """参数化构件接口"""

    def __init__(self, prefix: str):
        self.prefix = prefix

    def name(self, leaf: str) -> str:
        return f"{self.prefix}.{leaf}"

    @abstractmethod
    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        """在参数表中注册本构件的参数"""
        pass


class Linear(Block):
    def __init__(self, prefix: str, d_in: int, d_out: int, bias: bool = True):
        super().__init__(prefix)
        self.d_in = d_in
        self.d_out = d_out
        self.bias = bias

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(self.name("w"), ag.glorot(rng, self.d_in, self.d_out))
        if self.bias:
            store.add(self.name("b"), np.zeros(self.d_out))

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        out = ag.matmul(x, store[self.name("w")])
        if self.bias:
            out = ag.add(out, store[self.name("b")])
        return out


class MLP(Block):
    """两层感知机: Linear -> relu -> Linear"""

    def __init__(self, prefix: str, d_in: int, d_hidden: int, d_out: int):
        super().__init__(prefix)
        self.fc1 = Linear(self.name("fc1"), d_in, d_hidden)
        self.fc2 = Linear(self.name("fc2"), d_hidden, d_out)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.fc1.init_params(store, rng)
        self.fc2.init_params(store, rng)

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        return self.fc2(store, ag.relu(self.fc1(store, x)))


class LayerNorm(Block):
    def __init__(self, prefix: str, d: int, eps: float = 1e-5):
        super().__init__(prefix)
        self.d = d
        self.eps = eps

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(self.name("gamma"), np.ones(self.d))
        store.add(self.name("beta"), np.zeros(self.d))

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        return ag.layer_norm(x, store[self.name("gamma")], store[self.name("beta")], self.eps)


class Embedding(Block):
    def __init__(self, prefix: str, n: int, d: int):
        super().__init__(prefix)
        self.n = n
        self.d = d

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(self.name("table"), rng.normal(0.0, 1.0 / math.sqrt(self.d), size=(self.n, self.d)))

    def __call__(self, store: ParamStore, indices) -> Tensor:
        return ag.embedding_lookup(store[self.name("table")], indices)


class MultiHeadAttention(Block):
    """
    多头注意力

    mask[i, j] 为 True 表示查询 i 可以关注键 j；每一行至少要有一个 True。
    """

    def __init__(self, prefix: str, d_model: int, n_heads: int):
        super().__init__(prefix)
        if d_model % n_heads != 0:
            raise ag.ShapeError("attention", (d_model,), (n_heads,), detail="d_model % n_heads != 0")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q = Linear(self.name("q"), d_model, d_model)
        self.k = Linear(self.name("k"), d_model, d_model)
        self.v = Linear(self.name("v"), d_model, d_model)
        self.o = Linear(self.name("o"), d_model, d_model)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for proj in (self.q, self.k, self.v, self.o):
            proj.init_params(store, rng)

    def __call__(
        self, store: ParamStore, query: Tensor, context: Tensor, mask: Optional[np.ndarray] = None
    ) -> Tensor:
        q = self.q(store, query)
        k = self.k(store, context)
        v = self.v(store, context)
        d_head = self.d_model // self.n_heads
        heads: List[Tensor] = []
        for h in range(self.n_heads):
            lo, hi = h * d_head, (h + 1) * d_head
            heads.append(
                ag.masked_attention(
                    ag.slice_cols(q, lo, hi), ag.slice_cols(k, lo, hi), ag.slice_cols(v, lo, hi), mask
                )
            )
        merged = heads[0] if len(heads) == 1 else ag.concat(heads)
        return self.o(store, merged)


class FeedForward(Block):
    def __init__(self, prefix: str, d_model: int, d_ffn: int):
        super().__init__(prefix)
        self.mlp = MLP(prefix, d_model, d_ffn, d_model)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.mlp.init_params(store, rng)

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        return self.mlp(store, x)


class TransformerLayer(Block):
    """
    Pre-norm Transformer 层

    自注意力 -> （可选）交叉注意力 -> 前馈，均带残差连接。
    """

    def __init__(self, prefix: str, d_model: int, n_heads: int, d_ffn: int, cross: bool = False):
        super().__init__(prefix)
        self.norm_self = LayerNorm(self.name("ln_self"), d_model)
        self.self_attn = MultiHeadAttention(self.name("self_attn"), d_model, n_heads)
        self.cross = cross
        if cross:
            self.norm_cross = LayerNorm(self.name("ln_cross"), d_model)
            self.cross_attn = MultiHeadAttention(self.name("cross_attn"), d_model, n_heads)
        self.norm_ffn = LayerNorm(self.name("ln_ffn"), d_model)
        self.ffn = FeedForward(self.name("ffn"), d_model, d_ffn)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.norm_self.init_params(store, rng)
        self.self_attn.init_params(store, rng)
        if self.cross:
            self.norm_cross.init_params(store, rng)
            self.cross_attn.init_params(store, rng)
        self.norm_ffn.init_params(store, rng)
        self.ffn.init_params(store, rng)

    def __call__(
        self,
        store: ParamStore,
        x: Tensor,
        self_mask: Optional[np.ndarray] = None,
        memory: Optional[Tensor] = None,
        cross_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        h = self.norm_self(store, x)
        x = ag.add(x, self.self_attn(store, h, h, self_mask))
        if self.cross:
            if memory is None:
                raise ag.ShapeError("transformer_layer", x.shape, detail="cross attention needs memory")
            h = self.norm_cross(store, x)
            x = ag.add(x, self.cross_attn(store, h, memory, cross_mask))
        return ag.add(x, self.ffn(store, self.norm_ffn(store, x)))
