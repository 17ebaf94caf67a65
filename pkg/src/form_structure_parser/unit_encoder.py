"""
表单结构解析器 - 单元编码器

每个基本单元的多模态嵌入（二维位置、文本、类型）以及增强嵌入的自注意力编码器。
编码器不使用序列位置编码，布局信息只来自二维位置特征。
"""

import zlib
from typing import List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor
from .config import EncoderConfig
from .layers import MLP, Embedding, LayerNorm, Linear, TransformerLayer
from .models import Document, UnitKind

N_GEOMETRY = 6
UNIT_KINDS = list(UnitKind)


def geometry_features(doc: Document) -> np.ndarray:
    """每个单元的 [x1, y1, x2, y2, w, h]"""
    rows = [
        [u.bbox.x1, u.bbox.y1, u.bbox.x2, u.bbox.y2, u.bbox.width, u.bbox.height]
        for u in doc.units
    ]
    return np.asarray(rows, dtype=ag.get_default_dtype()).reshape(doc.n_units, N_GEOMETRY)


def fourier_features(geometry: np.ndarray, n_freqs: int) -> np.ndarray:
    """
    原始坐标后接 sin(2^k πg)、cos(2^k πg)，k = 0..n_freqs-1

    最高频的周期为 2^(2-n_freqs)，n_freqs=8 时约 0.016，与一行的高度相当。
    """
    if n_freqs <= 0:
        return geometry
    scales = np.pi * 2.0 ** np.arange(n_freqs)
    angles = (geometry[:, :, None] * scales).reshape(geometry.shape[0], -1)
    return np.concatenate([geometry, np.sin(angles), np.cos(angles)], axis=1).astype(geometry.dtype)


def hash_tokens(text: str, vocab_size: int) -> List[int]:
    """小写、按空白切分后散列到 [0, vocab_size)"""
    return [zlib.crc32(tok.encode("utf-8")) % vocab_size for tok in text.lower().split()]


def token_averaging(doc: Document, vocab_size: int) -> Tuple[List[int], np.ndarray, np.ndarray]:
    """
    文本平均所需的索引

    Returns:
        (全部 token id, N×T 平均矩阵, N×1 空文本指示)
    """
    ids: List[int] = []
    spans = []
    for unit in doc.units:
        toks = hash_tokens(unit.text, vocab_size)
        spans.append((len(ids), len(toks)))
        ids.extend(toks)
    dtype = ag.get_default_dtype()
    avg = np.zeros((doc.n_units, len(ids)), dtype=dtype)
    empty = np.zeros((doc.n_units, 1), dtype=dtype)
    for row, (start, count) in enumerate(spans):
        if count:
            avg[row, start:start + count] = 1.0 / count
        else:
            empty[row, 0] = 1.0
    return ids, avg, empty


class UnitEncoder:
    """
    单元编码器

    embed_units 拼接位置 MLP、平均 token 嵌入与类型嵌入后投影到 d_model；
    encode 为 n_layers 层 pre-norm 自注意力 + 前馈，最后接层归一化。
    """

    def __init__(
        self,
        cfg: EncoderConfig,
        use_text: bool = True,
        use_geometry: bool = True,
        use_encoder: bool = True,
        prefix: str = "enc",
    ):
        self.cfg = cfg
        self.use_text = use_text
        self.use_geometry = use_geometry
        self.use_encoder = use_encoder
        d_geom = N_GEOMETRY * (1 + 2 * cfg.geom_freqs)
        self.geometry = MLP(f"{prefix}.geom", d_geom, cfg.d_pos, cfg.d_pos)
        self.tokens = Embedding(f"{prefix}.tok", cfg.vocab_size, cfg.d_text)
        self.null_text = f"{prefix}.tok.null"
        self.kinds = Embedding(f"{prefix}.kind", len(UNIT_KINDS), cfg.d_kind)
        d_in = cfg.d_kind + (cfg.d_pos if use_geometry else 0) + (cfg.d_text if use_text else 0)
        self.project = Linear(f"{prefix}.proj", d_in, cfg.d_model)
        self.layers = [
            TransformerLayer(f"{prefix}.layer{i}", cfg.d_model, cfg.n_heads, cfg.d_ffn)
            for i in range(cfg.n_layers if use_encoder else 0)
        ]
        self.norm = LayerNorm(f"{prefix}.norm", cfg.d_model)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        if self.use_geometry:
            self.geometry.init_params(store, rng)
        if self.use_text:
            self.tokens.init_params(store, rng)
            store.add(self.null_text, rng.normal(0.0, 1.0 / np.sqrt(self.cfg.d_text), size=(1, self.cfg.d_text)))
        self.kinds.init_params(store, rng)
        self.project.init_params(store, rng)
        for layer in self.layers:
            layer.init_params(store, rng)
        if self.layers:
            self.norm.init_params(store, rng)

    def embed_units(self, store: ParamStore, doc: Document) -> Tensor:
        """N×d_model 的单元嵌入"""
        parts: List[Tensor] = []
        if self.use_geometry:
            geom = fourier_features(geometry_features(doc), self.cfg.geom_freqs)
            parts.append(self.geometry(store, ag.as_tensor(geom)))
        if self.use_text:
            parts.append(self._text_embedding(store, doc))
        parts.append(self.kinds(store, [UNIT_KINDS.index(u.kind) for u in doc.units]))
        return self.project(store, ag.concat(parts))

    def _text_embedding(self, store: ParamStore, doc: Document) -> Tensor:
        ids, avg, empty = token_averaging(doc, self.cfg.vocab_size)
        null = ag.mul(ag.as_tensor(empty), store[self.null_text])
        if not ids:
            return null
        mean_tokens = ag.matmul(ag.as_tensor(avg), self.tokens(store, ids))
        return ag.add(mean_tokens, null)

    def encode(self, store: ParamStore, embeddings: Tensor) -> Tensor:
        """自注意力增强；输入输出均为 N×d_model"""
        if embeddings.ndim != 2 or embeddings.shape[1] != self.cfg.d_model:
            raise ag.ShapeError("encode", embeddings.shape, (embeddings.shape[0], self.cfg.d_model))
        x = embeddings
        for layer in self.layers:
            x = layer(store, x)
        return self.norm(store, x) if self.layers else x

    def __call__(self, store: ParamStore, doc: Document) -> Tensor:
        return self.encode(store, self.embed_units(store, doc))
