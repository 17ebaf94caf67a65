"""
表单结构解析器 - 关系解码器

在树注意力掩码与树层级嵌入的约束下，用候选间自注意力和候选到单元的交叉注意力
细化 NK 个关系候选，并给出最终父节点与关系类型。
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .arbor import UnitForest
from .autograd import ParamStore, Tensor
from .config import DecoderConfig
from .layers import MLP, Embedding, LayerNorm, Linear, TransformerLayer
from .proposer import RelationProposal, proposal_arrays


# ============== 层级与掩码 ==============

@dataclass(frozen=True)
class TreeLevels:
    """单元与候选的树层级；跨树候选使用保留层级 max_level + 1"""
    unit_level: np.ndarray
    proposal_level: np.ndarray
    max_level: int

    @property
    def cross_tree_level(self) -> int:
        return self.max_level + 1

    @property
    def n_levels(self) -> int:
        return self.max_level + 2

    def to_dict(self) -> dict:
        return {
            "unit_level": self.unit_level.tolist(),
            "proposal_level": self.proposal_level.tolist(),
            "max_level": self.max_level,
        }


@dataclass(frozen=True)
class TreeMasks:
    """self_mask: 候选 -> 候选；cross_mask: 候选 -> 单元；True 表示允许关注"""
    self_mask: np.ndarray
    cross_mask: np.ndarray

    def to_dict(self) -> dict:
        return {
            "self_mask": self.self_mask.astype(int).tolist(),
            "cross_mask": self.cross_mask.astype(int).tolist(),
        }


def proposal_tree_pairs(
    forest: UnitForest, proposals: Sequence[RelationProposal]
) -> Tuple[np.ndarray, np.ndarray]:
    """每个候选的父单元所在树与子单元所在树"""
    parents, children = proposal_arrays(proposals)
    tree_of = forest.tree_of
    return tree_of[parents], tree_of[children]


def compute_levels(
    forest: UnitForest, proposals: Sequence[RelationProposal], max_level: int = 16
) -> TreeLevels:
    """
    单元层级为其在树中的深度（超过 max_level 时截断）；树内候选取子单元层级，
    跨树候选取保留层级。
    """
    unit_level = np.minimum(forest.depth, max_level).astype(np.int64)
    t_par, t_child = proposal_tree_pairs(forest, proposals)
    _, children = proposal_arrays(proposals)
    proposal_level = np.where(t_par == t_child, unit_level[children], max_level + 1).astype(np.int64)
    return TreeLevels(unit_level, proposal_level, max_level)


def build_tree_masks(forest: UnitForest, proposals: Sequence[RelationProposal]) -> TreeMasks:
    """
    trees(p) = {tree(i), tree(j)}；两候选的树集合相交时可互相关注，
    候选只关注 trees(p) 中的单元。
    """
    t_par, t_child = proposal_tree_pairs(forest, proposals)
    a_par, a_child = t_par[:, None], t_child[:, None]
    b_par, b_child = t_par[None, :], t_child[None, :]
    self_mask = (a_par == b_par) | (a_par == b_child) | (a_child == b_par) | (a_child == b_child)
    unit_tree = forest.tree_of[None, :]
    cross_mask = (unit_tree == a_par) | (unit_tree == a_child)
    return TreeMasks(self_mask, cross_mask)


# ============== 解码器 ==============

class RelationDecoder:
    """
    关系解码器

    查询输入为 FC(F_i ⊕ F_j ⊕ 层级嵌入)，上下文为 FC(F_u ⊕ 层级嵌入)；
    每层依次为掩码自注意力、掩码交叉注意力与前馈。
    """

    def __init__(
        self,
        cfg: DecoderConfig,
        d_model: int,
        head_hidden: int,
        n_types: int,
        use_tle: bool = True,
        use_tam: bool = True,
        prefix: str = "dec",
    ):
        self.cfg = cfg
        self.d_model = d_model
        self.use_tle = use_tle
        self.use_tam = use_tam
        d_level = cfg.d_level if use_tle else 0
        self.levels = Embedding(f"{prefix}.level", cfg.max_level + 2, cfg.d_level)
        self.query = Linear(f"{prefix}.query", 2 * d_model + d_level, d_model)
        self.context = Linear(f"{prefix}.context", d_model + d_level, d_model)
        self.layers = [
            TransformerLayer(f"{prefix}.layer{i}", d_model, cfg.n_heads, cfg.d_ffn, cross=True)
            for i in range(cfg.n_layers)
        ]
        self.norm = LayerNorm(f"{prefix}.norm", d_model)
        self.refine_head = MLP(f"{prefix}.refine", d_model, head_hidden, 1)
        self.type_head = MLP(f"{prefix}.type", d_model, head_hidden, n_types)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        if self.use_tle:
            self.levels.init_params(store, rng)
        self.query.init_params(store, rng)
        self.context.init_params(store, rng)
        for layer in self.layers:
            layer.init_params(store, rng)
        self.norm.init_params(store, rng)
        self.refine_head.init_params(store, rng)
        self.type_head.init_params(store, rng)

    def decode_relations(
        self,
        store: ParamStore,
        F: Tensor,
        proposals: Sequence[RelationProposal],
        levels: TreeLevels,
        masks: Optional[TreeMasks],
    ) -> Tensor:
        """
        Returns:
            (P, d_model) 细化后的候选嵌入
        """
        if F.ndim != 2 or F.shape[1] != self.d_model:
            raise ag.ShapeError("decode_relations", F.shape, (F.shape[0], self.d_model))
        parents, children = proposal_arrays(proposals)
        query_parts = [ag.take_rows(F, parents), ag.take_rows(F, children)]
        context_parts = [F]
        if self.use_tle:
            query_parts.append(self.levels(store, levels.proposal_level))
            context_parts.append(self.levels(store, levels.unit_level))
        q = self.query(store, ag.concat(query_parts))
        ctx = self.context(store, ag.concat(context_parts) if len(context_parts) > 1 else F)
        self_mask = cross_mask = None
        if self.use_tam and masks is not None:
            self_mask, cross_mask = masks.self_mask, masks.cross_mask
            if not cross_mask.any(axis=1).all():
                raise ag.ShapeError("decode_relations", cross_mask.shape, detail="proposal without tree")
        for layer in self.layers:
            q = layer(store, q, self_mask, memory=ctx, cross_mask=cross_mask)
        return self.norm(store, q)

    def refine_logits(self, store: ParamStore, H: Tensor, n_children: int) -> Tensor:
        """每个子单元在其 K 个候选上的打分，形状 (N, K')"""
        scores = self.refine_head(store, H)
        return ag.reshape(scores, (n_children, H.shape[0] // n_children))

    def type_logits(self, store: ParamStore, H: Tensor) -> Tensor:
        """每个候选的 C 类关系类型打分"""
        return self.type_head(store, H)


# ============== 最终输出 ==============

def refine_parents(
    refine_logits: np.ndarray, proposals: Sequence[RelationProposal]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    每个子单元在 K 个候选上做 softmax，argmax 为最终父节点（并列时名次靠前者优先）

    Returns:
        (最终父单元数组, (N, K') 概率)
    """
    logits = np.asarray(refine_logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    n, k = probs.shape
    best = probs.argmax(axis=1)
    final = np.asarray([proposals[j * k + best[j]].parent for j in range(n)], dtype=np.int64)
    return final, probs


def classify_final(
    type_logits: np.ndarray, proposals: Sequence[RelationProposal], chosen: Sequence[int], root_index: int
) -> np.ndarray:
    """
    被选中候选的 C 类 argmax 类型

    自指候选恒为 root；其余候选在排除 root 后取 argmax。
    """
    out = np.empty(len(chosen), dtype=np.int64)
    for j, p in enumerate(chosen):
        if proposals[p].parent == proposals[p].child:
            out[j] = root_index
            continue
        row = np.array(type_logits[p], dtype=np.float64, copy=True)
        row[root_index] = -np.inf
        out[j] = int(row.argmax())
    return out
