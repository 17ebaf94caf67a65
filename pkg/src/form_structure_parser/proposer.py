"""
表单结构解析器 - 关系候选网络

父节点打分头、top-K 关系候选提取、关系类型分类头，以及树候选的构建。
R[i][j] 为单元 i 是单元 j 父节点的概率，每列和为 1。
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .arbor import UnitForest, build_rooted_graph, max_arborescence, split_subtrees
from .autograd import ParamStore, Tensor
from .layers import Block, Linear


@dataclass(frozen=True)
class RelationProposal:
    """关系候选：子单元 child 的第 rank 个候选父单元"""
    child: int
    parent: int
    score: float
    rank: int  # 1..K

    def to_dict(self) -> dict:
        return {"child": self.child, "parent": self.parent, "score": self.score, "rank": self.rank}


@dataclass(frozen=True)
class ScoredRelationGraph:
    """父节点得分矩阵 R 与关系类型矩阵 C"""
    R: np.ndarray
    C: np.ndarray

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "C": self.C.tolist()}


# ============== 打分头 ==============

class PairHead(Block):
    """
    成对打分头: MLP(FC_q(F_i) ⊕ FC_k(F_j))

    第一层 MLP 作用于拼接向量，按拼接的两半拆分权重，从而可以对全部 N×N 对
    或只对候选对求值而无需显式拼接。
    """

    def __init__(self, prefix: str, d_model: int, hidden: int, d_out: int):
        super().__init__(prefix)
        self.fc_q = Linear(self.name("fc_q"), d_model, hidden)
        self.fc_k = Linear(self.name("fc_k"), d_model, hidden)
        self.w1_q = Linear(self.name("mlp.w1_q"), hidden, hidden, bias=False)
        self.w1_k = Linear(self.name("mlp.w1_k"), hidden, hidden)
        self.out = Linear(self.name("mlp.out"), hidden, d_out)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for block in (self.fc_q, self.fc_k, self.w1_q, self.w1_k, self.out):
            block.init_params(store, rng)

    def _halves(self, store: ParamStore, F: Tensor) -> Tuple[Tensor, Tensor]:
        a = self.w1_q(store, self.fc_q(store, F))
        b = self.w1_k(store, self.fc_k(store, F))
        return a, b

    def all_pairs(self, store: ParamStore, F: Tensor) -> Tensor:
        """(N, N, d_out)，下标 [i, j] 对应 (父 i, 子 j)"""
        a, b = self._halves(store, F)
        return self.out(store, ag.relu(ag.pairwise_add(a, b)))

    def pairs(self, store: ParamStore, F: Tensor, parents: Sequence[int], children: Sequence[int]) -> Tensor:
        """(P, d_out)，只对给定的 (父, 子) 对求值"""
        a, b = self._halves(store, F)
        hidden = ag.add(ag.take_rows(a, parents), ag.take_rows(b, children))
        return self.out(store, ag.relu(hidden))


class ParentScorer(PairHead):
    """父节点打分头，输出标量 f_ij"""

    def __init__(self, d_model: int, hidden: int, prefix: str = "prop.parent"):
        super().__init__(prefix, d_model, hidden, 1)

    def child_logits(self, store: ParamStore, F: Tensor) -> Tensor:
        """
        以子单元为行的打分矩阵，即 f 的转置

        行 j 上的 softmax 等价于 R 的第 j 列。
        """
        n = F.shape[0]
        f = ag.reshape(self.all_pairs(store, F), (n, n))
        return ag.transpose(f)


class RelationClassifier(PairHead):
    """C 类关系类型分类头"""

    def __init__(self, d_model: int, hidden: int, n_types: int, prefix: str = "prop.type"):
        super().__init__(prefix, d_model, hidden, n_types)


def score_parents(scorer: ParentScorer, store: ParamStore, F: Tensor) -> Tuple[Tensor, np.ndarray]:
    """
    父节点打分

    Returns:
        (以子单元为行的 logits, R)；R 为 logits 按父节点 softmax 后的转置
    """
    logits = scorer.child_logits(store, F)
    return logits, ag.softmax(logits).data.T.astype(np.float64)


def column_softmax(f: np.ndarray) -> np.ndarray:
    shifted = f - f.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


# ============== 候选提取 ==============

def top_k_proposals(R: np.ndarray, k: int) -> List[RelationProposal]:
    """
    每个子单元取得分最高的 K 个候选父单元

    按子单元分组、组内按名次排列，第 p 个候选对应 (child=p // K', rank=p % K' + 1)，
    K' = min(K, N)。得分相同时父单元下标小者优先。
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    n = R.shape[0]
    kk = min(k, n)
    parents = np.arange(n)
    proposals = []
    for j in range(n):
        order = np.lexsort((parents, -R[:, j]))[:kk]
        for rank, i in enumerate(order, start=1):
            proposals.append(RelationProposal(j, int(i), float(R[i, j]), rank))
    return proposals


def proposal_arrays(proposals: Sequence[RelationProposal]) -> Tuple[np.ndarray, np.ndarray]:
    """(父单元数组, 子单元数组)"""
    parents = np.asarray([p.parent for p in proposals], dtype=np.int64)
    children = np.asarray([p.child for p in proposals], dtype=np.int64)
    return parents, children


def classify_relations(
    classifier: RelationClassifier,
    store: ParamStore,
    F: Tensor,
    proposals: Sequence[RelationProposal],
) -> Tensor:
    """每个候选 (父, 子) 的 C 类类型 logits，形状 (P, C)；自环候选应判为 root"""
    parents, children = proposal_arrays(proposals)
    return classifier.pairs(store, F, parents, children)


def coarse_types(type_logits: np.ndarray, root_index: int) -> np.ndarray:
    """
    由 (N, N, C) 全对类型得分得到关系类型矩阵

    对角线恒为 root；非对角线在排除 root 后取 argmax。
    """
    scores = np.array(type_logits, dtype=np.float64, copy=True)
    scores[..., root_index] = -np.inf
    C = scores.argmax(axis=-1)
    np.fill_diagonal(C, root_index)
    return C.astype(np.int64)


def build_tree_proposals(R: np.ndarray, mode: str = "log") -> UnitForest:
    """在 R 上运行最大生成树形图解码，得到用作注意力约束的单元级森林"""
    return split_subtrees(max_arborescence(build_rooted_graph(R, mode=mode)))
