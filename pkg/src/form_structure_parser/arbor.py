"""
表单结构解析器 - 关系解码

虚拟根有向图构建、最大生成树形图 (Chu-Liu/Edmonds)、子树切分与层级组装。
图的节点 0 为虚拟根，单元 j 对应节点 j + 1。
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from loguru import logger

from .labels import AssemblyResult, assemble_unit_tree, reading_rank, split_parent_array
from .models import Document, Forest, FormParserError, RelationLabelSet, UnifiedLabels

VIRTUAL_ROOT = -1
SCORE_FLOOR = 1e-12


class ArborError(FormParserError):
    """得分矩阵不合法"""
    pass


# ============== 虚拟根图 ==============

@dataclass(frozen=True)
class RootedScoreGraph:
    """
    带虚拟根的 (N+1) 节点加权有向图

    weights[u, v] 为节点 u -> v 的边权，-inf 表示无边；没有自环，也没有指向根的边。
    """
    weights: np.ndarray
    mode: str = "log"

    @property
    def n_units(self) -> int:
        return self.weights.shape[0] - 1

    def edges(self) -> List[Tuple[int, int, float]]:
        src, dst = np.nonzero(np.isfinite(self.weights))
        return [(int(u), int(v), float(self.weights[u, v])) for u, v in zip(src, dst)]

    def edge_count(self) -> int:
        return int(np.isfinite(self.weights).sum())

    def score(self, parents: Sequence[int]) -> float:
        """单元父节点数组（VIRTUAL_ROOT 表示根）对应的树形图总权重"""
        return float(sum(self.weights[p + 1, j + 1] for j, p in enumerate(parents)))


def build_rooted_graph(R: np.ndarray, mode: str = "log", floor: float = SCORE_FLOOR) -> RootedScoreGraph:
    """
    由得分矩阵构建虚拟根图

    自环 R[j][j] 重定向为 根 -> j 的边。log 模式下边权为下截断后的对数概率，
    树形图总权重即联合父节点分配的对数似然；prob 模式直接使用概率。

    Raises:
        ArborError: R 不是非空方阵
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] == 0:
        raise ArborError(f"score matrix must be a non-empty square matrix, got shape {R.shape}")
    if mode not in ("log", "prob"):
        raise ArborError(f"unknown score mode '{mode}'")
    n = R.shape[0]
    clipped = np.maximum(R, floor)
    w = np.log(clipped) if mode == "log" else clipped
    weights = np.full((n + 1, n + 1), -np.inf)
    weights[1:, 1:] = w
    np.fill_diagonal(weights, -np.inf)
    weights[0, 1:] = np.diag(w)
    return RootedScoreGraph(weights, mode)


# ============== Chu-Liu/Edmonds ==============

def _find_cycle(parent: np.ndarray) -> Optional[List[int]]:
    graph = nx.DiGraph()
    graph.add_nodes_from(range(len(parent)))
    graph.add_edges_from((int(p), v) for v, p in enumerate(parent) if p >= 0)
    try:
        cycle = nx.find_cycle(graph)
    except nx.NetworkXNoCycle:
        return None
    return sorted(u for u, _ in cycle)


def _chu_liu_edmonds(weights: np.ndarray) -> np.ndarray:
    """稠密图上的递归实现；节点 0 为根，返回父节点数组（根为 -1）"""
    n = weights.shape[0]
    w = weights.copy()
    np.fill_diagonal(w, -np.inf)
    w[:, 0] = -np.inf
    # argmax 取首个最大值：根优先，其次下标小者
    parent = np.argmax(w, axis=0)
    parent[0] = -1
    cycle = _find_cycle(parent)
    if cycle is None:
        return parent

    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    keep = [v for v in range(n) if not in_cycle[v]]
    c = len(keep)
    cyc = np.asarray(cycle)
    cycle_in = w[parent[cyc], cyc]

    contracted = np.full((c + 1, c + 1), -np.inf)
    contracted[:c, :c] = w[np.ix_(keep, keep)]
    enter = w[np.ix_(keep, cycle)] - cycle_in[None, :]
    enter_at = np.argmax(enter, axis=1)
    contracted[:c, c] = enter[np.arange(c), enter_at]
    leave = w[np.ix_(cycle, keep)]
    leave_from = np.argmax(leave, axis=0)
    contracted[c, :c] = leave[leave_from, np.arange(c)]

    sub = _chu_liu_edmonds(contracted)

    result = parent.copy()
    for idx, v in enumerate(keep):
        if v == 0:
            continue
        p = sub[idx]
        result[v] = cycle[leave_from[idx]] if p == c else keep[p]
    entry = int(sub[c])
    result[cycle[enter_at[entry]]] = keep[entry]
    result[0] = -1
    return result


def max_arborescence(g: RootedScoreGraph) -> np.ndarray:
    """
    虚拟根上的最大生成树形图

    Returns:
        长度 N 的父单元数组，VIRTUAL_ROOT (-1) 表示父节点为虚拟根
    """
    parent = _chu_liu_edmonds(g.weights)
    return np.asarray([p - 1 if p > 0 else VIRTUAL_ROOT for p in parent[1:]], dtype=np.int64)


# ============== 子树切分 ==============

@dataclass(frozen=True)
class UnitForest:
    """单元级森林：parent[j] == j 表示 j 为树根"""
    parent: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))

    @property
    def n_units(self) -> int:
        return len(self.parent)

    @cached_property
    def trees(self) -> List[Tuple[int, Dict[int, int]]]:
        return split_parent_array(self.parent)

    @property
    def roots(self) -> List[int]:
        return [root for root, _ in self.trees]

    @cached_property
    def tree_of(self) -> np.ndarray:
        """每个单元所在树的根"""
        out = np.arange(self.n_units)
        for root, local in self.trees:
            for u in local:
                out[u] = root
        return out

    @cached_property
    def depth(self) -> np.ndarray:
        """每个单元在树中的深度，树根为 0"""
        out = np.zeros(self.n_units, dtype=np.int64)
        for root, local in self.trees:
            graph = nx.DiGraph((p, c) for c, p in local.items())
            graph.add_node(root)
            for u, d in nx.single_source_shortest_path_length(graph, root).items():
                out[u] = d
        return out

    def units_of(self, root: int) -> List[int]:
        return sorted(int(u) for u in np.nonzero(self.tree_of == root)[0])

    def to_dict(self) -> dict:
        return {"parent": list(self.parent), "roots": self.roots}


def split_subtrees(parents: Sequence[int]) -> UnitForest:
    """虚拟根的每个孩子对应一棵树"""
    return UnitForest(tuple(j if p == VIRTUAL_ROOT else int(p) for j, p in enumerate(parents)))


# ============== 层级组装与完整解码 ==============

def assemble_hierarchy(
    root: int,
    local: Dict[int, int],
    C_types: np.ndarray,
    labels: RelationLabelSet,
    rank: Sequence[int],
) -> AssemblyResult:
    """
    单棵单元级树 -> 层级树

    每条树内边 parent -> child 的类型为 C[parent][child]。链上 intra 类型不一致时
    树被标记为 malformed 并附带诊断信息。
    """
    types = {c: labels.name(int(C_types[p, c])) for c, p in local.items()}
    result = assemble_unit_tree(root, local, types, rank)
    if result.diagnostics:
        logger.warning("malformed tree rooted at unit {}: {}", root, "; ".join(result.diagnostics))
    return result


@dataclass
class DecodeResult:
    """完整解码结果"""
    forest: Forest
    unit_forest: UnitForest
    types: Tuple[int, ...]
    score: float
    diagnostics: List[str] = field(default_factory=list)

    def unified_labels(self, labels: RelationLabelSet) -> UnifiedLabels:
        return UnifiedLabels(self.unit_forest.parent, self.types, labels)


def decode(
    R: np.ndarray,
    C_types: np.ndarray,
    labels: RelationLabelSet,
    doc: Optional[Document] = None,
    mode: str = "log",
) -> DecodeResult:
    """
    关系解码：虚拟根图 -> 最大生成树形图 -> 子树 -> 层级树

    树根的类型恒为 root，树内边的类型取自 C_types。
    """
    g = build_rooted_graph(R, mode=mode)
    parents = max_arborescence(g)
    unit_forest = split_subtrees(parents)
    C = np.asarray(C_types, dtype=np.int64)
    if C.shape != (g.n_units, g.n_units):
        raise ArborError(f"type matrix shape {C.shape} does not match score matrix {R.shape}")
    rank = reading_rank(doc, g.n_units)
    trees = []
    diagnostics: List[str] = []
    for root, local in unit_forest.trees:
        result = assemble_hierarchy(root, local, C, labels, rank)
        trees.append(result.tree)
        diagnostics.extend(result.diagnostics)
    types = tuple(
        labels.root_index if p == j else int(C[p, j]) for j, p in enumerate(unit_forest.parent)
    )
    return DecodeResult(Forest(tuple(trees)), unit_forest, types, g.score(parents), diagnostics)


def one_hot_scores(ul: UnifiedLabels) -> Tuple[np.ndarray, np.ndarray]:
    """由统一标签构造 one-hot 得分矩阵 R 与类型矩阵 C"""
    n = len(ul)
    R = np.zeros((n, n))
    C = np.full((n, n), ul.label_set.root_index, dtype=np.int64)
    for j, (p, t) in enumerate(zip(ul.parent, ul.rel_type)):
        R[p, j] = 1.0
        C[p, j] = t
    return R, C
