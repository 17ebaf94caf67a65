"""
表单结构解析器 - 标签映射

文档校验、阅读顺序，以及层级森林与统一标签之间的双向映射。
字段内成员按阅读顺序链接；字段间关系由主体字段头指向客体字段头。
"""

from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .models import (
    INTER_CG,
    INTER_KVP,
    INTRA_PREFIX,
    ROLE_CF,
    ROLE_CGT,
    ROLE_KEY,
    ROLE_OTHER,
    ROLE_UNKNOWN,
    ROLE_VALUE,
    ROOT,
    Document,
    Field,
    FieldEdge,
    Forest,
    HierTree,
    LabelError,
    RelationCategory,
    RelationLabelSet,
    UnifiedLabels,
)


# ============== 文档校验 ==============

def validate_document(doc: Document) -> List[str]:
    """
    校验文档不变量

    Returns:
        违反的不变量列表，合法文档返回空列表
    """
    problems = []
    if doc.n_units < 1:
        problems.append("empty document")
    if doc.page_width <= 0 or doc.page_height <= 0:
        problems.append("page size must be positive")
    for pos, unit in enumerate(doc.units):
        for p in unit.bbox.problems():
            problems.append(f"unit {unit.id} (position {pos}): {p}")
    ids = [u.id for u in doc.units]
    if ids != list(range(len(ids))):
        problems.append("id density")
    return problems


# ============== 阅读顺序 ==============

def reading_order(doc: Document, y_tolerance: float = 0.5) -> List[int]:
    """
    从左上到右下的行优先阅读顺序

    行的纵向容差为单元高度中位数的 y_tolerance 倍。
    """
    if not doc.units:
        return []
    tol = y_tolerance * float(np.median([u.bbox.height for u in doc.units]))
    by_top = sorted(doc.units, key=lambda u: (u.bbox.y1, u.bbox.x1, u.id))
    rows: List[List] = []
    row_top = None
    for unit in by_top:
        if row_top is None or unit.bbox.y1 - row_top > tol:
            rows.append([])
            row_top = unit.bbox.y1
        rows[-1].append(unit)
    return [u.id for row in rows for u in sorted(row, key=lambda u: (u.bbox.x1, u.bbox.y1, u.id))]


def reading_rank(doc: Optional[Document], n_units: int) -> List[int]:
    """单元 id -> 阅读顺序位置；没有文档时退化为 id 顺序"""
    if doc is None:
        return list(range(n_units))
    rank = [0] * n_units
    for pos, uid in enumerate(reading_order(doc)):
        rank[uid] = pos
    return rank


# ============== 单棵树的层级组装 ==============

@dataclass
class AssemblyResult:
    """单棵单元级树的组装结果"""
    tree: HierTree
    diagnostics: List[str]


def _singleton_role(
    incoming: Optional[str], parent_role: Optional[str], outgoing: Sequence[str]
) -> str:
    """没有字段内链的单元素字段，根据相邻字段间关系推断角色"""
    if incoming is None:
        if INTER_KVP in outgoing:
            return ROLE_KEY
        if INTER_CG in outgoing:
            return ROLE_CGT
        return ROLE_OTHER
    if incoming == INTER_KVP:
        return ROLE_KEY if parent_role == ROLE_VALUE else ROLE_VALUE
    if incoming == INTER_CG:
        return ROLE_CGT if parent_role == ROLE_CF else ROLE_CF
    return ROLE_OTHER


def assemble_unit_tree(
    root: int,
    parent: Mapping[int, int],
    rel_type: Mapping[int, str],
    rank: Sequence[int],
) -> AssemblyResult:
    """
    将单元级树组装为层级树

    Args:
        root: 树根单元
        parent: 树内非根单元 -> 父单元
        rel_type: 树内非根单元 -> 入边关系类型名
        rank: 单元的阅读顺序位置

    Returns:
        组装结果；出现混合 intra 类型的链或非法的 root 边时，树被标记为 malformed，
        每个单元降级为角色 unknown 的单元素字段
    """
    children: Dict[int, List[int]] = {}
    for child, par in parent.items():
        children.setdefault(par, []).append(child)
    for kids in children.values():
        kids.sort(key=lambda u: rank[u])

    diagnostics: List[str] = []
    field_head: Dict[int, int] = {root: root}
    intra_types: Dict[int, set] = {root: set()}
    order = [root]
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for c in children.get(u, []):
            t = rel_type[c]
            if t == ROOT:
                diagnostics.append(f"unit {c}: root-typed edge from unit {u}")
            if t.startswith(INTRA_PREFIX):
                field_head[c] = field_head[u]
                intra_types[field_head[u]].add(t)
            else:
                field_head[c] = c
                intra_types[c] = set()
            order.append(c)
            queue.append(c)

    for head, types in intra_types.items():
        if len(types) > 1:
            diagnostics.append(f"field headed by unit {head} mixes {sorted(types)}")

    if diagnostics:
        fields = [Field(ROLE_UNKNOWN, (u,), u) for u in order]
        edges = [FieldEdge(parent[c], c, rel_type[c]) for c in order if c != root]
        return AssemblyResult(HierTree(root, tuple(fields), tuple(edges), malformed=True), diagnostics)

    members: Dict[int, List[int]] = {}
    for u in order:
        members.setdefault(field_head[u], []).append(u)

    heads = [u for u in order if field_head[u] == u]
    edges = [
        FieldEdge(field_head[parent[h]], h, rel_type[h]) for h in heads if h != root
    ]
    outgoing: Dict[int, List[str]] = {}
    for e in edges:
        outgoing.setdefault(e.parent_head, []).append(e.rel_type)
    incoming = {e.child_head: e for e in edges}

    roles: Dict[int, str] = {}
    for h in heads:  # BFS 顺序保证父字段角色已确定
        types = intra_types[h]
        if types:
            roles[h] = next(iter(types))[len(INTRA_PREFIX):]
            continue
        edge = incoming.get(h)
        roles[h] = _singleton_role(
            edge.rel_type if edge else None,
            roles.get(edge.parent_head) if edge else None,
            outgoing.get(h, []),
        )

    fields = [
        Field(roles[h], tuple(sorted(members[h], key=lambda u: rank[u])), h) for h in heads
    ]
    return AssemblyResult(HierTree(root, tuple(fields), tuple(edges)), [])


def split_parent_array(parent: Sequence[int]) -> List[Tuple[int, Dict[int, int]]]:
    """
    按自指父节点切分森林

    Returns:
        [(树根, {非根单元: 父单元})]，树按根排序
    """
    n = len(parent)
    children: Dict[int, List[int]] = {}
    roots = []
    for j in range(n):
        if parent[j] == j:
            roots.append(j)
        else:
            children.setdefault(parent[j], []).append(j)
    trees = []
    for r in roots:
        local: Dict[int, int] = {}
        stack = [r]
        while stack:
            u = stack.pop()
            for c in children.get(u, []):
                local[c] = u
                stack.append(c)
        trees.append((r, local))
    return trees


# ============== 森林 <-> 统一标签 ==============

def labels_from_forest(
    doc: Document, gt: Forest, labels: RelationLabelSet
) -> UnifiedLabels:
    """
    将层级森林展平为统一标签

    字段内非头成员的父节点是阅读顺序中的前一个成员；字段头的父节点由树中的
    字段间边给出，树根字段头自指且类型为 root。未被任何字段覆盖的单元自指。

    Raises:
        LabelError: 字段引用未知单元、单元属于两个字段、关系类型不在标签空间中
    """
    n = doc.n_units
    rank = reading_rank(doc, n)
    parent = list(range(n))
    types = [labels.root_index] * n
    owner: Dict[int, int] = {}

    for tree in gt:
        for fld in tree.fields:
            for u in fld.member_units:
                if not 0 <= u < n:
                    raise LabelError(f"field headed by {fld.head_unit} references unknown unit id {u}")
                if u in owner:
                    raise LabelError(f"unit {u} is in two fields ({owner[u]} and {fld.head_unit})")
                owner[u] = fld.head_unit
            rest = sorted((u for u in fld.member_units if u != fld.head_unit), key=lambda u: rank[u])
            if rest:
                intra = labels.intra_type(fld.role)
                if intra is None:
                    raise LabelError(
                        f"role '{fld.role}' of multi-unit field {fld.head_unit} has no intra type"
                    )
                chain = [fld.head_unit] + rest
                for prev, cur in zip(chain, chain[1:]):
                    parent[cur] = prev
                    types[cur] = labels.index(intra)
        for edge in tree.edges:
            if labels.category(edge.rel_type) is RelationCategory.ROOT:
                raise LabelError(f"edge {edge.parent_head}->{edge.child_head} typed root")
            parent[edge.child_head] = edge.parent_head
            types[edge.child_head] = labels.index(edge.rel_type)

    return UnifiedLabels(tuple(parent), tuple(types), labels)


def forest_from_labels(
    doc: Optional[Document], ul: UnifiedLabels, labels: RelationLabelSet
) -> Forest:
    """
    由统一标签恢复层级森林（labels_from_forest 的逆映射）

    Raises:
        LabelError: 字段内链混合了不同的 intra 类型
    """
    rank = reading_rank(doc, len(ul))
    trees = []
    for root, local in split_parent_array(ul.parent):
        types = {u: labels.name(ul.rel_type[u]) for u in local}
        result = assemble_unit_tree(root, local, types, rank)
        if result.diagnostics:
            raise LabelError("; ".join(result.diagnostics))
        trees.append(result.tree)
    forest = Forest(tuple(trees))
    logger.debug("recovered {} trees from {} units", len(forest), len(ul))
    return forest
