"""
表单结构解析器 - 评估指标

字段级 F1、树级 F1、树编辑距离相似度 (TEDS) 与语料级汇总。
"""

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
from apted import APTED, Config

from .labels import reading_rank
from .models import Document, Forest, FormParserError, HierTree


class MetricsError(FormParserError):
    """评估输入不匹配"""
    pass


# ============== F1 ==============

def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class ClassScores:
    """单个类别的计数与 P/R/F1"""
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def add(self, other: "ClassScores") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
        }


@dataclass
class MatchReport:
    """按类别的匹配结果及 micro/macro 汇总"""
    per_class: Dict[str, ClassScores] = field(default_factory=dict)

    @property
    def micro(self) -> ClassScores:
        total = ClassScores()
        for scores in self.per_class.values():
            total.add(scores)
        return total

    @property
    def macro_f1(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([s.f1 for s in self.per_class.values()]))

    def merge(self, other: "MatchReport") -> None:
        for name, scores in other.per_class.items():
            self.per_class.setdefault(name, ClassScores()).add(scores)

    def to_dict(self) -> dict:
        return {
            "per_class": {k: v.to_dict() for k, v in sorted(self.per_class.items())},
            "micro": self.micro.to_dict(),
            "macro_f1": self.macro_f1,
        }


def _match(pred: Sequence[Tuple[str, Hashable]], gt: Sequence[Tuple[str, Hashable]]) -> MatchReport:
    """以 (类别, 签名) 多重集合做精确匹配"""
    report = MatchReport()
    pred_count = Counter(pred)
    gt_count = Counter(gt)
    for (cls, sig), n in gt_count.items():
        hit = min(n, pred_count.get((cls, sig), 0))
        scores = report.per_class.setdefault(cls, ClassScores())
        scores.tp += hit
        scores.fn += n - hit
    for (cls, sig), n in pred_count.items():
        hit = min(n, gt_count.get((cls, sig), 0))
        report.per_class.setdefault(cls, ClassScores()).fp += n - hit
    return report


def _check_same_document(pred: Forest, gt: Forest) -> None:
    pred_units = {u for t in pred for u in t.units}
    gt_units = {u for t in gt for u in t.units}
    if pred_units and gt_units and pred_units != gt_units:
        raise MetricsError("predicted and ground-truth forests cover different units")


def field_f1(pred: Forest, gt: Forest) -> MatchReport:
    """字段匹配当且仅当角色与成员单元集合完全相同"""
    _check_same_document(pred, gt)

    def sigs(forest: Forest):
        return [(f.role, frozenset(f.member_units)) for f in forest.fields]

    return _match(sigs(pred), sigs(gt))


def tree_signature(tree: HierTree) -> Hashable:
    fields = frozenset((f.role, frozenset(f.member_units), f.head_unit) for f in tree.fields)
    edges = frozenset((e.parent_head, e.child_head, e.rel_type) for e in tree.edges)
    return (tree.root_head, fields, edges)


def tree_f1(pred: Forest, gt: Forest) -> MatchReport:
    """树匹配当且仅当全部字段与全部有类型边都相同；按树的类别统计"""
    _check_same_document(pred, gt)
    return _match(
        [(t.kind, tree_signature(t)) for t in pred], [(t.kind, tree_signature(t)) for t in gt]
    )


# ============== TEDS ==============

@dataclass
class TedsNode:
    """有序带标签树节点"""
    label: Hashable
    children: List["TedsNode"] = field(default_factory=list)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def field_tree(tree: HierTree, doc: Optional[Document] = None) -> TedsNode:
    """
    层级树 -> 字段树

    节点标签为 (角色, 成员文本)；孩子按头单元的阅读顺序排列。
    没有文档时以成员单元 id 代替文本，孩子按 id 排列。
    """
    by_head = {f.head_unit: f for f in tree.fields}
    rank = reading_rank(doc, doc.n_units) if doc is not None else None

    def label(head: int) -> Tuple[str, str]:
        fld = by_head[head]
        if doc is None:
            text = " ".join(str(u) for u in fld.member_units)
        else:
            text = normalize_text(" ".join(doc.unit(u).text for u in fld.member_units))
        return (fld.role, text)

    def build(head: int) -> TedsNode:
        kids = [e.child_head for e in tree.children(head)]
        kids.sort(key=(lambda h: (rank[h], h)) if rank is not None else None)
        return TedsNode(label(head), [build(k) for k in kids])

    return build(tree.root_head)


class _UnitCost(Config):
    """插入、删除代价为 1，标签不同时重标代价为 1"""

    def rename(self, node1: TedsNode, node2: TedsNode) -> int:
        return 0 if node1.label == node2.label else 1

    def children(self, node: TedsNode) -> List[TedsNode]:
        return node.children


def tree_edit_distance(a: TedsNode, b: TedsNode) -> int:
    """有序树编辑距离（APTED）"""
    return int(round(APTED(a, b, _UnitCost()).compute_edit_distance()))


def teds_nodes(a: TedsNode, b: TedsNode) -> float:
    size = max(a.size(), b.size())
    if size == 0:
        raise MetricsError("TEDS is undefined for empty trees")
    # 单位代价下距离可超过较大树的节点数
    return max(0.0, 1.0 - tree_edit_distance(a, b) / size)


def teds(pred: HierTree, gt: HierTree, doc: Optional[Document] = None) -> float:
    """TEDS = 1 - TED / max(|pred|, |gt|)，取值 [0, 1]"""
    return teds_nodes(field_tree(pred, doc), field_tree(gt, doc))


# ============== 语料级汇总 ==============

@dataclass
class DocumentScores:
    field: MatchReport
    tree: MatchReport
    teds: List[Tuple[str, str, float]]  # (kind, level, score) per GT tree


def pair_trees(pred: Forest, gt: Forest, doc: Optional[Document] = None) -> List[Tuple[int, Optional[int], float]]:
    """
    贪心配对：每次取 TEDS 最大的 (gt, pred) 对，并列时 gt 下标小者、其次 pred 下标小者优先

    Returns:
        [(gt 下标, pred 下标或 None, TEDS)]，按 gt 下标排序；未配对的 gt 树得分为 0
    """
    gt_nodes = [field_tree(t, doc) for t in gt]
    pred_nodes = [field_tree(t, doc) for t in pred]
    candidates = sorted(
        ((-teds_nodes(p, g), gi, pi) for gi, g in enumerate(gt_nodes) for pi, p in enumerate(pred_nodes)),
    )
    used_gt, used_pred = set(), set()
    pairs: Dict[int, Tuple[Optional[int], float]] = {}
    for neg, gi, pi in candidates:
        if gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        pairs[gi] = (pi, -neg)
    return [(gi, *pairs.get(gi, (None, 0.0))) for gi in range(len(gt_nodes))]


def score_document(pred: Forest, gt: Forest, doc: Optional[Document] = None) -> DocumentScores:
    gt_trees = list(gt)
    teds_rows = [
        (gt_trees[gi].kind, "hier" if gt_trees[gi].depth >= 2 else "single", score)
        for gi, _, score in pair_trees(pred, gt, doc)
    ]
    return DocumentScores(field_f1(pred, gt), tree_f1(pred, gt), teds_rows)


@dataclass
class CorpusReport:
    """语料级评估报告"""
    documents: int
    field: MatchReport
    tree: MatchReport
    teds: Dict[str, float]
    teds_by_level: Dict[str, float]
    teds_all: float
    proposal: Optional["CorpusReport"] = None
    coverage: Optional[float] = None

    def teds_of(self, kind: str) -> float:
        return self.teds.get(kind, 0.0)

    def to_dict(self) -> dict:
        data = {
            "documents": self.documents,
            "f1_field": self.field.micro.f1,
            "f1_tree": self.tree.micro.f1,
            "field": self.field.to_dict(),
            "tree": self.tree.to_dict(),
            "teds": dict(sorted(self.teds.items())),
            "teds_by_level": dict(sorted(self.teds_by_level.items())),
            "teds_all": self.teds_all,
        }
        if self.coverage is not None:
            data["proposal_coverage"] = self.coverage
        if self.proposal is not None:
            data["proposal"] = self.proposal.to_dict()
        return data


def corpus_eval(
    preds: Sequence[Forest],
    gts: Sequence[Forest],
    docs: Optional[Sequence[Document]] = None,
    jobs: int = 1,
) -> CorpusReport:
    """
    语料级评估

    F1 为跨文档的 micro 汇总；TEDS 按 GT 树的类别（及单层/层级）求平均。

    Raises:
        MetricsError: 预测与真值文档数不一致
    """
    if len(preds) != len(gts):
        raise MetricsError(f"{len(preds)} predicted forests for {len(gts)} ground-truth forests")
    if docs is not None and len(docs) != len(gts):
        raise MetricsError(f"{len(docs)} documents for {len(gts)} ground-truth forests")
    doc_list = list(docs) if docs is not None else [None] * len(gts)
    args = list(zip(preds, gts, doc_list))
    if jobs > 1 and len(args) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_doc = list(pool.map(lambda a: score_document(*a), args))
    else:
        per_doc = [score_document(*a) for a in args]

    field_report, tree_report = MatchReport(), MatchReport()
    by_kind: Dict[str, List[float]] = {}
    by_level: Dict[str, List[float]] = {}
    all_scores: List[float] = []
    for scores in per_doc:
        field_report.merge(scores.field)
        tree_report.merge(scores.tree)
        for kind, level, value in scores.teds:
            by_kind.setdefault(kind, []).append(value)
            by_level.setdefault(f"{kind}_{level}", []).append(value)
            all_scores.append(value)
    return CorpusReport(
        documents=len(per_doc),
        field=field_report,
        tree=tree_report,
        teds={k: float(np.mean(v)) for k, v in by_kind.items()},
        teds_by_level={k: float(np.mean(v)) for k, v in by_level.items()},
        teds_all=float(np.mean(all_scores)) if all_scores else 0.0,
    )
