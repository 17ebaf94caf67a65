"""
表单结构解析器 - 语料读写

JSON 语料文件的加载与保存、带标注文档、语料统计与确定性的训练/留出切分。
标注以统一标签形式（父节点 + 关系类型名）存储，森林在加载时推导。
"""

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .labels import forest_from_labels, labels_from_forest, validate_document
from .models import (
    ROLE_CF,
    ROLE_CGT,
    ROLE_KEY,
    ROLE_VALUE,
    ChoiceGroup,
    Document,
    DocumentError,
    Forest,
    FormParserError,
    KeyValuePair,
    LabelError,
    RelationLabelSet,
    UnifiedLabels,
)


class CorpusFormatError(FormParserError):
    """语料文件格式错误"""
    pass


@dataclass(frozen=True)
class LabeledDoc:
    """文档及其真实层级森林"""
    doc: Document
    gt: Forest

    def __post_init__(self) -> None:
        problems = self.gt.problems(self.doc.n_units)
        if problems:
            raise LabelError(f"document {self.doc.doc_id}: " + "; ".join(problems))

    def labels(self, label_set: RelationLabelSet) -> UnifiedLabels:
        return labels_from_forest(self.doc, self.gt, label_set)

    def to_dict(self, label_set: RelationLabelSet) -> dict:
        data = self.doc.to_dict()
        data["labels"] = self.labels(label_set).to_dict()
        return data


def _doc_from_dict(data: dict, label_set: RelationLabelSet, where: str) -> LabeledDoc:
    try:
        doc = Document.from_dict(data)
    except (KeyError, TypeError, ValueError, DocumentError) as e:
        raise CorpusFormatError(f"{where}: malformed document ({type(e).__name__}: {e})") from None
    for pos, unit in enumerate(data.get("units", [])):
        if set(unit) - {"id", "kind", "bbox", "text"}:
            extra = sorted(set(unit) - {"id", "kind", "bbox", "text"})
            raise CorpusFormatError(f"{where}.units[{pos}]: unknown fields {extra}")
    problems = validate_document(doc)
    if problems:
        raise CorpusFormatError(f"{where}: " + "; ".join(problems))
    if "labels" not in data:
        raise CorpusFormatError(f"{where}.labels: missing")
    try:
        ul = UnifiedLabels.from_dict(data["labels"], label_set)
        if len(ul) != doc.n_units:
            raise CorpusFormatError(
                f"{where}.labels: {len(ul)} labels for {doc.n_units} units (dangling unit id)"
            )
        gt = forest_from_labels(doc, ul, label_set)
    except (KeyError, TypeError) as e:
        raise CorpusFormatError(f"{where}.labels: malformed ({type(e).__name__}: {e})") from None
    except LabelError as e:
        raise CorpusFormatError(f"{where}.labels: {e}") from None
    return LabeledDoc(doc, gt)


def corpus_from_dict(data: dict) -> Tuple[List[LabeledDoc], RelationLabelSet]:
    """
    解析语料 JSON 对象

    Raises:
        CorpusFormatError: 结构不符，信息中带有 JSON 路径
    """
    if not isinstance(data, dict):
        raise CorpusFormatError("$: top level must be an object")
    try:
        label_set = RelationLabelSet(tuple(data.get("schema", RelationLabelSet.default().names)))
    except LabelError as e:
        raise CorpusFormatError(f"$.schema: {e}") from None
    documents = data.get("documents")
    if not isinstance(documents, list):
        raise CorpusFormatError("$.documents: missing or not a list")
    docs = [_doc_from_dict(d, label_set, f"$.documents[{i}]") for i, d in enumerate(documents)]
    return docs, label_set


def corpus_to_dict(docs: Sequence[LabeledDoc], label_set: RelationLabelSet) -> dict:
    return {
        "schema": label_set.to_list(),
        "documents": [d.to_dict(label_set) for d in docs],
    }


def load_corpus(path: Path) -> Tuple[List[LabeledDoc], RelationLabelSet]:
    """
    加载语料文件

    Raises:
        CorpusFormatError: JSON 无法解析（带行列号）或结构不符（带 JSON 路径）
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    try:
        docs, label_set = corpus_from_dict(data)
    except CorpusFormatError as e:
        raise CorpusFormatError(f"{path}: {e}") from None
    logger.info("loaded {} documents from {}", len(docs), path)
    return docs, label_set


def save_corpus(docs: Sequence[LabeledDoc], path: Path, label_set: Optional[RelationLabelSet] = None) -> Path:
    path = Path(path)
    label_set = label_set or RelationLabelSet.default()
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(corpus_to_dict(docs, label_set), ensure_ascii=False, indent=1)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info("saved {} documents to {}", len(docs), path)
    return path


# ============== 统计与切分 ==============

STAT_KEYS = (
    "documents", "units", "trees",
    "cgt", "cf", "key", "value",
    "cg_single", "cg_hier", "kvp_single", "kvp_hier",
)


def corpus_statistics(docs: Sequence[LabeledDoc]) -> Dict[str, int]:
    """
    字段与结构对象计数

    cg_single/kvp_single 为位于单层树中的对象数，cg_hier/kvp_hier 为位于层级
    （嵌套深度 >= 2）树中的对象数。
    """
    counts: Counter = Counter({key: 0 for key in STAT_KEYS})
    for item in docs:
        counts["documents"] += 1
        counts["units"] += item.doc.n_units
        for tree in item.gt:
            counts["trees"] += 1
            for fld in tree.fields:
                if fld.role in (ROLE_CGT, ROLE_CF, ROLE_KEY, ROLE_VALUE):
                    counts[fld.role] += 1
            level = "hier" if tree.depth >= 2 else "single"
            for obj in tree.objects():
                if isinstance(obj, KeyValuePair):
                    counts[f"kvp_{level}"] += 1
                elif isinstance(obj, ChoiceGroup):
                    counts[f"cg_{level}"] += 1
    return {key: counts[key] for key in STAT_KEYS}


def split_corpus(
    docs: Sequence[LabeledDoc], fraction: float, seed: int = 0
) -> Tuple[List[LabeledDoc], List[LabeledDoc]]:
    """
    确定性地切分为 (训练, 留出)

    留出比例为 fraction（向下取整）；文档少于 2 篇时不留出。
    """
    n = len(docs)
    n_hold = int(n * fraction) if n >= 2 else 0
    order = np.random.default_rng(seed).permutation(n)
    hold = set(int(i) for i in order[:n_hold])
    train = [d for i, d in enumerate(docs) if i not in hold]
    holdout = [d for i, d in enumerate(docs) if i in hold]
    return train, holdout
