"""
表单结构解析器 - 导出

预测结果 JSON、Graphviz DOT 与对齐文本表格。
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from loguru import logger

from .corpus import CorpusFormatError
from .metrics import CorpusReport
from .models import Document, Forest, RelationLabelSet


# ============== 预测文件 ==============

def predictions_to_dict(predictions: Sequence[Any], label_set: RelationLabelSet) -> dict:
    """predictions 为带 to_dict() 的预测结果"""
    return {"schema": label_set.to_list(), "predictions": [p.to_dict() for p in predictions]}


def save_predictions(predictions: Sequence[Any], label_set: RelationLabelSet, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(predictions_to_dict(predictions, label_set), ensure_ascii=False, indent=1)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info("saved {} predictions to {}", len(predictions), path)
    return path


def predictions_from_dict(data: dict, proposal: bool = False) -> List[Tuple[str, Forest]]:
    """
    解析预测文件

    Args:
        proposal: 为 True 时读取仅候选阶段的森林

    Raises:
        CorpusFormatError: 结构不符
    """
    if not isinstance(data, dict) or not isinstance(data.get("predictions"), list):
        raise CorpusFormatError("$.predictions: missing or not a list")
    key = "proposal_trees" if proposal else "trees"
    out = []
    for i, item in enumerate(data["predictions"]):
        try:
            out.append((str(item["doc_id"]), Forest.from_dict({"trees": item[key]})))
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"$.predictions[{i}]: malformed ({type(e).__name__}: {e})") from None
    return out


def is_predictions_file(data: Any) -> bool:
    return isinstance(data, dict) and "predictions" in data


# ============== DOT ==============

def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def forest_to_dot(forest: Forest, doc: Optional[Document] = None, name: str = "forest") -> str:
    """
    每个字段一个节点（标签 "角色: 文本"），每条字段边一条有向边（标签为关系类型）
    """
    lines = [f"digraph {_dot_quote(name)} {{", "  rankdir=TB;", "  node [shape=box];"]
    for t, tree in enumerate(forest):
        lines.append(f"  subgraph cluster_{t} {{")
        lines.append(f"    label={_dot_quote(f'{tree.kind} #{t}')};")
        for fld in tree.fields:
            if doc is not None:
                text = " ".join(doc.unit(u).text for u in fld.member_units if doc.unit(u).text)
            else:
                text = ",".join(str(u) for u in fld.member_units)
            label = f"{fld.role}: {text}" if text else fld.role
            lines.append(f"    f{fld.head_unit} [label={_dot_quote(label)}];")
        for edge in tree.edges:
            lines.append(
                f"    f{edge.parent_head} -> f{edge.child_head} [label={_dot_quote(edge.rel_type)}];"
            )
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ============== 文本表格 ==============

def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """对齐列的纯文本表格；数字列右对齐"""
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, c in enumerate(row):
            widths[i] = max(widths[i], len(c))
    numeric = [all(isinstance(row[i], (int, float)) for row in rows) if rows else False for i in range(len(headers))]

    def fmt(row: Sequence[str]) -> str:
        parts = [c.rjust(widths[i]) if numeric[i] else c.ljust(widths[i]) for i, c in enumerate(row)]
        return "  ".join(parts).rstrip()

    out = [fmt(list(headers)), "  ".join("-" * w for w in widths)]
    out.extend(fmt(row) for row in cells)
    return "\n".join(out) + "\n"


def stats_table(stats: Dict[str, int]) -> str:
    return format_table(["statistic", "count"], list(stats.items()))


def report_table(report: CorpusReport) -> str:
    """评估报告：F1 分类别表、TEDS 表；有候选阶段结果时并列显示"""
    proposal = report.proposal
    headers = ["metric", "refined"] + (["proposal"] if proposal is not None else [])

    def row(name: str, value: float, other: Optional[float]) -> list:
        return [name, value] + ([other] if proposal is not None else [])

    rows = [
        row("f1_field", report.field.micro.f1, proposal.field.micro.f1 if proposal else None),
        row("f1_field_macro", report.field.macro_f1, proposal.field.macro_f1 if proposal else None),
        row("f1_tree", report.tree.micro.f1, proposal.tree.micro.f1 if proposal else None),
        row("teds_all", report.teds_all, proposal.teds_all if proposal else None),
    ]
    for kind in sorted(report.teds):
        rows.append(row(f"teds_{kind}", report.teds[kind], proposal.teds_of(kind) if proposal else None))
    for key in sorted(report.teds_by_level):
        other = proposal.teds_by_level.get(key, 0.0) if proposal else None
        rows.append(row(f"teds_{key}", report.teds_by_level[key], other))
    text = f"documents: {report.documents}\n"
    if report.coverage is not None:
        text += f"proposal coverage: {report.coverage:.4f}\n"
    text += format_table(headers, rows)

    per_class = [
        [name, s.tp, s.fp, s.fn, s.precision, s.recall, s.f1]
        for name, s in sorted(report.field.per_class.items())
    ]
    if per_class:
        text += "\nfield-level per role\n"
        text += format_table(["role", "tp", "fp", "fn", "precision", "recall", "f1"], per_class)
    return text
