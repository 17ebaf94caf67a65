"""
表单结构解析器 - 合成表单生成器

按配置确定性地生成带真实层级森林的合成表单。布局编码结构：
值字段位于键的右侧或下方，选择控件紧挨在选项文本左侧，嵌套结构缩进在父结构的范围内。
单元 id 按阅读顺序分配。
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .config import GenConfig
from .corpus import LabeledDoc
from .labels import reading_order, validate_document
from .models import (
    INTER_CG,
    INTER_KVP,
    ROLE_CF,
    ROLE_CGT,
    ROLE_KEY,
    ROLE_OTHER,
    ROLE_VALUE,
    BasicUnit,
    BBox,
    Document,
    Field,
    FieldEdge,
    Forest,
    FormParserError,
    HierTree,
    RelationLabelSet,
    UnitKind,
)


class GenerationError(FormParserError):
    """在重试上限内无法生成可行布局"""
    pass


# ============== 词表 ==============

KEY_WORDS = (
    "name", "first", "last", "date", "birth", "address", "street", "city", "state", "zip",
    "phone", "email", "account", "number", "policy", "member", "employer", "occupation",
    "amount", "total", "signature", "country", "insurance", "patient", "provider", "reference",
)
VALUE_WORDS = (
    "john", "maria", "smith", "garcia", "lee", "main", "oak", "avenue", "springfield",
    "acme", "corp", "chef", "nurse", "engineer", "n/a", "usa", "canada", "blue", "cross",
)
QUESTION_WORDS = (
    "marital", "status", "preferred", "contact", "method", "payment", "type", "coverage",
    "smoking", "employment", "frequency", "gender", "language", "plan", "visit", "reason",
)
CHOICE_WORDS = (
    "yes", "no", "single", "married", "divorced", "other", "male", "female", "daily", "weekly",
    "monthly", "cash", "check", "card", "email", "phone", "mail", "full-time", "part-time",
    "english", "spanish", "basic", "premium", "none",
)
OTHER_LINES = (
    "please print clearly", "for office use only", "section a", "section b",
    "see instructions on reverse", "all fields are required", "page 1 of 1",
    "return this form to the front desk", "confidential",
)

MARGIN = 0.04
LINE_H = 0.012
ROW = 0.017
BLOCK_GAP = 0.012
INDENT = 0.04
CHAR_W = 0.0065
BOX = 0.011


class _Overflow(Exception):
    pass


class _Layout:
    """单个文档的布局构建器；单元与字段使用临时编号，最后按阅读顺序重编号"""

    def __init__(self, cfg: GenConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.units: List[Tuple[UnitKind, List[float], str]] = []
        self.fields: List[Tuple[str, List[int]]] = []
        self.edges: List[Tuple[int, int, str]] = []
        self.roots: List[int] = []
        self.y = MARGIN

    # ---------- 基本元素 ----------

    def words(self, vocab: Sequence[str], lo: int, hi: int) -> str:
        n = int(self.rng.integers(lo, hi + 1))
        return " ".join(str(vocab[int(i)]) for i in self.rng.integers(0, len(vocab), size=n))

    def _drop_tokens(self, text: str) -> str:
        p = self.cfg.token_dropout
        if p <= 0 or not text:
            return text
        kept = [tok for tok in text.split() if self.rng.random() >= p]
        return " ".join(kept)

    def unit(self, kind: UnitKind, x1: float, y1: float, w: float, h: float, text: str = "") -> int:
        if x1 + w > 1.0 - MARGIN or y1 + h > 1.0 - MARGIN:
            raise _Overflow(f"unit at ({x1:.3f}, {y1:.3f}) leaves the page")
        self.units.append((kind, [x1, y1, x1 + w, y1 + h], self._drop_tokens(text)))
        return len(self.units) - 1

    def text_line(self, x1: float, y1: float, text: str) -> int:
        return self.unit(UnitKind.TEXT_LINE, x1, y1, CHAR_W * max(len(text), 1), LINE_H, text)

    def field(self, role: str, units: List[int]) -> int:
        self.fields.append((role, units))
        return len(self.fields) - 1

    def link(self, parent: int, child: int, rel_type: str) -> None:
        self.edges.append((parent, child, rel_type))

    def right_edge(self, units: Sequence[int]) -> float:
        return max(self.units[u][1][2] for u in units)

    # ---------- 结构块 ----------

    def kvp(self, x0: float, depth: int) -> int:
        """键值对；返回键字段编号"""
        rng, cfg = self.rng, self.cfg
        if rng.random() < 0.2:
            key_lines = [self.words(KEY_WORDS, 1, 2).title(), self.words(KEY_WORDS, 1, 2).title() + ":"]
        else:
            key_lines = [self.words(KEY_WORDS, 1, 3).title() + ":"]
        top = self.y
        key_units = []
        for line in key_lines:
            key_units.append(self.text_line(x0, self.y, line))
            self.y += ROW
        key_f = self.field(ROLE_KEY, key_units)

        if depth < cfg.max_depth and rng.random() < cfg.p_nest:
            vx, vy = x0 + INDENT, self.y
            value_u = self.unit(UnitKind.TEXT_WIDGET, vx, vy, 0.1, LINE_H)
            value_f = self.field(ROLE_VALUE, [value_u])
            self.link(key_f, value_f, INTER_KVP)
            self.y = vy + ROW
            first_nested = len(self.units)
            for _ in range(int(rng.integers(1, 3))):
                self.link(value_f, self.kvp(vx + INDENT / 2, depth + 1), INTER_KVP)
            nested = list(range(first_nested, len(self.units)))
            right = max(self.right_edge(nested), vx + 0.1) + 0.01
            bottom = self.y - ROW + LINE_H + 0.004
            if right > 1.0 - MARGIN or bottom > 1.0 - MARGIN:
                raise _Overflow("nested value widget leaves the page")
            self.units[value_u] = (UnitKind.TEXT_WIDGET, [vx, vy, right, bottom], "")
            self.y = bottom + (ROW - LINE_H)
            return key_f

        below = rng.random() < 0.4
        vx = x0 + INDENT / 2 if below else self.right_edge(key_units) + 0.02
        vy = self.y if below else top
        if rng.random() < 0.5:
            value_units = [self.unit(UnitKind.TEXT_WIDGET, vx, vy, float(rng.uniform(0.12, 0.3)), LINE_H)]
        else:
            n_lines = 1 if rng.random() < 0.7 else 2
            value_units = [
                self.text_line(vx, vy + i * ROW, self.words(VALUE_WORDS, 1, 3)) for i in range(n_lines)
            ]
        value_f = self.field(ROLE_VALUE, value_units)
        self.link(key_f, value_f, INTER_KVP)
        self.y = max(self.y, vy + len(value_units) * ROW)
        return key_f

    def choice_group(self, x0: float, depth: int, titled: bool = True) -> int:
        """选择组；返回树根字段编号（标题，或无标题时的第一个选项）"""
        rng, cfg = self.rng, self.cfg
        title_f: Optional[int] = None
        if titled:
            ending = "?" if rng.random() < 0.5 else ":"
            lines = [self.words(QUESTION_WORDS, 1, 3).capitalize()]
            if rng.random() < 0.15:
                lines.append(self.words(QUESTION_WORDS, 1, 2))
            lines[-1] += ending
            title_units = []
            for line in lines:
                title_units.append(self.text_line(x0, self.y, line))
                self.y += ROW
            title_f = self.field(ROLE_CGT, title_units)

        lo, hi = cfg.choices_per_group
        n = int(rng.integers(max(lo, 2 if not titled else 1), max(hi, 2 if not titled else 1) + 1))
        options = [CHOICE_WORDS[int(i)] for i in rng.choice(len(CHOICE_WORDS), size=n, replace=False)]
        horizontal = rng.random() < 0.3
        cx = x0 + INDENT
        choices: List[int] = []
        for opt in options:
            widget = self.unit(UnitKind.CHOICE_WIDGET, cx, self.y, BOX, BOX)
            label = self.text_line(cx + BOX + 0.006, self.y, opt.capitalize())
            cf = self.field(ROLE_CF, [widget, label])
            choices.append(cf)
            if horizontal:
                cx = self.right_edge([label]) + 0.03
                continue
            self.y += ROW
            if depth < cfg.max_depth and rng.random() < cfg.p_nest:
                self.link(cf, self.choice_group(x0 + 2 * INDENT, depth + 1, titled=True), INTER_CG)
        if horizontal:
            self.y += ROW

        if title_f is not None:
            for cf in choices:
                self.link(title_f, cf, INTER_CG)
            return title_f
        for cf in choices[1:]:
            self.link(choices[0], cf, INTER_CG)
        return choices[0]

    def entity(self, x0: float, entity_type: str) -> int:
        n_lines = int(self.rng.integers(2, 4))
        units = []
        for _ in range(n_lines):
            units.append(self.text_line(x0, self.y, self.words(VALUE_WORDS, 2, 4)))
            self.y += ROW
        return self.field(entity_type, units)

    def other(self, x0: float) -> int:
        text = OTHER_LINES[int(self.rng.integers(0, len(OTHER_LINES)))]
        u = self.text_line(x0, self.y, text.upper() if self.rng.random() < 0.3 else text)
        self.y += ROW
        return self.field(ROLE_OTHER, [u])

    # ---------- 组装 ----------

    def build(self) -> None:
        rng, cfg = self.rng, self.cfg
        blocks: List[str] = []
        for kind, (lo, hi) in (
            ("kvp", cfg.kvps), ("cg", cfg.choice_groups), ("entity", cfg.entities), ("other", cfg.others),
        ):
            blocks.extend([kind] * int(rng.integers(lo, hi + 1)))
        for i in rng.permutation(len(blocks)):
            kind = blocks[int(i)]
            if kind == "kvp":
                root = self.kvp(MARGIN, 1)
            elif kind == "cg":
                root = self.choice_group(MARGIN, 1, titled=rng.random() >= cfg.p_titleless)
            elif kind == "entity":
                etype = cfg.entity_types[int(rng.integers(0, len(cfg.entity_types)))]
                root = self.entity(MARGIN, etype)
            else:
                root = self.other(MARGIN)
            self.roots.append(root)
            self.y += BLOCK_GAP

    def jitter(self) -> None:
        scale = self.cfg.jitter
        if scale <= 0:
            return
        for pos, (kind, box, text) in enumerate(self.units):
            noisy = np.clip(np.asarray(box) + self.rng.normal(0.0, scale, size=4), 0.0, 1.0)
            x1, x2 = sorted(noisy[[0, 2]])
            y1, y2 = sorted(noisy[[1, 3]])
            self.units[pos] = (kind, [float(x1), float(y1), float(x2), float(y2)], text)

    def to_labeled_doc(self, doc_id: str) -> LabeledDoc:
        cfg = self.cfg
        draft = Document(
            doc_id,
            cfg.page_width,
            cfg.page_height,
            tuple(BasicUnit(i, k, BBox(*box), text) for i, (k, box, text) in enumerate(self.units)),
        )
        new_id = {old: pos for pos, old in enumerate(reading_order(draft))}
        units = sorted(
            (BasicUnit(new_id[u.id], u.kind, u.bbox, u.text) for u in draft.units), key=lambda u: u.id
        )
        doc = Document(doc_id, cfg.page_width, cfg.page_height, tuple(units))

        fields = []
        for role, members in self.fields:
            ids = sorted(new_id[m] for m in members)
            fields.append(Field(role, tuple(ids), ids[0]))
        children: Dict[int, List[Tuple[int, str]]] = {}
        for parent, child, rel in self.edges:
            children.setdefault(parent, []).append((child, rel))

        trees = []
        for root in self.roots:
            tree_fields, tree_edges = [], []
            stack = [root]
            while stack:
                f = stack.pop()
                tree_fields.append(fields[f])
                for child, rel in children.get(f, []):
                    tree_edges.append(FieldEdge(fields[f].head_unit, fields[child].head_unit, rel))
                    stack.append(child)
            trees.append(HierTree(fields[root].head_unit, tuple(tree_fields), tuple(tree_edges)))
        return LabeledDoc(doc, Forest(tuple(trees)))


# ============== 语料生成 ==============

def label_set_for(cfg: GenConfig) -> RelationLabelSet:
    return RelationLabelSet.default().with_entities(cfg.entity_types)


def generate_document(cfg: GenConfig, idx: int) -> LabeledDoc:
    """
    生成第 idx 篇文档；子随机种子为 seed ^ idx

    Raises:
        GenerationError: 重试 max_retries 次后仍无法得到可行布局
    """
    rng = np.random.default_rng(cfg.seed ^ idx)
    doc_id = f"synth-{cfg.seed}-{idx:05d}"
    lo, hi = cfg.units_per_doc
    reason = ""
    for attempt in range(cfg.max_retries):
        layout = _Layout(cfg, rng)
        try:
            layout.build()
        except _Overflow as e:
            reason = str(e)
            logger.debug("{}: attempt {} resampled ({})", doc_id, attempt + 1, reason)
            continue
        if not lo <= len(layout.units) <= hi:
            reason = f"{len(layout.units)} units outside [{lo}, {hi}]"
            logger.debug("{}: attempt {} resampled ({})", doc_id, attempt + 1, reason)
            continue
        layout.jitter()
        item = layout.to_labeled_doc(doc_id)
        problems = validate_document(item.doc)
        if problems:
            raise GenerationError(f"{doc_id}: generated an invalid document: {problems}")
        return item
    raise GenerationError(f"{doc_id}: no feasible layout after {cfg.max_retries} attempts (last: {reason})")


def generate_corpus(cfg: GenConfig, jobs: int = 1) -> List[LabeledDoc]:
    """
    确定性地生成语料；jobs > 1 时按文档并行，结果顺序与单线程一致
    """
    problems = cfg.validate()
    if problems:
        raise GenerationError("invalid generator configuration: " + "; ".join(problems))
    if jobs > 1 and cfg.n_docs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            docs = list(pool.map(lambda i: generate_document(cfg, i), range(cfg.n_docs)))
    else:
        docs = [generate_document(cfg, i) for i in range(cfg.n_docs)]
    logger.info("generated {} documents (seed {})", len(docs), cfg.seed)
    return docs
