"""
表单结构解析器 - 数据模型

定义文档、基本单元、统一关系标签空间、层级树与森林等数据类，以及全部异常类型。
所有数据类在构造后不可变。
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx


# ============== 异常类型 ==============

class FormParserError(Exception):
    """表单结构解析器错误基类"""
    pass


class DocumentError(FormParserError):
    """文档不合法"""
    pass


class LabelError(FormParserError):
    """标签与森林之间的映射错误"""
    pass


ROOT = "root"
INTRA_PREFIX = "intra-"
INTER_PREFIX = "inter-"

ROLE_KEY = "key"
ROLE_VALUE = "value"
ROLE_CGT = "cgt"
ROLE_CF = "cf"
ROLE_OTHER = "other"
ROLE_UNKNOWN = "unknown"

INTER_KVP = "inter-kvp"
INTER_CG = "inter-cg"


# ============== 枚举类型 ==============

class UnitKind(Enum):
    """基本单元类型"""
    TEXT_LINE = "TextLine"          # 文本行
    TEXT_WIDGET = "TextWidget"      # 填写区域
    CHOICE_WIDGET = "ChoiceWidget"  # 勾选框/单选框


class RelationCategory(Enum):
    """关系类别"""
    INTRA_FIELD = "IntraField"
    INTER_FIELD = "InterField"
    ROOT = "Root"


# ============== 文档相关数据类 ==============

@dataclass(frozen=True)
class BBox:
    """归一化到 [0,1] 的包围盒 (左上角, 右下角)"""
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def problems(self) -> List[str]:
        """返回违反的不变量"""
        found = []
        if self.x1 > self.x2 or self.y1 > self.y2:
            found.append("bbox order")
        if any(not (0.0 <= v <= 1.0) for v in (self.x1, self.y1, self.x2, self.y2)):
            found.append("bbox bounds")
        return found

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise DocumentError(f"bbox needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class BasicUnit:
    """基本单元：文本行、文本控件或选择控件"""
    id: int
    kind: UnitKind
    bbox: BBox
    text: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "bbox": self.bbox.to_list(),
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BasicUnit":
        return cls(
            id=int(data["id"]),
            kind=UnitKind(data["kind"]),
            bbox=BBox.from_list(data["bbox"]),
            text=data.get("text", ""),
        )


@dataclass(frozen=True)
class Document:
    """表单文档（单页）"""
    doc_id: str
    page_width: float
    page_height: float
    units: Tuple[BasicUnit, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "units", tuple(self.units))

    @property
    def n_units(self) -> int:
        return len(self.units)

    def unit(self, unit_id: int) -> BasicUnit:
        return self.units[unit_id]

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "page_width": self.page_width,
            "page_height": self.page_height,
            "units": [u.to_dict() for u in self.units],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Document":
        return cls(
            doc_id=str(data["doc_id"]),
            page_width=float(data["page_width"]),
            page_height=float(data["page_height"]),
            units=tuple(BasicUnit.from_dict(u) for u in data["units"]),
        )


# ============== 统一标签空间 ==============

@dataclass(frozen=True)
class RelationLabelSet:
    """
    统一关系标签空间

    有序的关系类型名称列表。名称以 ``intra-`` 开头为字段内关系，
    以 ``inter-`` 开头为字段间关系，``root`` 为自指关系。
    """
    names: Tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if names.count(ROOT) != 1:
            raise LabelError("label set must contain 'root' exactly once")
        if len(set(names)) != len(names):
            raise LabelError(f"duplicate relation type names in {list(names)}")
        for name in names:
            if name != ROOT and not name.startswith((INTRA_PREFIX, INTER_PREFIX)):
                raise LabelError(f"relation type '{name}' is neither intra-*, inter-* nor root")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @classmethod
    def default(cls) -> "RelationLabelSet":
        """合成表单领域的默认标签空间 (C=7)"""
        return cls((
            ROOT, "intra-key", "intra-value", "intra-cgt", "intra-cf", INTER_KVP, INTER_CG,
        ))

    def with_entities(self, entity_types: Iterable[str]) -> "RelationLabelSet":
        """追加实体抽取用的 intra-<entity> 类型"""
        extra = [n for n in dict.fromkeys(INTRA_PREFIX + e for e in entity_types) if n not in self._index]
        return RelationLabelSet(self.names + tuple(extra))

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    @property
    def root_index(self) -> int:
        return self._index[ROOT]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise LabelError(f"unknown relation type '{name}'") from None

    def name(self, idx: int) -> str:
        if not 0 <= idx < len(self.names):
            raise LabelError(f"relation type index {idx} out of range 0..{len(self.names) - 1}")
        return self.names[idx]

    def category(self, name: str) -> RelationCategory:
        self.index(name)
        if name == ROOT:
            return RelationCategory.ROOT
        if name.startswith(INTRA_PREFIX):
            return RelationCategory.INTRA_FIELD
        return RelationCategory.INTER_FIELD

    def intra_type(self, role: str) -> Optional[str]:
        """字段角色对应的 intra 类型，不存在时返回 None"""
        name = INTRA_PREFIX + role
        return name if name in self._index else None

    def to_list(self) -> List[str]:
        return list(self.names)


@dataclass(frozen=True)
class UnifiedLabels:
    """
    统一标签：每个单元的父单元索引与关系类型索引

    parent[j] == j 当且仅当 rel_type[j] 为 root；非自指边构成森林。
    构造时检查并强制以上约束。
    """
    parent: Tuple[int, ...]
    rel_type: Tuple[int, ...]
    label_set: RelationLabelSet = field(default_factory=RelationLabelSet.default, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        object.__setattr__(self, "rel_type", tuple(int(t) for t in self.rel_type))
        problems = self.problems()
        if problems:
            raise LabelError("; ".join(problems))

    def problems(self) -> List[str]:
        n = len(self.parent)
        if len(self.rel_type) != n:
            return [f"parent has {n} entries but rel_type has {len(self.rel_type)}"]
        found = []
        root = self.label_set.root_index
        for j, (p, t) in enumerate(zip(self.parent, self.rel_type)):
            if not 0 <= p < n:
                found.append(f"unit {j}: parent {p} out of range")
                continue
            if not 0 <= t < len(self.label_set):
                found.append(f"unit {j}: relation type {t} not in label set")
                continue
            if (p == j) != (t == root):
                found.append(f"unit {j}: self-parent iff root violated (parent={p}, type={t})")
        if found:
            return found
        graph = nx.DiGraph()
        graph.add_nodes_from(range(n))
        graph.add_edges_from((p, j) for j, p in enumerate(self.parent) if p != j)
        if not nx.is_directed_acyclic_graph(graph):
            cycle = [u for u, _ in nx.find_cycle(graph)]
            found.append(f"parent edges contain a cycle through units {cycle}")
        return found

    def __len__(self) -> int:
        return len(self.parent)

    def type_name(self, j: int) -> str:
        return self.label_set.name(self.rel_type[j])

    def to_dict(self) -> dict:
        return {
            "parent": list(self.parent),
            "rel_type": [self.label_set.name(t) for t in self.rel_type],
        }

    @classmethod
    def from_dict(cls, data: dict, label_set: RelationLabelSet) -> "UnifiedLabels":
        return cls(
            parent=tuple(data["parent"]),
            rel_type=tuple(label_set.index(t) for t in data["rel_type"]),
            label_set=label_set,
        )


# ============== 层级结构数据类 ==============

@dataclass(frozen=True)
class Field:
    """语义连贯的页面对象（字段）：按阅读顺序排列的成员单元"""
    role: str
    member_units: Tuple[int, ...]
    head_unit: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "member_units", tuple(self.member_units))
        if self.head_unit not in self.member_units:
            raise LabelError(f"head unit {self.head_unit} not among members {self.member_units}")

    def to_dict(self) -> dict:
        return {"role": self.role, "members": list(self.member_units), "head": self.head_unit}

    @classmethod
    def from_dict(cls, data: dict) -> "Field":
        members = tuple(int(m) for m in data["members"])
        return cls(role=data["role"], member_units=members, head_unit=int(data.get("head", members[0])))


@dataclass(frozen=True)
class FieldEdge:
    """字段头单元之间的有类型边"""
    parent_head: int
    child_head: int
    rel_type: str

    def to_dict(self) -> dict:
        return {"parent": self.parent_head, "child": self.child_head, "type": self.rel_type}

    @classmethod
    def from_dict(cls, data: dict) -> "FieldEdge":
        return cls(int(data["parent"]), int(data["child"]), data["type"])


@dataclass(frozen=True)
class KeyValuePair:
    """键值对结构对象"""
    key: Field
    value: Field
    depth: int


@dataclass(frozen=True)
class ChoiceGroup:
    """选择组结构对象（标题可选）"""
    title: Optional[Field]
    choices: Tuple[Field, ...]
    depth: int


@dataclass(frozen=True)
class HierTree:
    """
    层级树：字段为节点，字段间关系为边

    fields 按头单元排序，edges 按 (父, 子) 排序，因此相等比较与构造顺序无关。
    malformed 为 True 表示预测时出现了不一致的字段内链。
    """
    root_head: int
    fields: Tuple[Field, ...]
    edges: Tuple[FieldEdge, ...] = ()
    malformed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(sorted(self.fields, key=lambda f: f.head_unit)))
        object.__setattr__(
            self, "edges", tuple(sorted(self.edges, key=lambda e: (e.parent_head, e.child_head)))
        )

    def problems(self) -> List[str]:
        found = []
        heads = {f.head_unit: f for f in self.fields}
        if self.root_head not in heads:
            found.append(f"root head {self.root_head} is not a field head")
        seen: Dict[int, int] = {}
        for f in self.fields:
            for u in f.member_units:
                if u in seen:
                    found.append(f"unit {u} appears in two fields")
                seen[u] = f.head_unit
        graph = nx.DiGraph()
        graph.add_nodes_from(heads)
        for e in self.edges:
            if e.parent_head not in heads or e.child_head not in heads:
                found.append(f"edge {e.parent_head}->{e.child_head} does not join two field heads")
                continue
            graph.add_edge(e.parent_head, e.child_head)
        if not found and len(heads) > 1:
            if not nx.is_arborescence(graph):
                found.append("field graph is not a tree")
            elif graph.in_degree(self.root_head) != 0:
                found.append("root head is not the tree root")
        return found

    @property
    def units(self) -> Tuple[int, ...]:
        return tuple(sorted(u for f in self.fields for u in f.member_units))

    @property
    def root_field(self) -> Field:
        return self.field_of_head(self.root_head)

    def field_of_head(self, head: int) -> Field:
        for f in self.fields:
            if f.head_unit == head:
                return f
        raise LabelError(f"no field with head unit {head}")

    def children(self, head: int) -> List[FieldEdge]:
        return [e for e in self.edges if e.parent_head == head]

    @property
    def kind(self) -> str:
        """树的结构对象类别: kvp / cg / entity / other"""
        role = self.root_field.role
        if role in (ROLE_KEY, ROLE_VALUE):
            return "kvp"
        if role in (ROLE_CGT, ROLE_CF):
            return "cg"
        if role in (ROLE_OTHER, ROLE_UNKNOWN):
            return "other"
        return "entity"

    def objects(self) -> List[object]:
        """列出结构对象（键值对、选择组）及其嵌套深度，深度从 1 开始"""
        found: List[object] = []
        by_head = {f.head_unit: f for f in self.fields}

        def visit(head: int, depth: int) -> None:
            fld = by_head[head]
            kids = self.children(head)
            kvp_kids = [by_head[e.child_head] for e in kids if e.rel_type == INTER_KVP]
            cg_kids = [by_head[e.child_head] for e in kids if e.rel_type == INTER_CG]
            if fld.role == ROLE_KEY:
                for value in kvp_kids:
                    if value.role == ROLE_VALUE:
                        found.append(KeyValuePair(fld, value, depth))
            if fld.role == ROLE_CGT:
                found.append(ChoiceGroup(fld, tuple(c for c in cg_kids if c.role == ROLE_CF), depth))
            elif fld.role == ROLE_CF and head == self.root_head and cg_kids:
                siblings = tuple(c for c in cg_kids if c.role == ROLE_CF)
                found.append(ChoiceGroup(None, (fld,) + siblings, depth))
            for e in kids:
                child = by_head[e.child_head]
                nested = (
                    (fld.role == ROLE_VALUE and child.role == ROLE_KEY)
                    or (fld.role == ROLE_CF and child.role == ROLE_CGT)
                )
                visit(e.child_head, depth + 1 if nested else depth)

        visit(self.root_head, 1)
        return found

    @property
    def depth(self) -> int:
        """结构对象的最大嵌套深度；不含结构对象时为 0"""
        return max((o.depth for o in self.objects()), default=0)

    def to_dict(self) -> dict:
        return {
            "root": self.root_head,
            "malformed": self.malformed,
            "fields": [f.to_dict() for f in self.fields],
            "edges": [e.to_dict() for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HierTree":
        return cls(
            root_head=int(data["root"]),
            fields=tuple(Field.from_dict(f) for f in data["fields"]),
            edges=tuple(FieldEdge.from_dict(e) for e in data.get("edges", [])),
            malformed=bool(data.get("malformed", False)),
        )


@dataclass(frozen=True)
class Forest:
    """层级树森林；树按根头单元排序，比较时与顺序无关"""
    trees: Tuple[HierTree, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "trees", tuple(sorted(self.trees, key=lambda t: t.root_head)))

    def __len__(self) -> int:
        return len(self.trees)

    def __iter__(self):
        return iter(self.trees)

    @property
    def fields(self) -> List[Field]:
        return [f for t in self.trees for f in t.fields]

    def problems(self, n_units: Optional[int] = None) -> List[str]:
        found = []
        seen: Dict[int, int] = {}
        for t in self.trees:
            found.extend(f"tree {t.root_head}: {p}" for p in t.problems())
            for u in t.units:
                if u in seen:
                    found.append(f"unit {u} appears in trees {seen[u]} and {t.root_head}")
                seen[u] = t.root_head
        if n_units is not None:
            unknown = sorted(u for u in seen if not 0 <= u < n_units)
            if unknown:
                found.append(f"unknown unit ids {unknown}")
            missing = sorted(set(range(n_units)) - set(seen))
            if missing:
                found.append(f"units {missing} are not covered by any tree")
        return found

    def to_dict(self) -> dict:
        return {"trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, data: dict) -> "Forest":
        return cls(tuple(HierTree.from_dict(t) for t in data.get("trees", [])))
