"""
评估指标单元测试（在手工构造的表单上计算期望值）
"""

import sys
from pathlib import Path

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent.parent / "src"
sys.path.insert(0, str(src_path))

import pytest

from form_structure_parser.corpus import LabeledDoc
from form_structure_parser.metrics import (
    MetricsError,
    TedsNode,
    corpus_eval,
    field_f1,
    field_tree,
    normalize_text,
    pair_trees,
    teds,
    teds_nodes,
    tree_edit_distance,
    tree_f1,
)
from form_structure_parser.models import BBox, BasicUnit, Document, Field, FieldEdge, Forest, HierTree, UnitKind


def _split_choice_prediction(gt: Forest) -> Forest:
    """把第一个选项拆成控件 + 独立文本的预测"""
    kvp, _, other = gt.trees
    cg = HierTree(
        2,
        (Field("cgt", (2,), 2), Field("cf", (3,), 3), Field("cf", (5, 6), 5)),
        (FieldEdge(2, 3, "inter-cg"), FieldEdge(2, 5, "inter-cg")),
    )
    return Forest((kvp, cg, HierTree(4, (Field("other", (4,), 4),)), other))


class TestF1:

    def test_split_choice_counts(self, kvp_doc: LabeledDoc):
        pred = _split_choice_prediction(kvp_doc.gt)
        fields = field_f1(pred, kvp_doc.gt).micro
        assert (fields.tp, fields.fp, fields.fn) == (5, 2, 1)
        assert fields.precision == pytest.approx(5 / 7)
        assert fields.recall == pytest.approx(5 / 6)

        trees = tree_f1(pred, kvp_doc.gt)
        assert trees.per_class["kvp"].f1 == 1.0
        assert trees.per_class["cg"].tp == 0
        assert (trees.per_class["other"].tp, trees.per_class["other"].fp) == (1, 1)

    def test_empty_prediction_has_zero_recall(self, kvp_doc: LabeledDoc):
        report = field_f1(Forest(), kvp_doc.gt)
        assert report.micro.recall == 0.0
        assert report.micro.f1 == 0.0
        assert report.micro.fn == 6

    def test_different_units_rejected(self, kvp_doc: LabeledDoc):
        pred = Forest((HierTree(0, (Field("other", (0,), 0),)),))
        with pytest.raises(MetricsError):
            tree_f1(pred, kvp_doc.gt)


class TestTeds:

    def test_normalize_text(self):
        assert normalize_text("  Date of\tBIRTH ") == "date of birth"

    def test_field_tree_labels(self, kvp_doc: LabeledDoc):
        cg = kvp_doc.gt.trees[1]
        node = field_tree(cg, kvp_doc.doc)
        assert node.label == ("cgt", "gender?")
        assert [c.label for c in node.children] == [("cf", "male"), ("cf", "female")]
        assert field_tree(cg).children[0].label == ("cf", "3 4")

    def test_relabel_costs_one(self, kvp_doc: LabeledDoc):
        pred = _split_choice_prediction(kvp_doc.gt)
        assert teds(pred.trees[1], kvp_doc.gt.trees[1], kvp_doc.doc) == pytest.approx(2 / 3)

    def test_insert_and_delete(self):
        a = TedsNode("k", [TedsNode("v")])
        b = TedsNode("k", [TedsNode("x", [TedsNode("v")])])
        assert tree_edit_distance(a, b) == 1
        assert teds_nodes(a, b) == pytest.approx(2 / 3)

    def test_children_follow_reading_order(self):
        line = UnitKind.TEXT_LINE
        doc = Document("swapped", 850.0, 1100.0, (
            BasicUnit(0, line, BBox(0.05, 0.05, 0.20, 0.062), "Pick one"),
            BasicUnit(1, line, BBox(0.50, 0.10, 0.60, 0.112), "B"),
            BasicUnit(2, line, BBox(0.10, 0.10, 0.20, 0.112), "A"),
        ))
        cg = HierTree(
            0,
            (Field("cgt", (0,), 0), Field("cf", (1,), 1), Field("cf", (2,), 2)),
            (FieldEdge(0, 1, "inter-cg"), FieldEdge(0, 2, "inter-cg")),
        )
        assert [c.label for c in field_tree(cg, doc).children] == [("cf", "a"), ("cf", "b")]
        assert [c.label for c in field_tree(cg).children] == [("cf", "1"), ("cf", "2")]

    def test_score_never_negative(self):
        chain = TedsNode("a", [TedsNode("b", [TedsNode("c", [TedsNode("d")])])])
        star = TedsNode("w", [TedsNode("x"), TedsNode("y"), TedsNode("z")])
        assert tree_edit_distance(chain, star) == 6
        assert teds_nodes(chain, star) == 0.0
        assert teds_nodes(star, chain) == 0.0

    def test_greedy_pairing_leaves_unmatched_at_zero(self, kvp_doc: LabeledDoc):
        kvp, cg, other = kvp_doc.gt.trees
        pairs = pair_trees(Forest((kvp,)), kvp_doc.gt, kvp_doc.doc)
        assert pairs[0] == (0, 0, 1.0)
        assert pairs[1][1:] == (None, 0.0)
        assert pairs[2][1:] == (None, 0.0)


class TestCorpusEval:

    def test_hand_built_report(self, kvp_doc: LabeledDoc):
        pred = _split_choice_prediction(kvp_doc.gt)
        report = corpus_eval([pred], [kvp_doc.gt], [kvp_doc.doc])
        assert report.documents == 1
        assert report.teds == pytest.approx({"kvp": 1.0, "cg": 2 / 3, "other": 1.0})
        assert report.teds_by_level["cg_single"] == pytest.approx(2 / 3)
        assert report.teds_all == pytest.approx(8 / 9)
        data = report.to_dict()
        assert data["f1_field"] == pytest.approx(report.field.micro.f1)
        assert "proposal" not in data

    def test_parallel_matches_sequential(self, kvp_doc: LabeledDoc):
        pred = _split_choice_prediction(kvp_doc.gt)
        preds, gts = [pred, kvp_doc.gt] * 3, [kvp_doc.gt] * 6
        one = corpus_eval(preds, gts, [kvp_doc.doc] * 6, jobs=1).to_dict()
        many = corpus_eval(preds, gts, [kvp_doc.doc] * 6, jobs=4).to_dict()
        assert one == many

    def test_length_mismatch(self, kvp_doc: LabeledDoc):
        with pytest.raises(MetricsError):
            corpus_eval([kvp_doc.gt], [kvp_doc.gt, kvp_doc.gt])
