"""
候选提取、最大生成树形图解码与最终输出单元测试
"""

import sys
from pathlib import Path

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent.parent / "src"
sys.path.insert(0, str(src_path))

import numpy as np
import pytest

from form_structure_parser.arbor import (
    VIRTUAL_ROOT,
    ArborError,
    build_rooted_graph,
    decode,
    max_arborescence,
    one_hot_scores,
)
from form_structure_parser.autograd import ParamStore, Tensor
from form_structure_parser.corpus import LabeledDoc
from form_structure_parser.models import RelationLabelSet
from form_structure_parser.proposer import (
    RelationClassifier,
    RelationProposal,
    classify_relations,
    coarse_types,
    column_softmax,
    top_k_proposals,
)
from form_structure_parser.rel_decoder import classify_final, refine_parents


# ============== 候选提取 ==============

class TestTopK:

    def test_ties_prefer_lower_parent(self):
        proposals = top_k_proposals(np.full((3, 3), 1 / 3), 2)
        assert [(p.child, p.parent, p.rank) for p in proposals] == [
            (0, 0, 1), (0, 1, 2), (1, 0, 1), (1, 1, 2), (2, 0, 1), (2, 1, 2),
        ]

    def test_k_larger_than_units(self):
        R = column_softmax(np.arange(4.0).reshape(2, 2))
        proposals = top_k_proposals(R, 5)
        assert len(proposals) == 4
        assert [p.parent for p in proposals] == [1, 0, 1, 0]

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError):
            top_k_proposals(np.eye(2), 0)

    def test_column_softmax_normalizes_columns(self):
        R = column_softmax(np.random.default_rng(0).normal(size=(4, 4)))
        assert np.allclose(R.sum(axis=0), 1.0)

    def test_coarse_types_root_only_on_diagonal(self):
        labels = RelationLabelSet.default()
        logits = np.zeros((3, 3, len(labels)))
        logits[..., labels.root_index] = 10.0
        logits[..., labels.index("inter-kvp")] = 1.0
        C = coarse_types(logits, labels.root_index)
        assert np.array_equal(np.diag(C), [labels.root_index] * 3)
        off = ~np.eye(3, dtype=bool)
        assert (C[off] == labels.index("inter-kvp")).all()

    def test_classify_relations_one_row_per_proposal(self):
        classifier = RelationClassifier(d_model=6, hidden=5, n_types=7)
        store = ParamStore()
        classifier.init_params(store, np.random.default_rng(0))
        F = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
        proposals = top_k_proposals(column_softmax(np.random.default_rng(2).normal(size=(4, 4))), 2)
        logits = classify_relations(classifier, store, F, proposals)
        assert logits.shape == (8, 7)
        assert np.array_equal(logits.data, classify_relations(classifier, store, F, proposals).data)
        full = classifier.all_pairs(store, F).data
        for row, p in zip(logits.data, proposals):
            assert np.allclose(row, full[p.parent, p.child], atol=1e-5)


# ============== 解码 ==============

class TestArborescence:

    def test_graph_edges(self):
        g = build_rooted_graph(np.full((3, 3), 1 / 3))
        assert g.n_units == 3
        # 根 -> 每个单元，加上单元间的全部有向边
        assert g.edge_count() == 3 + 3 * 2

    def test_cycle_is_broken(self):
        # 0 与 1 互为最佳父节点，2 的自指得分最高
        R = np.array([
            [0.05, 0.90, 0.05],
            [0.90, 0.05, 0.05],
            [0.05, 0.05, 0.90],
        ])
        parents = max_arborescence(build_rooted_graph(R))
        assert list(parents).count(VIRTUAL_ROOT) >= 1
        assert parents[2] == VIRTUAL_ROOT
        assert sorted(parents[:2].tolist()) in ([VIRTUAL_ROOT, 0], [VIRTUAL_ROOT, 1])

    def test_non_square_rejected(self):
        with pytest.raises(ArborError):
            build_rooted_graph(np.ones((2, 3)))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ArborError):
            build_rooted_graph(np.eye(2), mode="max")

    def test_type_matrix_shape_checked(self):
        labels = RelationLabelSet.default()
        with pytest.raises(ArborError):
            decode(np.eye(2), np.zeros((3, 3), dtype=int), labels)

    def test_one_hot_scores_of_hand_built_form(self, kvp_doc: LabeledDoc):
        labels = RelationLabelSet.default()
        ul = kvp_doc.labels(labels)
        R, C = one_hot_scores(ul)
        assert np.array_equal(R.sum(axis=0), np.ones(8))
        result = decode(R, C, labels, kvp_doc.doc)
        assert result.forest == kvp_doc.gt
        assert result.unified_labels(labels) == ul
        assert result.score == pytest.approx(0.0)

    def test_mixed_chain_marks_tree_malformed(self):
        labels = RelationLabelSet.default()
        R = np.zeros((3, 3))
        R[0, 0] = R[0, 1] = R[1, 2] = 1.0
        C = np.full((3, 3), labels.index("intra-key"))
        C[1, 2] = labels.index("intra-value")
        result = decode(R, C, labels)
        (tree,) = result.forest.trees
        assert tree.malformed
        assert result.diagnostics
        assert {f.role for f in tree.fields} == {"unknown"}
        assert result.forest.problems(3) == []


# ============== 最终输出 ==============

class TestFinalOutputs:

    @staticmethod
    def _proposals():
        return [
            RelationProposal(0, 0, 0.6, 1), RelationProposal(0, 1, 0.4, 2),
            RelationProposal(1, 0, 0.7, 1), RelationProposal(1, 1, 0.3, 2),
        ]

    def test_refine_ties_keep_higher_rank(self):
        final, probs = refine_parents(np.zeros((2, 2)), self._proposals())
        assert final.tolist() == [0, 0]
        assert np.allclose(probs, 0.5)

    def test_refine_picks_argmax(self):
        final, _ = refine_parents(np.array([[0.0, 3.0], [0.0, 3.0]]), self._proposals())
        assert final.tolist() == [1, 1]

    def test_classify_final_root_for_self_proposal(self):
        labels = RelationLabelSet.default()
        logits = np.zeros((4, len(labels)))
        logits[:, labels.root_index] = 5.0
        logits[:, labels.index("inter-cg")] = 1.0
        types = classify_final(logits, self._proposals(), [0, 2], labels.root_index)
        assert types.tolist() == [labels.root_index, labels.index("inter-cg")]
