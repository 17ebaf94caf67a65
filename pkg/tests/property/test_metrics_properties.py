"""
评估指标属性测试

Feature: form-structure-parser, Property 5: 树编辑距离与递归定义一致
Feature: form-structure-parser, Property 6: TEDS 对称、自相似且有界
Feature: form-structure-parser, Property 7: 预测等于真值时全部指标为 1
Validates: metrics.tree_edit_distance, metrics.teds, metrics.corpus_eval
"""

import sys
from functools import lru_cache
from pathlib import Path

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent.parent / "src"
sys.path.insert(0, str(src_path))

from hypothesis import given, settings, strategies as st

from form_structure_parser.form_generator import generate_corpus
from form_structure_parser.metrics import (
    TedsNode,
    corpus_eval,
    field_f1,
    teds_nodes,
    tree_edit_distance,
    tree_f1,
)
from tests.conftest import small_gen_config


# ============== 策略定义 ==============

@st.composite
def teds_tree_strategy(draw, max_nodes: int = 6):
    """随机有序带标签树：节点 i 的父节点从 0..i-1 中选取"""
    n = draw(st.integers(min_value=1, max_value=max_nodes))
    labels = [draw(st.sampled_from(["a", "b", "c"])) for _ in range(n)]
    nodes = [TedsNode(label) for label in labels]
    for i in range(1, n):
        parent = draw(st.integers(min_value=0, max_value=i - 1))
        nodes[parent].children.append(nodes[i])
    return nodes[0]


def _freeze(node: TedsNode):
    return (node.label, tuple(_freeze(c) for c in node.children))


def _size(forest) -> int:
    return sum(1 + _size(children) for _, children in forest)


@lru_cache(maxsize=None)
def oracle_forest_distance(f, g) -> int:
    """有序森林编辑距离的递归定义（每次处理最右侧的根）"""
    if not f and not g:
        return 0
    if not f:
        return _size(g)
    if not g:
        return _size(f)
    (lv, cv), (lw, cw) = f[-1], g[-1]
    return min(
        oracle_forest_distance(f[:-1] + cv, g) + 1,
        oracle_forest_distance(f, g[:-1] + cw) + 1,
        oracle_forest_distance(cv, cw) + oracle_forest_distance(f[:-1], g[:-1]) + (lv != lw),
    )


# ============== 属性测试 ==============

class TestTreeEditDistance:
    """
    Property 5: 树编辑距离与递归定义一致

    For any 两棵不超过 6 个节点的有序树，树编辑距离等于递归定义的最小编辑代价。

    Feature: form-structure-parser, Property 5: 树编辑距离与递归定义一致
    """

    @given(a=teds_tree_strategy(), b=teds_tree_strategy())
    @settings(max_examples=300, deadline=None)
    def test_matches_recursive_oracle(self, a: TedsNode, b: TedsNode):
        expected = oracle_forest_distance((_freeze(a),), (_freeze(b),))
        assert tree_edit_distance(a, b) == expected


class TestTedsInvariants:
    """
    Property 6: TEDS 对称、自相似且有界

    Feature: form-structure-parser, Property 6: TEDS 对称、自相似且有界
    """

    @given(a=teds_tree_strategy(), b=teds_tree_strategy())
    @settings(max_examples=300, deadline=None)
    def test_symmetric_and_bounded(self, a: TedsNode, b: TedsNode):
        ab = teds_nodes(a, b)
        assert ab == teds_nodes(b, a)
        assert 0.0 <= ab <= 1.0
        assert teds_nodes(a, a) == 1.0


class TestPerfectPrediction:
    """
    Property 7: 预测等于真值时全部指标为 1

    Feature: form-structure-parser, Property 7: 预测等于真值时全部指标为 1
    """

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=15, deadline=None)
    def test_gt_against_itself(self, seed: int):
        docs = generate_corpus(small_gen_config(seed=seed, n_docs=3))
        gts = [item.gt for item in docs]
        report = corpus_eval(gts, gts, [item.doc for item in docs])

        assert report.field.micro.f1 == 1.0
        assert report.tree.micro.f1 == 1.0
        assert report.teds_all == 1.0
        assert all(v == 1.0 for v in report.teds.values())
        for item in docs:
            assert field_f1(item.gt, item.gt).micro.fp == 0
            assert tree_f1(item.gt, item.gt).micro.fn == 0
