"""
合成表单生成器属性测试

Feature: form-structure-parser, Property 16: 生成器确定且输出合法文档
Validates: form_generator.generate_document, form_generator.generate_corpus, labels.reading_order
"""

import sys
from pathlib import Path

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent.parent / "src"
sys.path.insert(0, str(src_path))

from hypothesis import given, settings, strategies as st

from form_structure_parser.config import GenConfig
from form_structure_parser.form_generator import generate_corpus, generate_document, label_set_for
from form_structure_parser.labels import reading_order, validate_document
from form_structure_parser.models import ROLE_CF, ROLE_KEY, ROLE_VALUE


# ============== 策略定义 ==============

@st.composite
def gen_config_strategy(draw):
    with_entities = draw(st.booleans())
    return GenConfig(
        seed=draw(st.integers(min_value=0, max_value=100_000)),
        n_docs=draw(st.integers(min_value=1, max_value=3)),
        units_per_doc=(1, 120),
        kvps=(1, 4),
        choice_groups=(0, 2),
        entities=(0, 2) if with_entities else (0, 0),
        others=(0, 2),
        entity_types=("address", "date") if with_entities else (),
        max_depth=draw(st.integers(min_value=1, max_value=3)),
        p_nest=draw(st.sampled_from([0.0, 0.4, 0.8])),
        token_dropout=draw(st.sampled_from([0.0, 0.3])),
    )


# ============== 属性测试 ==============

class TestGenerator:
    """
    Property 16: 生成器确定且输出合法文档

    For any 生成配置，相同 (seed, idx) 得到相同文档；文档与真实森林均合法，
    单元数在配置范围内，单元 id 即阅读顺序。

    Feature: form-structure-parser, Property 16: 生成器确定且输出合法文档
    """

    @given(cfg=gen_config_strategy(), idx=st.integers(min_value=0, max_value=20))
    @settings(max_examples=40, deadline=None)
    def test_deterministic(self, cfg: GenConfig, idx: int):
        labels = label_set_for(cfg)
        first = generate_document(cfg, idx)
        second = generate_document(cfg, idx)
        assert first.to_dict(labels) == second.to_dict(labels)

    @given(cfg=gen_config_strategy(), idx=st.integers(min_value=0, max_value=20))
    @settings(max_examples=40, deadline=None)
    def test_valid_document_and_forest(self, cfg: GenConfig, idx: int):
        item = generate_document(cfg, idx)
        lo, hi = cfg.units_per_doc
        assert validate_document(item.doc) == []
        assert lo <= item.doc.n_units <= hi
        assert item.gt.problems(item.doc.n_units) == []
        assert reading_order(item.doc) == list(range(item.doc.n_units))

    @given(cfg=gen_config_strategy(), idx=st.integers(min_value=0, max_value=20))
    @settings(max_examples=40, deadline=None)
    def test_field_heads_and_roles(self, cfg: GenConfig, idx: int):
        item = generate_document(cfg, idx)
        for fld in item.gt.fields:
            assert fld.head_unit == min(fld.member_units)
            if fld.role == ROLE_CF:
                assert len(fld.member_units) == 2
        roles = {fld.role for fld in item.gt.fields}
        assert ROLE_KEY in roles and ROLE_VALUE in roles
        for tree in item.gt:
            assert tree.depth <= cfg.max_depth

    @given(cfg=gen_config_strategy())
    @settings(max_examples=10, deadline=None)
    def test_parallel_matches_sequential(self, cfg: GenConfig):
        labels = label_set_for(cfg)
        sequential = [d.to_dict(labels) for d in generate_corpus(cfg, jobs=1)]
        parallel = [d.to_dict(labels) for d in generate_corpus(cfg, jobs=3)]
        assert sequential == parallel
        assert len(sequential) == cfg.n_docs
