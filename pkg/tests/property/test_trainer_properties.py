"""
在线难例挖掘与学习率预热属性测试

Feature: form-structure-parser, Property 12: OHEM 选取最难的正负样本
Validates: trainer.ohem_sample, trainer.warmup_lr
"""

import sys
from pathlib import Path

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent.parent / "src"
sys.path.insert(0, str(src_path))

import numpy as np
from hypothesis import given, settings, strategies as st

from form_structure_parser.trainer import ohem_sample, warmup_lr


# ============== 策略定义 ==============

@st.composite
def ohem_input_strategy(draw):
    n = draw(st.integers(min_value=0, max_value=40))
    losses = draw(
        st.lists(st.floats(min_value=0.0, max_value=20.0, allow_nan=False), min_size=n, max_size=n)
    )
    flags = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    n_pos = draw(st.integers(min_value=0, max_value=10))
    n_neg = draw(st.integers(min_value=0, max_value=10))
    return losses, flags, n_pos, n_neg


# ============== 属性测试 ==============

class TestOhemSample:
    """
    Property 12: OHEM 选取最难的正负样本

    For any 损失与正负标记，选中的正样本数为 min(n_pos, #正)，负样本数为 min(n_neg, #负)，
    且未选中的同类样本损失不超过任一选中样本。

    Feature: form-structure-parser, Property 12: OHEM 选取最难的正负样本
    """

    @given(sample=ohem_input_strategy())
    @settings(max_examples=200, deadline=None)
    def test_sizes(self, sample):
        losses, flags, n_pos, n_neg = sample
        picked = ohem_sample(losses, flags, n_pos, n_neg)
        flags = np.asarray(flags, dtype=bool)
        n_pos_avail = int(flags.sum())
        assert int(flags[picked].sum()) == min(n_pos, n_pos_avail)
        assert int((~flags[picked]).sum()) == min(n_neg, len(flags) - n_pos_avail)
        assert len(set(picked.tolist())) == len(picked)
        assert picked.tolist() == sorted(picked.tolist())

    @given(sample=ohem_input_strategy())
    @settings(max_examples=200, deadline=None)
    def test_hardest_selected(self, sample):
        losses, flags, n_pos, n_neg = sample
        picked = set(ohem_sample(losses, flags, n_pos, n_neg).tolist())
        for group in (True, False):
            members = [i for i, f in enumerate(flags) if f == group]
            chosen = [losses[i] for i in members if i in picked]
            rest = [losses[i] for i in members if i not in picked]
            if chosen and rest:
                assert max(rest) <= min(chosen)

    @given(sample=ohem_input_strategy())
    @settings(max_examples=100, deadline=None)
    def test_deterministic(self, sample):
        losses, flags, n_pos, n_neg = sample
        first = ohem_sample(losses, flags, n_pos, n_neg)
        second = ohem_sample(list(losses), list(flags), n_pos, n_neg)
        assert np.array_equal(first, second)


class TestWarmup:
    """
    Property 13: 预热学习率单调不减且不超过基础学习率

    Feature: form-structure-parser, Property 13: 预热学习率单调不减且不超过基础学习率
    """

    @given(
        base=st.floats(min_value=1e-6, max_value=1.0),
        warmup=st.integers(min_value=0, max_value=50),
        step=st.integers(min_value=0, max_value=200),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_and_capped(self, base: float, warmup: int, step: int):
        lr = warmup_lr(step, base, warmup)
        assert 0.0 <= lr <= base
        assert lr <= warmup_lr(step + 1, base, warmup)
        if step + 1 >= warmup:
            assert lr == base
        if step == 0 and warmup > 1:
            assert lr == 0.0
