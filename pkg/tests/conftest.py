"""
pytest 配置和共享 fixtures
"""

import os
import sys
import tempfile
from pathlib import Path
from typing import Generator

import pytest
from hypothesis import settings, Verbosity

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

from form_structure_parser.config import (  # noqa: E402
    DecoderConfig,
    EncoderConfig,
    GenConfig,
    ModelConfig,
    ProjectConfig,
    TrainConfig,
)
from form_structure_parser.corpus import LabeledDoc  # noqa: E402
from form_structure_parser.models import (  # noqa: E402
    BBox,
    BasicUnit,
    Document,
    Field,
    FieldEdge,
    Forest,
    HierTree,
    UnitKind,
)

# Hypothesis 配置
settings.register_profile("default", max_examples=100, verbosity=Verbosity.normal, deadline=None)
settings.register_profile("ci", max_examples=200, verbosity=Verbosity.verbose, deadline=None)
settings.register_profile("debug", max_examples=10, verbosity=Verbosity.verbose, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


# ============== 慢速测试 ==============

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行完整训练的慢速测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """创建临时目录用于测试"""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


# ============== 手工构造的表单 ==============

def _unit(uid: int, kind: UnitKind, box, text: str = "") -> BasicUnit:
    return BasicUnit(uid, kind, BBox(*box), text)


def build_kvp_document() -> LabeledDoc:
    """
    一个键值对、一个带标题的两选项选择组和一行独立文本

        Name: [________]
        Gender?  [ ] Male  [ ] Female
        Sign below
    """
    line, widget, choice = UnitKind.TEXT_LINE, UnitKind.TEXT_WIDGET, UnitKind.CHOICE_WIDGET
    units = (
        _unit(0, line, (0.05, 0.05, 0.15, 0.062), "Name:"),
        _unit(1, widget, (0.20, 0.05, 0.50, 0.062)),
        _unit(2, line, (0.05, 0.10, 0.15, 0.112), "Gender?"),
        _unit(3, choice, (0.20, 0.10, 0.211, 0.111)),
        _unit(4, line, (0.22, 0.10, 0.30, 0.112), "Male"),
        _unit(5, choice, (0.35, 0.10, 0.361, 0.111)),
        _unit(6, line, (0.37, 0.10, 0.45, 0.112), "Female"),
        _unit(7, line, (0.05, 0.20, 0.20, 0.212), "Sign below"),
    )
    doc = Document("hand-kvp", 850.0, 1100.0, units)
    gt = Forest((
        HierTree(0, (Field("key", (0,), 0), Field("value", (1,), 1)), (FieldEdge(0, 1, "inter-kvp"),)),
        HierTree(
            2,
            (Field("cgt", (2,), 2), Field("cf", (3, 4), 3), Field("cf", (5, 6), 5)),
            (FieldEdge(2, 3, "inter-cg"), FieldEdge(2, 5, "inter-cg")),
        ),
        HierTree(7, (Field("other", (7,), 7),)),
    ))
    return LabeledDoc(doc, gt)


@pytest.fixture
def kvp_doc() -> LabeledDoc:
    return build_kvp_document()


# ============== 小规模配置 ==============

def small_gen_config(**overrides) -> GenConfig:
    params = dict(
        seed=3,
        n_docs=6,
        units_per_doc=(3, 40),
        kvps=(1, 3),
        choice_groups=(0, 1),
        others=(0, 1),
        choices_per_group=(2, 3),
        p_nest=0.5,
    )
    params.update(overrides)
    return GenConfig(**params)


def tiny_project_config(**train_overrides) -> ProjectConfig:
    train = dict(epochs=2, accum=2, holdout_fraction=0.0, progress=False, seed=0)
    train.update(train_overrides)
    return ProjectConfig(
        generator=small_gen_config(),
        encoder=EncoderConfig(
            d_model=16, n_layers=1, n_heads=2, d_ffn=32, vocab_size=64, d_pos=8, d_text=8, d_kind=4
        ),
        decoder=DecoderConfig(n_layers=1, n_heads=2, d_ffn=32, d_level=4, max_level=8),
        model=ModelConfig(k=3, head_hidden=16),
        train=TrainConfig(**train),
    )


@pytest.fixture
def gen_config() -> GenConfig:
    return small_gen_config()


@pytest.fixture
def tiny_config() -> ProjectConfig:
    return tiny_project_config()
