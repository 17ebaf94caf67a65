"""
完整训练运行：训练集过拟合、留出集泛化与候选覆盖率、消融变体

标记为 slow 的用例使用默认规模配置，需要 ``pytest --runslow``。
"""

import sys
from pathlib import Path

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent.parent / "src"
sys.path.insert(0, str(src_path))

import pytest

from form_structure_parser.config import GenConfig, ModelConfig, ProjectConfig, TrainConfig, derive
from form_structure_parser.form_generator import generate_corpus
from form_structure_parser.model import FormParser
from form_structure_parser.trainer import evaluate_model, load_model, train
from tests.conftest import small_gen_config, tiny_project_config


def _train_config(**overrides) -> TrainConfig:
    params = dict(holdout_fraction=0.0, progress=False, seed=0)
    params.update(overrides)
    return TrainConfig(**params)


@pytest.mark.slow
class TestOverfit:

    def test_fits_twenty_documents(self):
        docs = generate_corpus(GenConfig(seed=11, n_docs=20))
        config = derive(ProjectConfig(), train=_train_config(epochs=150, accum=1, max_steps=3000, eval_every=150))
        result = train(docs, config)
        assert result.params.step <= 3000

        parser = FormParser(config.encoder, config.decoder, config.model)
        report = evaluate_model(parser, result.params, docs).report
        assert report.tree.micro.f1 >= 0.95
        assert report.teds_all >= 0.98


@pytest.mark.slow
class TestHoldout:

    def test_generalizes_to_unseen_forms(self):
        docs = generate_corpus(GenConfig(seed=12, n_docs=500), jobs=4)
        train_docs, test_docs = docs[:400], docs[400:]
        config = derive(ProjectConfig(), train=_train_config(eval_every=10))
        result = train(train_docs, config, holdout=test_docs)

        parser = FormParser(config.encoder, config.decoder, config.model)
        report = evaluate_model(parser, result.params, test_docs, jobs=4).report
        assert report.teds_of("kvp") >= 0.85
        assert report.teds_of("cg") >= 0.80
        assert report.tree.micro.f1 >= report.proposal.tree.micro.f1
        assert report.coverage >= 0.99


class TestAblationRuns:

    @pytest.mark.parametrize(
        "switch", ["use_decoder", "use_encoder", "use_tle", "use_tam", "use_text", "use_geometry"]
    )
    def test_variant_trains_and_restores(self, switch: str, temp_dir: Path):
        base = tiny_project_config(max_steps=2, epochs=1, accum=1)
        config = derive(base, model=ModelConfig(**{**base.model.to_dict(), switch: False, "entity_types": ()}))
        docs = generate_corpus(small_gen_config(n_docs=3))
        result = train(docs, config, out_path=temp_dir / f"{switch}.ckpt")
        assert result.params.step == 2
        assert len(result.history) == 1

        parser, store, restored = load_model(result.checkpoint_path)
        assert getattr(restored.model, switch) is False
        evaluation = evaluate_model(parser, store, docs)
        assert evaluation.report.documents == 3
        assert 0.0 <= evaluation.report.tree.micro.f1 <= 1.0
        assert 0.0 <= evaluation.report.teds_all <= 1.0
        for prediction, item in zip(evaluation.predictions, docs):
            assert prediction.forest.problems(item.doc.n_units) == []
