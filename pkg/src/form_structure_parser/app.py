"""
表单结构解析器 - 应用

把配置接到生成器、模型、训练与评估各组件上，
并为命令行提供生成、训练、预测、评估、解码与检查等流程。
"""

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from .arbor import DecodeResult, decode
from .autograd import ParamStore
from .config import ProjectConfig
from .corpus import CorpusFormatError, LabeledDoc, corpus_statistics, load_corpus, save_corpus
from .export import (
    forest_to_dot,
    is_predictions_file,
    predictions_from_dict,
    save_predictions,
)
from .form_generator import generate_corpus, label_set_for
from .metrics import CorpusReport, MetricsError, corpus_eval
from .model import FormParser, Prediction
from .models import Forest, LabelError, RelationLabelSet
from .trainer import TrainResult, evaluate_model, load_model, predict_corpus, train


@dataclass
class LoadedModel:
    """检查点恢复出的模型"""
    parser: FormParser
    params: ParamStore
    config: ProjectConfig
    path: Path


def _read_json(path: Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


class Application:
    """应用程序主类 - 把配置接到生成、训练、预测与评估流程上"""

    def __init__(self, config: Optional[ProjectConfig] = None):
        self.config = config or ProjectConfig()
        self._models: Dict[Path, LoadedModel] = {}

    @property
    def jobs(self) -> int:
        return self.config.runtime.jobs

    @cached_property
    def label_set(self) -> RelationLabelSet:
        """模型配置的实体类型优先，否则取生成器配置的实体类型"""
        entities = tuple(self.config.model.entity_types) or tuple(self.config.generator.entity_types)
        return RelationLabelSet.default().with_entities(entities)

    def load_model(self, ckpt: Path) -> LoadedModel:
        """加载检查点；同一路径只加载一次"""
        key = Path(ckpt).resolve()
        if key not in self._models:
            parser, params, config = load_model(ckpt)
            self._models[key] = LoadedModel(parser, params, config, Path(ckpt))
        return self._models[key]

    # ============== 流程 ==============

    def generate(self, out: Path) -> Tuple[List[LabeledDoc], Dict[str, int]]:
        """生成合成语料并写出，返回文档与统计"""
        cfg = self.config.generator
        docs = generate_corpus(cfg, jobs=self.jobs)
        save_corpus(docs, out, label_set_for(cfg))
        stats = corpus_statistics(docs)
        logger.info("corpus statistics: {}", stats)
        return docs, stats

    def train(self, corpus: Path, out_ckpt: Path, metrics: Optional[Path] = None) -> TrainResult:
        docs, label_set = load_corpus(corpus)
        return train(docs, self.config, out_ckpt, metrics, label_set=label_set)

    def predict(self, corpus: Path, ckpt: Path, dot_dir: Optional[Path] = None) -> List[Prediction]:
        model = self.load_model(ckpt)
        docs, _ = load_corpus(corpus)
        predictions = predict_corpus(model.parser, model.params, docs, self.jobs)
        if dot_dir is not None:
            dot_dir = Path(dot_dir)
            dot_dir.mkdir(parents=True, exist_ok=True)
            for item, pred in zip(docs, predictions):
                path = dot_dir / f"{pred.doc_id}.dot"
                path.write_text(forest_to_dot(pred.forest, item.doc, pred.doc_id), encoding="utf-8")
            logger.info("wrote {} DOT files to {}", len(predictions), dot_dir)
        return predictions

    def save_predictions(self, predictions: List[Prediction], ckpt: Path, out: Path) -> Path:
        return save_predictions(predictions, self.load_model(ckpt).parser.label_set, out)

    def evaluate_checkpoint(self, corpus: Path, ckpt: Path) -> CorpusReport:
        model = self.load_model(ckpt)
        docs, _ = load_corpus(corpus)
        return evaluate_model(model.parser, model.params, docs, self.jobs).report

    def evaluate(self, pred: Path, gt: Path) -> CorpusReport:
        """
        评估预测文件（或语料文件）相对真值语料

        Raises:
            MetricsError: 预测与真值的文档不一一对应
        """
        gt_docs, _ = load_corpus(gt)
        data = _read_json(pred)
        if is_predictions_file(data):
            refined = dict(predictions_from_dict(data))
            proposal: Optional[Dict[str, Forest]] = None
            if all("proposal_trees" in p for p in data["predictions"]):
                proposal = dict(predictions_from_dict(data, proposal=True))
        else:
            pred_docs, _ = load_corpus(pred)
            refined = {item.doc.doc_id: item.gt for item in pred_docs}
            proposal = None
        gt_ids = [item.doc.doc_id for item in gt_docs]
        missing = [d for d in gt_ids if d not in refined]
        extra = sorted(set(refined) - set(gt_ids))
        if missing or extra:
            raise MetricsError(f"prediction documents do not match: missing {missing}, unexpected {extra}")
        gts = [item.gt for item in gt_docs]
        raw = [item.doc for item in gt_docs]
        report = corpus_eval([refined[d] for d in gt_ids], gts, raw, self.jobs)
        if proposal is not None:
            report.proposal = corpus_eval([proposal[d] for d in gt_ids], gts, raw, self.jobs)
        return report

    def decode_scores(self, scores: Path) -> Tuple[DecodeResult, RelationLabelSet]:
        """
        从得分文件解码：{"R": [[...]], "C": [[...]], "schema"?: [...]}，C 可为类型编号或类型名
        """
        data = _read_json(scores)
        if not isinstance(data, dict) or "R" not in data or "C" not in data:
            raise CorpusFormatError(f"{scores}: expected an object with 'R' and 'C'")
        label_set = RelationLabelSet(tuple(data["schema"])) if "schema" in data else self.label_set
        try:
            R = np.asarray(data["R"], dtype=np.float64)
            C_raw = data["C"]
            C = np.asarray(
                [[label_set.index(v) if isinstance(v, str) else int(v) for v in row] for row in C_raw],
                dtype=np.int64,
            )
        except (TypeError, ValueError) as e:
            raise CorpusFormatError(f"{scores}: malformed score matrices ({e})") from None
        except LabelError as e:
            raise CorpusFormatError(f"{scores}.C: {e}") from None
        if C.size and (C.min() < 0 or C.max() >= len(label_set)):
            raise CorpusFormatError(f"{scores}.C: type ids outside [0, {len(label_set)})")
        return decode(R, C, label_set, mode=self.config.model.score_mode), label_set

    def inspect(self, corpus: Path, doc_id: str, ckpt: Path) -> dict:
        """单文档的中间结果：R、类型矩阵、候选、层级、掩码与森林"""
        model = self.load_model(ckpt)
        docs, _ = load_corpus(corpus)
        by_id = {item.doc.doc_id: item for item in docs}
        if doc_id not in by_id:
            raise CorpusFormatError(f"{corpus}: no document with id '{doc_id}'")
        item = by_id[doc_id]
        pred = model.parser.predict(model.params, item.doc, item.labels(model.parser.label_set))
        return {
            "doc_id": doc_id,
            **pred.graph.to_dict(),
            "proposals": [p.to_dict() for p in pred.proposals],
            "tree_proposals": pred.tree_proposals.to_dict(),
            "levels": pred.levels.to_dict(),
            "masks": pred.masks.to_dict(),
            "forest": pred.forest.to_dict(),
            "proposal_forest": pred.proposal_forest.to_dict(),
            "coverage": pred.coverage,
            "diagnostics": pred.diagnostics,
        }

