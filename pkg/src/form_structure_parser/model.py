"""
表单结构解析器 - 模型

FormParser 组合单元编码器、关系候选网络、关系解码器与关系解码算法：
forward 产出训练所需的各个头的输出，predict 产出粗粒度与细化两套森林。
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from loguru import logger

from . import autograd as ag
from .arbor import SCORE_FLOOR, DecodeResult, UnitForest, decode
from .autograd import ParamStore, Tensor
from .config import DecoderConfig, EncoderConfig, ModelConfig
from .labels import validate_document
from .models import Document, DocumentError, Forest, RelationLabelSet, UnifiedLabels
from .proposer import (
    ParentScorer,
    RelationClassifier,
    RelationProposal,
    ScoredRelationGraph,
    build_tree_proposals,
    classify_relations,
    coarse_types,
    score_parents,
    top_k_proposals,
)
from .rel_decoder import (
    RelationDecoder,
    TreeLevels,
    TreeMasks,
    build_tree_masks,
    classify_final,
    compute_levels,
    refine_parents,
)
from .unit_encoder import UnitEncoder


@dataclass
class HeadOutputs:
    """
    一次前向的全部头输出

    parent_logits 以子单元为行 (N, N)；proposal_type_logits 与 final_type_logits 以候选为行
    (P, C)；refine_logits 为 (N, K')。候选按子单元分组，p = j * K' + (rank - 1)。
    """
    parent_logits: Tensor
    proposals: List[RelationProposal]
    proposal_type_logits: Tensor
    refine_logits: Tensor
    final_type_logits: Tensor
    R: np.ndarray
    tree_proposals: UnitForest
    levels: TreeLevels
    masks: TreeMasks
    F: Optional[Tensor] = None

    @property
    def k(self) -> int:
        return self.refine_logits.shape[1]

    @property
    def n_units(self) -> int:
        return self.parent_logits.shape[0]

    def gt_rank(self, gt: UnifiedLabels) -> np.ndarray:
        """每个子单元的真实父节点在候选中的名次（从 0 开始），未命中为 -1"""
        k = self.k
        out = np.full(self.n_units, -1, dtype=np.int64)
        for p, prop in enumerate(self.proposals):
            if prop.parent == gt.parent[prop.child]:
                out[prop.child] = p % k
        return out


@dataclass
class Prediction:
    """单个文档的预测结果"""
    doc_id: str
    forest: Forest
    proposal_forest: Forest
    labels: UnifiedLabels
    proposal_labels: UnifiedLabels
    R: np.ndarray
    C: np.ndarray
    proposals: List[RelationProposal]
    levels: TreeLevels
    masks: TreeMasks
    tree_proposals: UnitForest
    coverage: Optional[float] = None
    diagnostics: List[str] = field(default_factory=list)

    @property
    def graph(self) -> ScoredRelationGraph:
        return ScoredRelationGraph(self.R, self.C)

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "trees": self.forest.to_dict()["trees"],
            "proposal_trees": self.proposal_forest.to_dict()["trees"],
        }


class FormParser:
    """表单结构解析模型"""

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        decoder_cfg: DecoderConfig,
        model_cfg: ModelConfig,
        label_set: Optional[RelationLabelSet] = None,
    ):
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.model_cfg = model_cfg
        self.label_set = label_set or RelationLabelSet.default().with_entities(model_cfg.entity_types)
        d = encoder_cfg.d_model
        n_types = len(self.label_set)
        self.encoder = UnitEncoder(
            encoder_cfg,
            use_text=model_cfg.use_text,
            use_geometry=model_cfg.use_geometry,
            use_encoder=model_cfg.use_encoder,
        )
        self.scorer = ParentScorer(d, model_cfg.head_hidden)
        self.classifier = RelationClassifier(d, model_cfg.head_hidden, n_types)
        self.decoder = RelationDecoder(
            decoder_cfg,
            d,
            model_cfg.head_hidden,
            n_types,
            use_tle=model_cfg.use_tle,
            use_tam=model_cfg.use_tam,
        )

    def init_params(self, seed: int = 0) -> ParamStore:
        rng = np.random.default_rng(seed)
        store = ParamStore()
        self.encoder.init_params(store, rng)
        self.scorer.init_params(store, rng)
        self.classifier.init_params(store, rng)
        if self.model_cfg.use_decoder:
            self.decoder.init_params(store, rng)
        logger.debug("initialised {} parameters in {} tensors", store.n_parameters(), len(store))
        return store

    def forward(self, store: ParamStore, doc: Document) -> HeadOutputs:
        """
        单文档前向

        Raises:
            DocumentError: 文档不合法
        """
        problems = validate_document(doc)
        if problems:
            raise DocumentError(f"document {doc.doc_id}: " + "; ".join(problems))
        F = self.encoder(store, doc)
        n = doc.n_units
        parent_logits, R = score_parents(self.scorer, store, F)
        proposals = top_k_proposals(R, self.model_cfg.k)
        proposal_type_logits = classify_relations(self.classifier, store, F, proposals)
        tree_proposals = build_tree_proposals(R, mode=self.model_cfg.score_mode)
        levels = compute_levels(tree_proposals, proposals, self.decoder_cfg.max_level)
        masks = build_tree_masks(tree_proposals, proposals)
        k = len(proposals) // n
        if self.model_cfg.use_decoder:
            H = self.decoder.decode_relations(store, F, proposals, levels, masks)
            refine_logits = self.decoder.refine_logits(store, H, n)
            final_type_logits = self.decoder.type_logits(store, H)
        else:
            # 无解码器时细化输出退化为候选级输出
            scores = np.asarray([p.score for p in proposals]).reshape(n, k)
            refine_logits = ag.as_tensor(np.log(np.maximum(scores, SCORE_FLOOR)))
            final_type_logits = proposal_type_logits
        return HeadOutputs(
            parent_logits=parent_logits,
            proposals=proposals,
            proposal_type_logits=proposal_type_logits,
            refine_logits=refine_logits,
            final_type_logits=final_type_logits,
            R=R,
            tree_proposals=tree_proposals,
            levels=levels,
            masks=masks,
            F=F,
        )

    def refined_scores(self, out: HeadOutputs) -> np.ndarray:
        """
        稀疏细化得分矩阵：每列只保留 K 个候选（其余取下限值）后重新归一化
        """
        n = out.n_units
        _, probs = refine_parents(out.refine_logits.data, out.proposals)
        k = probs.shape[1]
        R = np.full((n, n), SCORE_FLOOR)
        for p, prop in enumerate(out.proposals):
            R[prop.parent, prop.child] = max(probs[prop.child, p % k], SCORE_FLOOR)
        return R / R.sum(axis=0, keepdims=True)

    def predict(self, store: ParamStore, doc: Document, gt: Optional[UnifiedLabels] = None) -> Prediction:
        """
        单文档预测

        粗粒度森林：在 R 与全对类型矩阵上运行解码算法；
        细化森林：在稀疏细化得分与细化类型上再次运行解码算法。
        """
        out = self.forward(store, doc)
        root = self.label_set.root_index
        mode = self.model_cfg.score_mode
        all_types = self.classifier.all_pairs(store, out.F)
        C_coarse = coarse_types(all_types.data, root)
        coarse = decode(out.R, C_coarse, self.label_set, doc, mode=mode)

        k = out.k
        R_refined = self.refined_scores(out)
        C_refined = C_coarse.copy()
        chosen = list(range(len(out.proposals)))
        types = classify_final(out.final_type_logits.data, out.proposals, chosen, root)
        for p, prop in enumerate(out.proposals):
            C_refined[prop.parent, prop.child] = types[p]
        refined: DecodeResult = decode(R_refined, C_refined, self.label_set, doc, mode=mode)

        coverage = None
        if gt is not None:
            coverage = float(np.mean(out.gt_rank(gt) >= 0))
        logger.debug(
            "predicted {}: {} trees (proposal stage {}), K'={}",
            doc.doc_id, len(refined.forest), len(coarse.forest), k,
        )
        return Prediction(
            doc_id=doc.doc_id,
            forest=refined.forest,
            proposal_forest=coarse.forest,
            labels=refined.unified_labels(self.label_set),
            proposal_labels=coarse.unified_labels(self.label_set),
            R=out.R,
            C=C_coarse,
            proposals=out.proposals,
            levels=out.levels,
            masks=out.masks,
            tree_proposals=out.tree_proposals,
            coverage=coverage,
            diagnostics=coarse.diagnostics + refined.diagnostics,
        )
