"""
表单结构解析器 - 训练

四个头的损失聚合、在线难例挖掘 (OHEM)、带预热的训练循环、检查点读写与评估。
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from tqdm import tqdm

from . import autograd as ag
from .autograd import NonFiniteError, ParamStore, Tape, Tensor, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ProjectConfig, TrainConfig
from .corpus import LabeledDoc, split_corpus
from .metrics import CorpusReport, corpus_eval
from .model import FormParser, HeadOutputs, Prediction
from .models import FormParserError, RelationLabelSet, UnifiedLabels


# ============== OHEM ==============

def ohem_sample(
    losses: Sequence[float], is_positive: Sequence[bool], n_pos: int, n_neg: int
) -> np.ndarray:
    """
    选取损失最大的 n_pos 个正样本与 n_neg 个负样本

    可用数量不足时全部选取；损失相同时下标小者优先。

    Returns:
        升序排列的下标数组
    """
    losses = np.asarray(losses, dtype=np.float64)
    flags = np.asarray(is_positive, dtype=bool)
    if losses.shape != flags.shape:
        raise ValueError(f"{losses.shape[0]} losses for {flags.shape[0]} flags")
    order = np.lexsort((np.arange(losses.size), -losses))
    pos = [i for i in order if flags[i]][:n_pos]
    neg = [i for i in order if not flags[i]][:n_neg]
    return np.sort(np.asarray(pos + neg, dtype=np.int64))


def _row_losses(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(target)), target]


# ============== 损失 ==============

@dataclass
class LossBreakdown:
    """总损失与各项损失；coverage 为真实父节点落在前 K 候选中的子单元比例"""
    total: Tensor
    terms: Dict[str, float] = field(default_factory=dict)
    coverage: float = 1.0

    def item(self) -> float:
        return self.total.item()


def _head_loss(
    logits: Tensor,
    rows: np.ndarray,
    target: np.ndarray,
    use_ohem: bool,
    cfg: TrainConfig,
) -> Optional[Tensor]:
    """在 rows 指定的行上计算交叉熵；启用 OHEM 时只保留难例"""
    if rows.size == 0:
        return None
    if use_ohem:
        data = logits.data[rows]
        per_item = _row_losses(data, target)
        positive = data.argmax(axis=1) == target
        keep = ohem_sample(per_item, positive, cfg.ohem_pos, cfg.ohem_neg)
        rows, target = rows[keep], target[keep]
    return ag.cross_entropy(ag.take_rows(logits, rows), target)


def total_loss(out: HeadOutputs, gt: UnifiedLabels, cfg: TrainConfig) -> LossBreakdown:
    """
    四项交叉熵之和

    1. 候选父节点：每个子单元上的 N 类
    2. 候选类型：父节点正确的候选上的 C 类
    3. 细化：真实父节点进入前 K 的子单元上的 K 类（目标为其名次）
    4. 最终类型：同上子单元的真实候选上的 C 类
    """
    n = out.n_units
    if len(gt) != n:
        raise ag.ShapeError("total_loss", (len(gt),), (n,), detail="labels do not match document")
    parent = np.asarray(gt.parent, dtype=np.int64)
    rel_type = np.asarray(gt.rel_type, dtype=np.int64)
    heads = set(cfg.ohem_heads)
    children = np.arange(n)

    rank = out.gt_rank(gt)
    covered = children[rank >= 0]
    k = out.k
    true_proposals = covered * k + rank[covered]

    terms: Dict[str, Tensor] = {}
    parts = [
        ("proposal_parent", out.parent_logits, children, parent),
        ("proposal_type", out.proposal_type_logits, true_proposals, rel_type[covered]),
        ("refine", out.refine_logits, covered, rank[covered]),
        ("final_type", out.final_type_logits, true_proposals, rel_type[covered]),
    ]
    for name, logits, rows, target in parts:
        loss = _head_loss(logits, rows, target, name in heads, cfg)
        if loss is not None:
            terms[name] = loss

    total = terms["proposal_parent"]
    for name in ("proposal_type", "refine", "final_type"):
        if name in terms:
            total = total + terms[name]
    return LossBreakdown(
        total=total,
        terms={name: t.item() for name, t in terms.items()},
        coverage=float(covered.size) / n,
    )


# ============== 学习率 ==============

def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """
    线性预热后保持常数；step 从 0 开始

    第 0 步学习率为 0，第 warmup_steps - 1 步（预热期最后一步）达到 base_lr。
    """
    if warmup_steps <= 1:
        return base_lr
    return base_lr * min(1.0, step / (warmup_steps - 1))


# ============== 评估 ==============

@dataclass
class Evaluation:
    report: CorpusReport
    predictions: List[Prediction]


def predict_corpus(
    parser: FormParser, store: ParamStore, docs: Sequence[LabeledDoc], jobs: int = 1, with_gt: bool = True
) -> List[Prediction]:
    def run(item: LabeledDoc) -> Prediction:
        gt = item.labels(parser.label_set) if with_gt else None
        return parser.predict(store, item.doc, gt)

    if jobs > 1 and len(docs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, docs))
    return [run(item) for item in docs]


def evaluate_model(
    parser: FormParser, store: ParamStore, docs: Sequence[LabeledDoc], jobs: int = 1
) -> Evaluation:
    """在带标注文档上预测并评估细化输出与仅候选输出"""
    predictions = predict_corpus(parser, store, docs, jobs)
    gts = [item.gt for item in docs]
    raw = [item.doc for item in docs]
    report = corpus_eval([p.forest for p in predictions], gts, raw, jobs)
    report.proposal = corpus_eval([p.proposal_forest for p in predictions], gts, raw, jobs)
    units = sum(item.doc.n_units for item in docs)
    if units:
        report.coverage = float(
            sum((p.coverage or 0.0) * item.doc.n_units for p, item in zip(predictions, docs)) / units
        )
    return Evaluation(report, predictions)


# ============== 训练循环 ==============

@dataclass
class TrainResult:
    params: ParamStore
    history: List[dict]
    checkpoint_path: Optional[Path] = None


def checkpoint_meta(config: ProjectConfig, label_set: RelationLabelSet, step: int) -> dict:
    return {"config": config.to_dict(), "schema": label_set.to_list(), "step": step}


def _epoch_record(epoch: int, loss: float, report: CorpusReport) -> dict:
    return {
        "epoch": epoch,
        "loss": loss,
        "f1_field": report.field.micro.f1,
        "f1_tree": report.tree.micro.f1,
        "teds_kvp": report.teds_of("kvp"),
        "teds_cg": report.teds_of("cg"),
        "proposal_coverage": report.coverage if report.coverage is not None else 0.0,
    }


def train(
    docs: Sequence[LabeledDoc],
    config: ProjectConfig,
    out_path: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    label_set: Optional[RelationLabelSet] = None,
    holdout: Optional[Sequence[LabeledDoc]] = None,
) -> TrainResult:
    """
    训练 FormParser

    每篇文档为一个样本，累积 train.accum 篇后做一次 Adam 更新。第一个
    （train.warmup_epochs 个）epoch 内学习率线性预热，之后保持常数。
    单线程下同一种子得到逐位相同的参数。

    Args:
        docs: 训练语料；holdout 为空时按 train.holdout_fraction 切出留出集
        config: 完整项目配置
        out_path: 检查点输出路径
        metrics_path: 每个 epoch 一行的 JSON-lines 指标日志

    Raises:
        FormParserError: 语料为空
        NonFiniteError: 损失或梯度出现 NaN/Inf
    """
    if not docs:
        raise FormParserError("cannot train on an empty corpus")
    cfg = config.train
    if holdout is None:
        train_docs, hold_docs = split_corpus(docs, cfg.holdout_fraction, cfg.seed)
    else:
        train_docs, hold_docs = list(docs), list(holdout)
    eval_docs = hold_docs or train_docs

    parser = FormParser(config.encoder, config.decoder, config.model, label_set)
    label_set = parser.label_set
    targets = [item.labels(label_set) for item in train_docs]
    base_lr = config.adam.lr * cfg.lr_scale
    steps_per_epoch = math.ceil(len(train_docs) / cfg.accum)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)

    history: List[dict] = []
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics_path.write_text("", encoding="utf-8")

    with ag.precision(config.runtime.precision):
        store = parser.init_params(cfg.seed)
        logger.info(
            "training on {} documents ({} held out): d_model={}, layers={}+{}, K={}, {} parameters",
            len(train_docs), len(hold_docs), config.encoder.d_model, config.encoder.n_layers,
            config.decoder.n_layers if config.model.use_decoder else 0, config.model.k,
            store.n_parameters(),
        )
        stop = False
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_docs))
            batches = [order[i:i + cfg.accum] for i in range(0, len(order), cfg.accum)]
            losses: List[float] = []
            bar = tqdm(batches, desc=f"epoch {epoch}", disable=not cfg.progress, leave=False)
            for batch in bar:
                grads: Dict[str, np.ndarray] = {}
                step = store.step
                for idx in batch:
                    item = train_docs[int(idx)]
                    with Tape() as tape:
                        out = parser.forward(store, item.doc)
                        loss = total_loss(out, targets[int(idx)], cfg)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise NonFiniteError(
                            f"non-finite loss on document {item.doc.doc_id} at step {step + 1}", step=step + 1
                        )
                    for name, g in tape.backward(loss.total, store).items():
                        grads[name] = grads[name] + g if name in grads else g
                    losses.append(value)
                grads = {name: g / len(batch) for name, g in grads.items()}
                store = adam_step(store, grads, config.adam, warmup_lr(step, base_lr, warmup_steps))
                bar.set_postfix(loss=f"{np.mean(losses):.4f}")
                if cfg.max_steps and store.step >= cfg.max_steps:
                    stop = True
                    break

            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs or stop:
                report = evaluate_model(parser, store, eval_docs, config.runtime.jobs).report
                record = _epoch_record(epoch, float(np.mean(losses)) if losses else 0.0, report)
                history.append(record)
                logger.info(
                    "epoch {}: loss={:.4f} f1_field={:.3f} f1_tree={:.3f} teds_kvp={:.3f} teds_cg={:.3f} "
                    "coverage={:.3f}",
                    epoch, record["loss"], record["f1_field"], record["f1_tree"],
                    record["teds_kvp"], record["teds_cg"], record["proposal_coverage"],
                )
                if metrics_path is not None:
                    with metrics_path.open("a", encoding="utf-8") as fh:
                        fh.write(json.dumps(record) + "\n")
            if stop:
                logger.info("reached train.max_steps={} at epoch {}", cfg.max_steps, epoch)
                break

    ckpt = None
    if out_path is not None:
        ckpt = save_checkpoint(out_path, store.state(), checkpoint_meta(config, label_set, store.step))
    return TrainResult(store, history, ckpt)


# ============== 加载 ==============

def load_model(path: Path) -> Tuple[FormParser, ParamStore, ProjectConfig]:
    """
    从检查点恢复模型、参数与训练时的配置

    Raises:
        CheckpointError: 缺少元信息或参数与模型结构不符
    """
    arrays, meta = load_checkpoint(path)
    if "config" not in meta or "schema" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model configuration")
    config = ProjectConfig.from_dict(meta["config"])
    label_set = RelationLabelSet(tuple(meta["schema"]))
    parser = FormParser(config.encoder, config.decoder, config.model, label_set)
    store = ParamStore.from_state(arrays)
    with ag.precision(config.runtime.precision):
        expected = {name: p.shape for name, p in parser.init_params(0).items()}
    found = {name: p.shape for name, p in store.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        wrong = sorted(n for n in set(expected) & set(found) if expected[n] != found[n])
        raise CheckpointError(
            f"{path}: parameters do not match the model (missing {missing}, unexpected {extra}, "
            f"wrong shape {wrong})"
        )
    return parser, store, config
