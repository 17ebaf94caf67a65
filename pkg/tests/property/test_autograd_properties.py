"""
自动求导属性测试

Feature: form-structure-parser, Property 8: 解析梯度与中心差分一致
Validates: autograd 全部算子, layers, unit_encoder, proposer, rel_decoder, trainer.total_loss

全部在 64 位精度下运行，相对误差上限 1e-4。
"""

import sys
from pathlib import Path

# 添加 src 目录到 Python 路径
src_path = Path(__file__).parent.parent.parent / "src"
sys.path.insert(0, str(src_path))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from form_structure_parser import autograd as ag
from form_structure_parser.autograd import ParamStore, finite_difference_check, precision
from form_structure_parser.config import DecoderConfig, EncoderConfig, ModelConfig, TrainConfig
from form_structure_parser.layers import TransformerLayer
from form_structure_parser.model import FormParser
from form_structure_parser.models import BasicUnit, Document, UnifiedLabels
from form_structure_parser.proposer import (
    ParentScorer,
    RelationClassifier,
    build_tree_proposals,
    top_k_proposals,
)
from form_structure_parser.rel_decoder import RelationDecoder, build_tree_masks, compute_levels
from form_structure_parser.trainer import total_loss
from form_structure_parser.unit_encoder import UnitEncoder
from tests.conftest import build_kvp_document

TOLERANCE = 1e-4

seed_strategy = st.integers(min_value=0, max_value=2**32 - 1)


# ============== 辅助函数 ==============

def random_store(seed: int, shapes: dict) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.normal(size=shape))
    return store


def weighted_sum(x, seed: int = 99):
    """对输出加随机权重再求和，避免对称性掩盖错误的梯度"""
    w = np.random.default_rng(seed).normal(size=x.shape)
    return ag.sum(ag.mul(x, ag.as_tensor(w)))


ENC = EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_ffn=12, vocab_size=32, d_pos=6, d_text=6, d_kind=3)
DEC = DecoderConfig(n_layers=1, n_heads=2, d_ffn=12, d_level=4, max_level=6)


# ============== 算子 ==============

class TestOpGradients:
    """
    Property 8: 解析梯度与中心差分一致（基本算子）

    Feature: form-structure-parser, Property 8: 解析梯度与中心差分一致
    """

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_elementwise_and_broadcast(self, seed: int):
        with precision("float64"):
            store = random_store(seed, {"a": (3, 4), "b": (1, 4), "c": (4,)})

            def fn(s):
                x = ag.mul(ag.add(s["a"], s["b"]), ag.sub(s["a"], s["c"]))
                return weighted_sum(ag.scale(x, 0.5) - s["b"])

            assert finite_difference_check(fn, store) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_matmul_transpose_reshape(self, seed: int):
        with precision("float64"):
            store = random_store(seed, {"x": (2, 3, 4), "w": (4, 5), "m": (5, 3)})

            def fn(s):
                y = ag.matmul(s["x"], s["w"])
                flat = ag.reshape(y, (6, 5))
                return weighted_sum(ag.matmul(flat, s["m"]) + ag.transpose(ag.matmul(ag.transpose(s["m"]), ag.transpose(flat))))

            assert finite_difference_check(fn, store) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_concat_slice_lookup_pairwise(self, seed: int):
        with precision("float64"):
            store = random_store(seed, {"a": (4, 3), "b": (4, 2), "t": (6, 5)})
            idx = np.random.default_rng(seed).integers(0, 6, size=4)

            def fn(s):
                joined = ag.concat([s["a"], s["b"]])
                rows = ag.embedding_lookup(s["t"], idx)
                mixed = ag.add(joined, rows)
                pair = ag.pairwise_add(ag.slice_cols(mixed, 0, 2), ag.slice_cols(mixed, 3, 5))
                return ag.add(weighted_sum(pair), ag.mean(ag.sum(mixed, axis=0)))

            assert finite_difference_check(fn, store) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_softmax_with_mask(self, seed: int):
        with precision("float64"):
            store = random_store(seed, {"x": (4, 5)})
            mask = np.random.default_rng(seed).random((4, 5)) < 0.6
            mask[:, 0] = True

            def fn(s):
                return weighted_sum(ag.softmax(s["x"], mask))

            assert finite_difference_check(fn, store) <= TOLERANCE

    @given(seed=seed_strategy, reduction=st.sampled_from(["mean", "sum"]))
    @settings(max_examples=20, deadline=None)
    def test_cross_entropy_and_log_softmax(self, seed: int, reduction: str):
        with precision("float64"):
            store = random_store(seed, {"x": (5, 4)})
            target = np.random.default_rng(seed).integers(0, 4, size=5)

            def fn(s):
                ce = ag.cross_entropy(s["x"], target, reduction=reduction)
                per_row = ag.cross_entropy(s["x"], target, reduction="none")
                return ce + weighted_sum(per_row) + weighted_sum(ag.log_softmax(s["x"]))

            assert finite_difference_check(fn, store) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_layer_norm(self, seed: int):
        with precision("float64"):
            store = random_store(seed, {"x": (3, 6), "g": (6,), "b": (6,)})

            def fn(s):
                return weighted_sum(ag.layer_norm(s["x"], s["g"], s["b"]))

            assert finite_difference_check(fn, store) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_masked_attention(self, seed: int):
        with precision("float64"):
            store = random_store(seed, {"q": (3, 4), "k": (5, 4), "v": (5, 2)})
            mask = np.random.default_rng(seed).random((3, 5)) < 0.5
            mask[np.arange(3), np.arange(3)] = True

            def fn(s):
                return weighted_sum(ag.masked_attention(s["q"], s["k"], s["v"], mask))

            assert finite_difference_check(fn, store) <= TOLERANCE

    def test_relu_next_to_kink(self):
        with precision("float64"):
            store = ParamStore()
            store.add("x", np.array([3e-6, -2.0, 1.5]))

            def fn(s):
                return ag.sum(ag.relu(s["x"]))

            assert finite_difference_check(fn, store, retry_above=np.inf) > 0.1
            assert finite_difference_check(fn, store) <= TOLERANCE


# ============== 网络模块 ==============

class TestBlockGradients:
    """
    Property 8: 解析梯度与中心差分一致（网络模块）

    Feature: form-structure-parser, Property 8: 解析梯度与中心差分一致
    """

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_transformer_layer_with_cross_attention(self, seed: int):
        with precision("float64"):
            rng = np.random.default_rng(seed)
            layer = TransformerLayer("t", 8, 2, 12, cross=True)
            store = ParamStore()
            layer.init_params(store, rng)
            store.add("x", rng.normal(size=(4, 8)))
            store.add("mem", rng.normal(size=(3, 8)))
            self_mask = np.eye(4, dtype=bool) | (rng.random((4, 4)) < 0.5)
            cross_mask = rng.random((4, 3)) < 0.5
            cross_mask[:, 0] = True

            def fn(s):
                return weighted_sum(layer(s, s["x"], self_mask, memory=s["mem"], cross_mask=cross_mask))

            assert finite_difference_check(fn, store, max_entries=6) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_unit_encoder_one_layer(self, seed: int):
        doc = build_kvp_document().doc
        with precision("float64"):
            encoder = UnitEncoder(ENC, use_text=True, use_geometry=True, use_encoder=True)
            store = ParamStore()
            encoder.init_params(store, np.random.default_rng(seed))

            def fn(s):
                return weighted_sum(encoder(s, doc))

            assert finite_difference_check(fn, store, max_entries=4) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_proposal_heads(self, seed: int):
        with precision("float64"):
            rng = np.random.default_rng(seed)
            scorer = ParentScorer(8, 10)
            classifier = RelationClassifier(8, 10, 7)
            store = ParamStore()
            scorer.init_params(store, rng)
            classifier.init_params(store, rng)
            store.add("F", rng.normal(size=(5, 8)))
            gt_parent = rng.integers(0, 5, size=5)
            gt_type = rng.integers(0, 7, size=5)

            def fn(s):
                parent_loss = ag.cross_entropy(scorer.child_logits(s, s["F"]), gt_parent)
                type_logits = classifier.pairs(s, s["F"], gt_parent, np.arange(5))
                return parent_loss + ag.cross_entropy(type_logits, gt_type)

            assert finite_difference_check(fn, store, max_entries=6) <= TOLERANCE

    @given(seed=seed_strategy)
    @settings(max_examples=20, deadline=None)
    def test_relation_decoder_with_masks_and_levels(self, seed: int):
        doc = build_kvp_document().doc
        with precision("float64"):
            rng = np.random.default_rng(seed)
            encoder = UnitEncoder(ENC, use_text=True, use_geometry=True, use_encoder=False)
            decoder = RelationDecoder(DEC, ENC.d_model, 10, 7, use_tle=True, use_tam=True)
            store = ParamStore()
            encoder.init_params(store, rng)
            decoder.init_params(store, rng)

            # 候选、层级与掩码在初始参数下确定，扰动参数时保持不变
            R = rng.dirichlet(np.ones(doc.n_units), size=doc.n_units).T
            proposals = top_k_proposals(R, 3)
            tree = build_tree_proposals(R)
            levels = compute_levels(tree, proposals, DEC.max_level)
            masks = build_tree_masks(tree, proposals)
            type_target = rng.integers(0, 7, size=len(proposals))
            rank_target = rng.integers(0, 3, size=doc.n_units)

            def fn(s):
                H = decoder.decode_relations(s, encoder(s, doc), proposals, levels, masks)
                refine = ag.cross_entropy(decoder.refine_logits(s, H, doc.n_units), rank_target)
                return refine + ag.cross_entropy(decoder.type_logits(s, H), type_target)

            assert finite_difference_check(fn, store, max_entries=3) <= TOLERANCE


class TestEndToEndGradient:
    """
    Property 8: 解析梯度与中心差分一致（完整损失，3 个单元的文档）

    Feature: form-structure-parser, Property 8: 解析梯度与中心差分一致
    """

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_total_loss_on_three_unit_document(self, seed: int):
        doc = build_kvp_document().doc
        picked = (doc.unit(0), doc.unit(1), doc.unit(7))
        small = Document(
            "three", doc.page_width, doc.page_height,
            tuple(BasicUnit(i, u.kind, u.bbox, u.text) for i, u in enumerate(picked)),
        )
        with precision("float64"):
            parser = FormParser(ENC, DEC, ModelConfig(k=3, head_hidden=10))
            store = parser.init_params(seed)
            labels = parser.label_set
            root = labels.root_index
            gt = UnifiedLabels((0, 0, 2), (root, labels.index("inter-kvp"), root), labels)
            cfg = TrainConfig(ohem_heads=())

            def fn(s):
                return total_loss(parser.forward(s, small), gt, cfg).total

            assert finite_difference_check(fn, store, max_entries=2) <= TOLERANCE
