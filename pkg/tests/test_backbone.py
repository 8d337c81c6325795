import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmcl.autodiff import ParameterRegistry, Tensor
from mmcl.backbone import Backbone, ModalityConfig, Tokenizer, block_plan, partition_layers
from mmcl.errors import ContractError, InputError

GOLDEN = json.loads((Path(__file__).parent / "golden" / "heads_backbone.json").read_text())


def partition_direct(L, B):
    # blocks numbered from 1; the first L - B*floor(L/B) get one extra layer
    q = math.floor(L / B)
    return [1 + q if b <= L - B * q else q for b in range(1, B + 1)]


def test_partition_examples():
    assert partition_layers(12, 12) == [1] * 12
    assert partition_layers(24, 12) == [2] * 12
    assert partition_layers(14, 12) == [2, 2] + [1] * 10


@given(st.integers(1, 64).flatmap(lambda L: st.tuples(st.just(L), st.integers(1, L))))
def test_partition_properties(case):
    L, B = case
    parts = partition_layers(L, B)
    assert sum(parts) == L and len(parts) == B
    assert max(parts) - min(parts) <= 1 and min(parts) >= 1
    assert parts == partition_direct(L, B)


def test_partition_rejects_more_blocks_than_layers():
    with pytest.raises(ContractError):
        partition_layers(3, 4)
    with pytest.raises(ContractError):
        partition_layers(3, 0)


def test_block_plan_uses_shallowest_modality():
    plan = block_plan([ModalityConfig(2, 2, 2, 12), ModalityConfig(2, 2, 2, 14)])
    assert plan == [[1] * 12, [2, 2] + [1] * 10]


def test_tokenize_zero_input_gives_zero_tokens():
    reg = ParameterRegistry()
    tok = Tokenizer(reg, "t", ModalityConfig(3, 2, 4, 1), np.random.default_rng(0))
    np.testing.assert_array_equal(tok(np.zeros((2, 3))).data, np.zeros((2, 4)))


def test_tokenize_identity_projection_passes_raw_through():
    reg = ParameterRegistry()
    tok = Tokenizer(reg, "t", ModalityConfig(3, 2, 3, 1), np.random.default_rng(0))
    tok.weight.data[...] = np.eye(3)
    x = np.random.default_rng(1).normal(size=(2, 3))
    np.testing.assert_array_equal(tok(x).data, x)


def test_tokenize_golden():
    g = GOLDEN["tokenize"]
    reg = ParameterRegistry()
    tok = Tokenizer(reg, "t", ModalityConfig(g["raw_dim"], g["seq_len"], g["token_dim"], 1),
                    np.random.default_rng(g["seed"]))
    np.testing.assert_allclose(tok(np.array(g["input"])).data, g["output"], rtol=0, atol=1e-12)


def test_tokenize_rejects_wrong_shape():
    reg = ParameterRegistry()
    tok = Tokenizer(reg, "t", ModalityConfig(3, 2, 4, 1), np.random.default_rng(0))
    with pytest.raises(InputError):
        tok(np.zeros((2, 5)))


def _backbone(layers, dim=4, seq=3):
    reg = ParameterRegistry()
    mods = [ModalityConfig(5, seq, dim, n) for n in layers]
    return reg, Backbone(reg, mods, np.random.default_rng(3))


def test_backbone_is_frozen():
    reg, bb = _backbone([2, 3])
    assert not any(reg.is_trainable(n) for n in bb.param_names)
    assert list(reg.trainable()) == []


def test_zeroed_layer_is_identity():
    reg, bb = _backbone([1, 1])
    layer = bb.block_layers(0, 0)[0]
    for t in (layer.wo, layer.w2, layer.b2):
        t.data[...] = 0.0
    a = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(bb.run_block(0, 0, Tensor(a)).data, a)


def test_two_layer_block_is_composition():
    _, bb = _backbone([4, 2])
    assert bb.plan[0] == [2, 2]
    layers = bb.block_layers(0, 1)
    a = Tensor(np.random.default_rng(4).normal(size=(3, 4)))
    np.testing.assert_array_equal(bb.run_block(0, 1, a).data, layers[1](layers[0](a)).data)


def test_run_block_batched_matches_per_sample():
    _, bb = _backbone([2, 3])
    a = np.random.default_rng(5).normal(size=(4, 3, 4))
    batched = bb.run_block(1, 0, Tensor(a)).data
    for i in range(4):
        np.testing.assert_allclose(bb.run_block(1, 0, Tensor(a[i])).data, batched[i], rtol=0, atol=1e-13)


def test_run_block_rejects_bad_input():
    _, bb = _backbone([2, 3])
    with pytest.raises(InputError):
        bb.run_block(0, 0, Tensor(np.zeros((3, 5))))
    with pytest.raises(ContractError):
        bb.run_block(0, 2, Tensor(np.zeros((3, 4))))
