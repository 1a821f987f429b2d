import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from paramscope.classify import ComponentGroup as G
from paramscope.classify import Ruleset, classify_layer


@pytest.mark.parametrize(
    "name, expected",
    [
        ("model.layers.23.self_attn.v_proj.weight", (23, G.ATTN_V)),
        ("model.layers.7.mlp.up_proj.weight", (7, G.MLP_UP)),
        ("visual.blocks.3.attn.qkv_q.weight", (3, G.VISION_Q)),
        ("model.layers.0.self_attn.q_proj.weight", (0, G.ATTN_Q)),
        ("model.layers.35.self_attn.k_proj.weight", (35, G.ATTN_K)),
        ("model.layers.2.self_attn.o_proj.weight", (2, G.ATTN_O)),
        ("model.layers.2.mlp.down_proj.weight", (2, G.MLP_DOWN)),
        ("model.layers.2.mlp.gate_proj.weight", (2, G.MLP_GATE)),
        ("model.embed_tokens.weight", (None, G.EMBEDDING)),
        ("vision_model.encoder.layers.4.self_attn.q_proj.weight", (4, G.VISION_Q)),
        ("model.language_model.layers.9.self_attn.v_proj.weight", (9, G.ATTN_V)),
        ("transformer.h.5.mlp.c_fc.weight", (5, G.MLP_UP)),
        ("layers.1.feed_forward.w1.weight", (1, G.MLP_GATE)),
        ("model.norm.weight", (None, G.OTHER)),
        ("model.layers.3.input_layernorm.weight", (None, G.OTHER)),
    ],
)
def test_default_rules(name, expected):
    assert classify_layer(name) == expected


@given(st.text(max_size=60))
def test_total_and_deterministic(name):
    first = classify_layer(name)
    assert first == classify_layer(name)
    index, group = first
    assert isinstance(group, G)
    assert index is None or index >= 0


def test_rule_file(tmp_path):
    p = tmp_path / "rules.json"
    p.write_text(json.dumps({
        "layer_index_pattern": r"blk\.(\d+)\.",
        "rules": [{"pattern": r"attn_v\.weight$", "group": "attn_v"}],
    }))
    rules = Ruleset.from_file(p)
    assert classify_layer("blk.12.attn_v.weight", rules) == (12, G.ATTN_V)
    assert classify_layer("model.layers.1.self_attn.v_proj.weight", rules) == (None, G.OTHER)


def test_rule_file_rejects_unknown_keys_and_groups(tmp_path):
    p = tmp_path / "rules.json"
    p.write_text(json.dumps({"rules": [], "extra": 1}))
    with pytest.raises(ValueError):
        Ruleset.from_file(p)
    p.write_text(json.dumps({"rules": [{"pattern": "x", "group": "attn_z"}]}))
    with pytest.raises(ValueError):
        Ruleset.from_file(p)
