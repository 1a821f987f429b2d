"""Map tensor names to (layer index, component group).

Rules are ordered ``(regex, group)`` pairs; the first rule whose pattern is
found in the name wins. The layer index is taken from a separate regex with
one capture group. Both can be replaced by a JSON rule file::

    {
      "layer_index_pattern": "(?:layers|blocks|h)\\.(\\d+)\\.",
      "rules": [{"pattern": "\\.v_proj\\.weight$", "group": "attn_v"}, ...]
    }
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class ComponentGroup(str, Enum):
    ATTN_Q = "attn_q"
    ATTN_K = "attn_k"
    ATTN_V = "attn_v"
    ATTN_O = "attn_o"
    MLP_UP = "mlp_up"
    MLP_DOWN = "mlp_down"
    MLP_GATE = "mlp_gate"
    EMBEDDING = "embedding"
    VISION_Q = "vision_q"
    OTHER = "other"


# Sort key for groups inside one layer: attention first, then MLP.
GROUP_ORDER = {g: i for i, g in enumerate(ComponentGroup)}

_VISION = r"(?:^|\.)(?:visual|vision_model|vision_tower|vision_encoder|vit)\."

DEFAULT_RULES: tuple[tuple[str, str], ...] = (
    # vision encoder query projections (Qwen-VL style split qkv, CLIP/SigLIP/InternViT style)
    (_VISION + r".*\.(?:attn|self_attn|attention)\.(?:qkv_q|q_proj|query|q)\.weight$", "vision_q"),
    (r"\.(?:self_attn|attn|attention)\.(?:q_proj|query|wq|q)\.weight$", "attn_q"),
    (r"\.(?:self_attn|attn|attention)\.(?:k_proj|key|wk|k)\.weight$", "attn_k"),
    (r"\.(?:self_attn|attn|attention)\.(?:v_proj|value|wv|v)\.weight$", "attn_v"),
    (r"\.(?:self_attn|attn|attention)\.(?:o_proj|out_proj|dense|wo|c_proj|proj)\.weight$", "attn_o"),
    (r"\.(?:mlp|feed_forward|ffn)\.(?:up_proj|fc1|w3|c_fc|dense_h_to_4h)\.weight$", "mlp_up"),
    (r"\.(?:mlp|feed_forward|ffn)\.(?:down_proj|fc2|w2|c_proj|dense_4h_to_h)\.weight$", "mlp_down"),
    (r"\.(?:mlp|feed_forward|ffn)\.(?:gate_proj|w1)\.weight$", "mlp_gate"),
    (r"(?:^|\.)(?:embed_tokens|wte|tok_embeddings|word_embeddings|lm_head|output)\.weight$", "embedding"),
)

DEFAULT_LAYER_INDEX_PATTERN = r"(?:^|\.)(?:layers|layer|blocks|h)\.(\d+)\."


@dataclass(frozen=True)
class Ruleset:
    rules: tuple[tuple[str, str], ...] = DEFAULT_RULES
    layer_index_pattern: str = DEFAULT_LAYER_INDEX_PATTERN
    _compiled: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        compiled = tuple((re.compile(p), ComponentGroup(g)) for p, g in self.rules)
        object.__setattr__(self, "_compiled", compiled)
        re.compile(self.layer_index_pattern)

    @classmethod
    def from_file(cls, path: str | Path) -> "Ruleset":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        unknown = set(doc) - {"rules", "layer_index_pattern"}
        if unknown:
            raise ValueError(f"unknown ruleset keys: {sorted(unknown)}")
        rules = tuple((r["pattern"], r["group"]) for r in doc.get("rules", []))
        return cls(
            rules=rules or DEFAULT_RULES,
            layer_index_pattern=doc.get("layer_index_pattern", DEFAULT_LAYER_INDEX_PATTERN),
        )


DEFAULT_RULESET = Ruleset()


def classify_layer(tensor_name: str, ruleset: Ruleset = DEFAULT_RULESET) -> tuple[int | None, ComponentGroup]:
    """Return ``(layer_index, component_group)`` for a tensor name.

    Unmatched names give ``(None, OTHER)``; the index is ``None`` when the
    name carries no depth segment.

    >>> classify_layer("model.layers.23.self_attn.v_proj.weight")
    (23, <ComponentGroup.ATTN_V: 'attn_v'>)
    """
    m = re.search(ruleset.layer_index_pattern, tensor_name)
    index = int(m.group(1)) if m else None
    for pattern, group in ruleset._compiled:
        if pattern.search(tensor_name):
            return index, group
    return None, ComponentGroup.OTHER
