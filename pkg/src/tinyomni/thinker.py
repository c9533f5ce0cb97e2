from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig, default_bridge_index
from .nn import Block, KVCache, Module, Parameter, RMSNorm, block_parameter_count, run_blocks

__all__ = ["BridgeState", "Thinker", "ThinkerOutput", "default_bridge_index", "count_parameters"]


@dataclass
class BridgeState:
    states: Tensor  # (B, T, hidden_size)
    source_layer: int


@dataclass
class ThinkerOutput:
    text_logits: Tensor  # (B, T, text_vocab)
    bridge: BridgeState
    kv_cache: KVCache | None
    hidden_states: dict[int, Tensor] | None = None


class Thinker(Module):
    """Causal GQA transformer with a tied LM head and a middle-layer bridge tap."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.embed = Parameter((config.text_vocab, config.hidden_size))
        self.blocks = [
            Block(config.hidden_size, config.num_query_heads, config.num_kv_heads,
                  config.mlp_intermediate, config.norm_eps)
            for _ in range(config.num_hidden_layers)
        ]
        self.norm = RMSNorm(config.hidden_size, config.norm_eps)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return ag.embedding(self.embed, ids)

    def new_cache(self) -> KVCache:
        return KVCache.empty(len(self.blocks))

    def __call__(self, input_embeddings: Tensor, cache: KVCache | None = None,
                 start: int | None = None, keep_hidden: bool = False) -> ThinkerOutput:
        """Run the backbone on (B, T, H) embeddings that already carry modality states.

        With a cache, positions continue from ``cache.length``; passing a
        ``start`` that disagrees raises CacheError.
        """
        if input_embeddings.ndim != 3 or input_embeddings.shape[-1] != self.config.hidden_size:
            raise ag.ShapeError(
                f"thinker: expected (B, T, {self.config.hidden_size}) embeddings, got {input_embeddings.shape}")
        bridge_at = self.config.bridge_index
        taps: dict[int, Tensor] = {}
        x = run_blocks(self.blocks, input_embeddings, cache, start, self.config.rope_theta, taps)
        logits = self.norm(x) @ ag.transpose(self.embed, (1, 0))
        return ThinkerOutput(
            text_logits=logits,
            bridge=BridgeState(taps[bridge_at], bridge_at),
            kv_cache=cache,
            hidden_states=taps if keep_hidden else None,
        )


def thinker_parameter_count(config: ModelConfig) -> int:
    per_block = block_parameter_count(config.hidden_size, config.num_query_heads,
                                      config.num_kv_heads, config.mlp_intermediate)
    # tied LM head is the embedding matrix; counted once
    embed = config.text_vocab * config.hidden_size
    if config.num_hidden_layers == 0:
        return embed
    return embed + config.num_hidden_layers * per_block + config.hidden_size


def projector_parameter_count(feature_dim: int, hidden: int) -> int:
    return 2 * feature_dim + (feature_dim * hidden + hidden) + (hidden * hidden + hidden)


def adapter_parameter_count(rank: int, vocab: int, hidden: int) -> int:
    return rank * (vocab + hidden)


def talker_parameter_count(config: ModelConfig) -> int:
    ht, va, k = config.talker_hidden, config.audio_vocab, config.codebook_count
    blocks = config.num_talker_hidden_layers * block_parameter_count(
        ht, config.num_query_heads, config.num_kv_heads, config.mlp_intermediate)
    shared = 2 * va * ht
    adapters = k * (adapter_parameter_count(config.adapter_rank_embed, va, ht)
                    + adapter_parameter_count(config.adapter_rank_head, va, ht))
    projections = config.hidden_size * ht + ht * ht + config.speaker_dim * ht
    return blocks + shared + adapters + projections + ht + 2


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Structural parameter counts per trainable module (tied head counted once)."""
    counts = {
        "thinker": thinker_parameter_count(config),
        "talker": talker_parameter_count(config),
        "audio_projector": projector_parameter_count(config.audio_feature_dim, config.hidden_size),
        "vision_projector": projector_parameter_count(config.vision_feature_dim, config.hidden_size),
        "talker_embedding_adapter_per_codebook": adapter_parameter_count(
            config.adapter_rank_embed, config.audio_vocab, config.talker_hidden),
        "talker_head_adapter_per_codebook": adapter_parameter_count(
            config.adapter_rank_head, config.audio_vocab, config.talker_hidden),
    }
    counts["total"] = (counts["thinker"] + counts["talker"]
                       + counts["audio_projector"] + counts["vision_projector"])
    return counts
