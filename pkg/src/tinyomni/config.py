from __future__ import annotations

import dataclasses
from dataclasses import dataclass

# Text-side special ids (toy tokenizer; content ids start at FIRST_CONTENT_ID).
TEXT_PAD = 0
TEXT_BOS = 1
TEXT_EOS = 2
AUDIO_PLACEHOLDER = 3  # <|audio_pad|>
IMAGE_PLACEHOLDER = 4  # <|image_pad|>
ASSISTANT = 5
FIRST_CONTENT_ID = 6

SPEAKER_DIM = 192


def default_bridge_index(num_hidden_layers: int) -> int:
    """Block index whose output feeds the Talker: ``num_hidden_layers // 2 - 1``."""
    if num_hidden_layers < 2:
        raise ValueError(f"need at least 2 layers for a middle bridge, got {num_hidden_layers}")
    return num_hidden_layers // 2 - 1


@dataclass
class ModelConfig:
    num_hidden_layers: int = 8
    hidden_size: int = 768
    num_query_heads: int = 8
    num_kv_heads: int = 4
    text_vocab: int = 6400
    mlp_intermediate: int = 2048
    num_talker_hidden_layers: int = 4
    talker_hidden: int = 768
    audio_vocab: int = 2112
    codebook_count: int = 8
    codebook_size: int = 2048
    adapter_rank_embed: int = 256
    adapter_rank_head: int = 256
    bridge_layer_index: int | None = None
    audio_feature_dim: int = 512
    vision_feature_dim: int = 768
    image_token_count: int = 64
    speaker_dim: int = SPEAKER_DIM
    lambda_audio: float = 1.0
    # artifact knobs
    stagger_base: int = 1
    audio_bytes_per_feature: int = 1024
    rope_theta: float = 1e6
    norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self) -> None:
        problems = []
        if self.num_query_heads % self.num_kv_heads:
            problems.append("num_query_heads must be divisible by num_kv_heads")
        if self.hidden_size % self.num_query_heads:
            problems.append("hidden_size must be divisible by num_query_heads")
        if self.talker_hidden % self.num_query_heads:
            problems.append("talker_hidden must be divisible by num_query_heads")
        if (self.hidden_size // self.num_query_heads) % 2 or (self.talker_hidden // self.num_query_heads) % 2:
            problems.append("head dimension must be even for rotary positions")
        if self.audio_vocab < self.codebook_size + 4:
            problems.append("audio_vocab must leave room for pad/bos/eos/spk after the codebook ids")
        if self.codebook_count < 1:
            problems.append("codebook_count must be positive")
        for name in ("adapter_rank_embed", "adapter_rank_head"):
            r = getattr(self, name)
            if r < 0 or r > self.talker_hidden:
                problems.append(f"{name}={r} must lie in [0, talker_hidden]")
        if self.num_talker_hidden_layers < 0 or self.num_hidden_layers < 0:
            problems.append("layer counts must be non-negative")
        if self.bridge_layer_index is not None and not 0 <= self.bridge_layer_index < self.num_hidden_layers:
            problems.append(f"bridge_layer_index {self.bridge_layer_index} outside [0, {self.num_hidden_layers})")
        if self.stagger_base < 1:
            problems.append("stagger_base must be >= 1")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def bridge_index(self) -> int:
        if self.bridge_layer_index is not None:
            return self.bridge_layer_index
        return default_bridge_index(self.num_hidden_layers)

    @property
    def audio_pad_id(self) -> int:
        return self.codebook_size

    @property
    def audio_bos_id(self) -> int:
        return self.codebook_size + 1

    @property
    def audio_eos_id(self) -> int:
        return self.codebook_size + 2

    @property
    def audio_spk_id(self) -> int:
        return self.codebook_size + 3

    @property
    def frame_delay(self) -> int:
        """Text steps between a frame's text token and its completion (8 by default)."""
        return self.codebook_count - 1 + self.stagger_base

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def full_config() -> ModelConfig:
    """Module dimensions of the released dense model."""
    return ModelConfig()


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale config: thinker 4x64, talker 2x64, vocab 64, 8 codebooks of 64, ranks 8."""
    base = dict(
        num_hidden_layers=4,
        hidden_size=64,
        num_query_heads=4,
        num_kv_heads=2,
        text_vocab=64,
        mlp_intermediate=192,
        num_talker_hidden_layers=2,
        talker_hidden=64,
        audio_vocab=72,
        codebook_count=8,
        codebook_size=64,
        adapter_rank_embed=8,
        adapter_rank_head=8,
        audio_feature_dim=32,
        vision_feature_dim=48,
        image_token_count=4,
    )
    base.update(overrides)
    return ModelConfig(**base)
