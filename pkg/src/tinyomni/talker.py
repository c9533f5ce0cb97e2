from __future__ import annotations

import warnings

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .nn import Block, KVCache, Linear, Module, Parameter, RMSNorm, run_blocks
from .thinker import BridgeState, Thinker


class LayoutError(ValueError):
    pass


class LowRankAdapter(Module):
    def __init__(self, n_in: int, rank: int, n_out: int):
        self.down = Parameter((n_in, rank))
        self.up = Parameter((rank, n_out))


class TalkerEmbedding(Module):
    """Shared code table plus per-codebook rank-r_e corrections.

    Code c of codebook q embeds as ``shared[c] + down_q[c] @ up_q``.
    """

    def __init__(self, vocab: int, hidden: int, rank: int, codebooks: int):
        self.shared = Parameter((vocab, hidden))
        self.adapters = [LowRankAdapter(vocab, rank, hidden) for _ in range(codebooks)] if rank else []

    def codebook(self, ids: np.ndarray, q: int) -> Tensor:
        out = ag.embedding(self.shared, ids)
        if self.adapters:
            a = self.adapters[q]
            out = out + ag.embedding(a.down, ids) @ a.up
        return out

    def __call__(self, codes: np.ndarray) -> Tensor:
        """Sum of codebook embeddings for ``codes`` of shape (B, K, T) -> (B, T, H)."""
        return ag.stack_sum([self.codebook(codes[:, q], q) for q in range(codes.shape[1])])


class TalkerHead(Module):
    """Shared linear head plus per-codebook rank-r_h corrections."""

    def __init__(self, hidden: int, vocab: int, rank: int, codebooks: int):
        self.codebooks = codebooks
        self.shared = Parameter((hidden, vocab))
        self.adapters = [LowRankAdapter(hidden, rank, vocab) for _ in range(codebooks)] if rank else []

    def __call__(self, h: Tensor) -> list[Tensor]:
        base = h @ self.shared
        if not self.adapters:
            return [base] * self.codebooks
        return [base + (h @ a.down) @ a.up for a in self.adapters]


class Talker(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        ht = config.talker_hidden
        self.embedding = TalkerEmbedding(config.audio_vocab, ht, config.adapter_rank_embed, config.codebook_count)
        self.embed_proj = Linear(config.hidden_size, ht)
        self.codec_proj = Linear(ht, ht)
        self.spk_proj = Linear(config.speaker_dim, ht)
        self.text_scale = Parameter((1,), init="ones")
        self.audio_scale = Parameter((1,), init="ones")
        self.blocks = [
            Block(ht, config.num_query_heads, config.num_kv_heads, config.mlp_intermediate, config.norm_eps)
            for _ in range(config.num_talker_hidden_layers)
        ]
        self.norm = RMSNorm(ht, config.norm_eps)
        self.head = TalkerHead(ht, config.audio_vocab, config.adapter_rank_head, config.codebook_count)

    def new_cache(self) -> KVCache:
        return KVCache.empty(len(self.blocks))

    def speaker_positions(self, codes: np.ndarray) -> np.ndarray:
        """(batch, time) pairs whose whole column is the spk id; mixed columns raise."""
        spk = codes == self.config.audio_spk_id
        full = spk.all(axis=1)
        mixed = spk.any(axis=1) & ~full
        if mixed.any():
            b, t = np.argwhere(mixed)[0]
            raise LayoutError(f"position {t} (row {b}) mixes spk and non-spk ids; spk must fill all codebooks")
        return np.argwhere(full)

    def embed_codes(self, codes: np.ndarray, speakers: dict | None = None) -> Tensor:
        """Embed (B, K, T) code columns, replacing spk columns with spk_proj(vector).

        ``speakers`` maps batch row -> speaker vector (length speaker_dim).
        """
        codes = np.asarray(codes)
        cfg = self.config
        if codes.ndim != 3 or codes.shape[1] != cfg.codebook_count:
            raise ag.ShapeError(f"embed_codes: expected (B, {cfg.codebook_count}, T) codes, got {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= cfg.audio_vocab):
            raise LayoutError(f"code ids must lie in [0, {cfg.audio_vocab})")
        speakers = speakers or {}
        where = self.speaker_positions(codes)
        emb = self.embedding(codes)
        if len(where) == 0:
            return emb
        vecs = []
        for b, _t in where:
            if int(b) not in speakers:
                raise LayoutError(f"spk token at row {b} position {_t} has no speaker vector")
            v = np.asarray(speakers[int(b)])
            if v.shape != (cfg.speaker_dim,):
                raise LayoutError(f"speaker vector must have length {cfg.speaker_dim}, got {v.shape}")
            vecs.append(v)
        injected = self.spk_proj(Tensor(np.stack(vecs)))
        return ag.scatter_rows(emb, (where[:, 0], where[:, 1]), injected)

    def fuse_inputs(self, bridge: BridgeState | Tensor, codec_embedding: Tensor) -> Tensor:
        states = bridge.states if isinstance(bridge, BridgeState) else bridge
        if states.shape[:-1] != codec_embedding.shape[:-1]:
            raise ag.ShapeError(
                f"fuse_inputs: bridge {states.shape} and codec history {codec_embedding.shape} differ in length")
        text = self.embed_proj(states) * self.text_scale
        audio = self.codec_proj(codec_embedding) * self.audio_scale
        return text + audio

    def __call__(self, fused: Tensor, cache: KVCache | None = None, start: int | None = None) -> list[Tensor]:
        """Per-codebook logits, each (B, T, audio_vocab)."""
        x = run_blocks(self.blocks, fused, cache, start, self.config.rope_theta)
        return self.head(self.norm(x))


def talker_init_from_thinker(talker: Talker, thinker: Thinker) -> bool:
    """Copy the last ``len(talker.blocks)`` Thinker blocks into the Talker.

    Returns False (and warns) when shapes are incompatible; the Talker then
    keeps its fresh initialisation.
    """
    tc, hc = talker.config, thinker.config
    n = len(talker.blocks)
    if tc.talker_hidden != hc.hidden_size or len(thinker.blocks) < n:
        warnings.warn(
            f"talker init: thinker (hidden {hc.hidden_size}, {len(thinker.blocks)} blocks) is incompatible "
            f"with talker (hidden {tc.talker_hidden}, {n} blocks); keeping fresh init",
            stacklevel=2,
        )
        return False
    first = len(thinker.blocks) - n
    for k, block in enumerate(talker.blocks):
        src = dict(thinker.blocks[first + k].named_parameters())
        for name, p in block.named_parameters():
            if src[name].shape != p.shape:
                warnings.warn(f"talker init: shape mismatch at {name}; keeping fresh init", stacklevel=2)
                return False
    for k, block in enumerate(talker.blocks):
        src = dict(thinker.blocks[first + k].named_parameters())
        for name, p in block.named_parameters():
            p.data[...] = src[name].data
    return True
