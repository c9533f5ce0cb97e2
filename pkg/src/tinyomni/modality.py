"""Frozen encoder stand-ins, the MLP projectors and placeholder injection."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import AUDIO_PLACEHOLDER, IMAGE_PLACEHOLDER, ModelConfig
from .nn import Linear, Module, Parameter

MODALITIES = ("audio", "vision")
PLACEHOLDER_IDS = {"audio": AUDIO_PLACEHOLDER, "vision": IMAGE_PLACEHOLDER}


class InjectionError(ValueError):
    pass


@dataclass(frozen=True)
class PlaceholderSpan:
    modality: str
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


def _content_rng(kind: str, content: bytes) -> np.random.Generator:
    digest = hashlib.sha256(kind.encode() + b"\0" + content).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype="<u4"))


def stub_length(kind: str, num_bytes: int, config: ModelConfig) -> int:
    if kind == "vision":
        return config.image_token_count
    if kind == "audio":
        return math.ceil(num_bytes / config.audio_bytes_per_feature)
    raise ValueError(f"unknown modality {kind!r}")


def encode_stub(kind: str, content: bytes, config: ModelConfig) -> np.ndarray:
    """Deterministic (L, feature_dim) features keyed by a hash of ``content``.

    Stands in for the frozen speech and image encoders: vision always yields
    ``image_token_count`` rows, audio one row per ``audio_bytes_per_feature``
    bytes (rounded up).
    """
    if not content:
        raise ValueError(f"{kind} encoder stub: empty content")
    dim = config.audio_feature_dim if kind == "audio" else config.vision_feature_dim
    length = stub_length(kind, len(content), config)
    return _content_rng(kind, content).standard_normal((length, dim))


class Projector(Module):
    """LayerNorm -> Linear -> GELU -> Linear, feature_dim to hidden."""

    def __init__(self, feature_dim: int, hidden: int, eps: float = 1e-5):
        self.feature_dim = feature_dim
        self.norm_gain = Parameter((feature_dim,), init="ones")
        self.norm_bias = Parameter((feature_dim,), init="zeros")
        self.linear1 = Linear(feature_dim, hidden, bias=True)
        self.linear2 = Linear(hidden, hidden, bias=True)
        self.eps = eps

    def __call__(self, features) -> Tensor:
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if features.shape[-1] != self.feature_dim:
            raise ag.ShapeError(
                f"project: features have dim {features.shape[-1]}, projector expects {self.feature_dim}")
        x = ag.layernorm(features, self.norm_gain, self.norm_bias, self.eps)
        return self.linear2(ag.gelu(self.linear1(x)))


def check_spans(spans, seq_len: int | None = None) -> None:
    ordered = sorted(spans, key=lambda s: s.start)
    for s in ordered:
        if s.length <= 0 or s.start < 0 or (seq_len is not None and s.stop > seq_len):
            raise InjectionError(f"span {s} does not fit a sequence of length {seq_len}")
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.stop:
            raise InjectionError(f"overlapping spans {a} and {b}")


def inject(embeddings: Tensor, spans, projected, rows=None) -> Tensor:
    """Replace span rows of ``embeddings`` with projected modality states.

    ``embeddings`` is (T, H), or (B, T, H) with ``rows[i]`` giving the batch
    row of ``spans[i]``. Rows outside every span are passed through unchanged.
    """
    spans = list(spans)
    projected = list(projected)
    if len(spans) != len(projected):
        raise InjectionError(f"{len(spans)} spans but {len(projected)} projected sequences")
    if not spans:
        return embeddings
    batched = embeddings.ndim == 3
    if batched and (rows is None or len(rows) != len(spans)):
        raise InjectionError("batched injection needs one batch row per span")
    seq_len = embeddings.shape[-2]
    groups: dict[int, list] = {}
    for i, span in enumerate(spans):
        groups.setdefault(rows[i] if batched else 0, []).append(span)
    for group in groups.values():
        check_spans(group, seq_len)

    idx_b, idx_t = [], []
    for i, (span, states) in enumerate(zip(spans, projected)):
        if states.shape[0] != span.length:
            raise InjectionError(
                f"span {span} expects {span.length} states, projector produced {states.shape[0]}")
        idx_t.append(np.arange(span.start, span.stop))
        idx_b.append(np.full(span.length, rows[i] if batched else 0))
    values = projected[0] if len(projected) == 1 else _concat_rows(projected)
    index = (np.concatenate(idx_b), np.concatenate(idx_t)) if batched else (np.concatenate(idx_t),)
    return ag.scatter_rows(embeddings, index, values)


def _concat_rows(parts: list[Tensor]) -> Tensor:
    """Row-concatenate (L_i, H) tensors."""
    sizes = [p.shape[0] for p in parts]
    total = sum(sizes)
    width = parts[0].shape[1]
    base = Tensor(np.zeros((total, width), dtype=parts[0].dtype))
    offset = 0
    out = base
    for p, n in zip(parts, sizes):
        out = ag.scatter_rows(out, (np.arange(offset, offset + n),), p)
        offset += n
    return out
