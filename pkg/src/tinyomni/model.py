"""The assembled Thinker-Talker model, batched forward pass and checkpoint files.

Checkpoint layout (all integers little-endian)::

    magic   8 bytes  b"TOMNICKP"
    version u32      1
    cfg_len u32, cfg JSON (utf-8, ModelConfig fields)
    count   u32
    count x { name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
              ndim u32, dims u32 * ndim, values little-endian }
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .modality import PlaceholderSpan, Projector, encode_stub, inject
from .nn import KVCache, Module
from .talker import Talker
from .thinker import Thinker, ThinkerOutput

MAGIC = b"TOMNICKP"
VERSION = 1
MODULE_PREFIXES = ("thinker", "talker", "audio_proj", "vision_proj")


class CheckpointError(ValueError):
    pass


@dataclass
class ModalityInput:
    row: int
    span: PlaceholderSpan
    content: bytes


@dataclass
class Batch:
    """Collated model input; arrays are right-padded to a common length."""

    text_tokens: np.ndarray  # (B, T)
    text_labels: np.ndarray  # (B, T)
    audio_streams: np.ndarray  # (B, K, T)
    audio_labels: np.ndarray  # (B, K, T)
    modality: list[ModalityInput] = field(default_factory=list)
    speakers: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.text_tokens.shape[0]


class OmniModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.thinker = Thinker(config)
        self.talker = Talker(config)
        self.audio_proj = Projector(config.audio_feature_dim, config.hidden_size, config.norm_eps)
        self.vision_proj = Projector(config.vision_feature_dim, config.hidden_size, config.norm_eps)
        self.init_parameters(seed, config.init_std)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != model {p.shape}")
            p.data[...] = state[name]

    def module_hashes(self) -> dict[str, str]:
        """sha256 over the raw bytes of each top-level module's parameters."""
        out = {}
        for prefix in MODULE_PREFIXES:
            h = hashlib.sha256()
            for name, p in self.named_parameters():
                if name.startswith(prefix + "."):
                    h.update(name.encode())
                    h.update(p.data.tobytes())
            out[prefix] = h.hexdigest()
        return out

    # ------------------------------------------------------------------ forward

    def project_modality(self, kind: str, content: bytes) -> Tensor:
        proj = self.audio_proj if kind == "audio" else self.vision_proj
        return proj(encode_stub(kind, content, self.config))

    def thinker_inputs(self, text_tokens: np.ndarray, modality: list[ModalityInput]) -> Tensor:
        emb = self.thinker.embed_tokens(text_tokens)
        if not modality:
            return emb
        projected = [self.project_modality(m.span.modality, m.content) for m in modality]
        return inject(emb, [m.span for m in modality], projected, rows=[m.row for m in modality])

    def forward(self, batch: Batch) -> tuple[ThinkerOutput, list[Tensor]]:
        """Full-sequence forward: Thinker logits and the eight Talker logit streams.

        Logits at position p predict the stream values at p + 1.
        """
        out = self.thinker(self.thinker_inputs(batch.text_tokens, batch.modality))
        codec = self.talker.embed_codes(batch.audio_streams, batch.speakers)
        fused = self.talker.fuse_inputs(out.bridge, codec)
        return out, self.talker(fused)

    def step(self, text_tokens: np.ndarray, audio_columns: np.ndarray, thinker_cache: KVCache,
             talker_cache: KVCache, modality: list[ModalityInput] | None = None,
             speakers: dict | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
        """Incremental forward over new positions; returns last-position logits."""
        with ag.no_grad():
            out = self.thinker(self.thinker_inputs(text_tokens, modality or []), cache=thinker_cache)
            codec = self.talker.embed_codes(audio_columns, speakers)
            fused = self.talker.fuse_inputs(out.bridge, codec)
            talker_logits = self.talker(fused, cache=talker_cache)
        return out.text_logits.data[:, -1], [lg.data[:, -1] for lg in talker_logits]

    # --------------------------------------------------------------- checkpoint

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.config, self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "OmniModel":
        config, state = load_checkpoint(path)
        dtypes = {a.dtype for a in state.values()}
        bits = 64 if np.dtype(np.float64) in dtypes else 32
        with ag.precision(bits):
            model = cls(config)
        model.load_state_dict(state)
        return model


def save_checkpoint(path: str | Path, config: ModelConfig, state: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, arr in state.items():
        code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = memoryview(Path(path).read_bytes())
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    config = ModelConfig.from_dict(json.loads(bytes(take(cfg_len))))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode()
        code, ndim = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = np.dtype("<f4") if code == 0 else np.dtype("<f8")
        size = int(np.prod(shape)) * dtype.itemsize
        state[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, state
