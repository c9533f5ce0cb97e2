"""Dataset records on disk and the synthetic oracle codec task.

Record file layout::

    line 1   JSON header + b"\\n": {"format": "tinyomni-records", "version": 1,
             "count": N, "codebook_count": K, "codebook_size": S, "speaker_dim": 192,
             "oracle": {...} or null}
    N times  u32 payload length, payload

Payload: u32 meta length, meta JSON (conversation, span modalities and byte
sizes, grid shapes, speaker name, has-speaker flag), then span bytes in
order, response codes (int32 LE, K x T'), reference codes (int32 LE, K x R),
speaker vector (float32 LE, 192). Field mapping to the released Parquet
columns: conversation -> text, spans -> image bytes / speech inputs,
response_codes -> Mimi code targets, ref_codes -> reference-code prompts,
speaker_vector -> speaker embeddings.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    ASSISTANT, FIRST_CONTENT_ID, SPEAKER_DIM, TEXT_BOS, TEXT_EOS, ModelConfig,
)
from .modality import PLACEHOLDER_IDS, PlaceholderSpan, stub_length
from .sequence import OmniExample, build_example

FORMAT = "tinyomni-records"
VERSION = 1


class RecordError(ValueError):
    def __init__(self, index: int | None, message: str):
        where = f"record {index}: " if index is not None else ""
        super().__init__(where + message)
        self.index = index


# ---------------------------------------------------------------- tokenizer

SPECIAL_WORDS = {0: "<pad>", 1: "<bos>", 2: "<eos>", 3: "<|audio_pad|>", 4: "<|image_pad|>", 5: "<|assistant|>"}


def encode_text(text: str) -> list[int]:
    """Toy word tokenizer: ``"w17 w9"`` -> ``[17, 9]``."""
    ids = []
    for word in text.split():
        if not (word.startswith("w") and word[1:].isdigit()) or int(word[1:]) < FIRST_CONTENT_ID:
            raise ValueError(f"not a toy content word: {word!r}")
        ids.append(int(word[1:]))
    return ids


def decode_text(ids) -> str:
    return " ".join(SPECIAL_WORDS.get(int(i), f"w{int(i)}") for i in ids)


# ------------------------------------------------------------------ records


@dataclass
class SpanInput:
    modality: str
    content: bytes


@dataclass
class DatasetRecord:
    conversation: list[tuple[str, str]]
    response_codes: np.ndarray
    spans: list[SpanInput] = field(default_factory=list)
    ref_codes: np.ndarray | None = None
    speaker_vector: np.ndarray | None = None
    speaker_name: str | None = None

    def __post_init__(self) -> None:
        self.response_codes = np.asarray(self.response_codes, dtype=np.int64)
        if self.ref_codes is not None:
            self.ref_codes = np.asarray(self.ref_codes, dtype=np.int64)
        if self.speaker_vector is not None:
            self.speaker_vector = np.asarray(self.speaker_vector, dtype=np.float32)

    def to_json(self) -> dict:
        return {
            "conversation": [list(t) for t in self.conversation],
            "spans": [{"modality": s.modality, "bytes": len(s.content),
                       "crc32": zlib.crc32(s.content)} for s in self.spans],
            "response_codes": self.response_codes.tolist(),
            "ref_codes": None if self.ref_codes is None else self.ref_codes.tolist(),
            "speaker_name": self.speaker_name,
            "speaker_vector": None if self.speaker_vector is None else self.speaker_vector.tolist(),
        }

    def equals(self, other: "DatasetRecord") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()
        return (self.conversation == other.conversation
                and [(s.modality, s.content) for s in self.spans] == [(s.modality, s.content) for s in other.spans]
                and same(self.response_codes, other.response_codes)
                and same(self.ref_codes, other.ref_codes)
                and same(self.speaker_vector, other.speaker_vector)
                and self.speaker_name == other.speaker_name)


def _check_record(rec: DatasetRecord, index: int, codebook_count: int, codebook_size: int) -> None:
    for label, grid in (("response", rec.response_codes), ("reference", rec.ref_codes)):
        if grid is None:
            continue
        if grid.ndim != 2 or grid.shape[0] != codebook_count:
            raise RecordError(index, f"{label} codes must be {codebook_count} x T, got {grid.shape}")
        if grid.size and (grid.min() < 0 or grid.max() >= codebook_size):
            raise RecordError(index, f"{label} code id out of range [0, {codebook_size})")
    if rec.speaker_vector is not None and rec.speaker_vector.shape != (SPEAKER_DIM,):
        raise RecordError(index, f"speaker vector must have length {SPEAKER_DIM}, got {rec.speaker_vector.shape}")
    for s in rec.spans:
        if s.modality not in PLACEHOLDER_IDS or not s.content:
            raise RecordError(index, f"bad span {s.modality!r} with {len(s.content)} bytes")


def _encode_record(rec: DatasetRecord) -> bytes:
    meta = {
        "conversation": [list(t) for t in rec.conversation],
        "spans": [[s.modality, len(s.content)] for s in rec.spans],
        "response_shape": list(rec.response_codes.shape),
        "ref_shape": None if rec.ref_codes is None else list(rec.ref_codes.shape),
        "speaker": rec.speaker_vector is not None,
        "speaker_name": rec.speaker_name,
    }
    raw = json.dumps(meta).encode()
    parts = [struct.pack("<I", len(raw)), raw]
    parts += [s.content for s in rec.spans]
    parts.append(rec.response_codes.astype("<i4").tobytes())
    if rec.ref_codes is not None:
        parts.append(rec.ref_codes.astype("<i4").tobytes())
    if rec.speaker_vector is not None:
        parts.append(rec.speaker_vector.astype("<f4").tobytes())
    return b"".join(parts)


def _decode_record(buf: bytes, index: int) -> DatasetRecord:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise RecordError(index, "truncated record payload")
        out = buf[pos:pos + n]
        pos += n
        return out

    (n,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(n))
    except json.JSONDecodeError as exc:
        raise RecordError(index, f"corrupt record metadata ({exc})") from None
    spans = [SpanInput(m, take(size)) for m, size in meta["spans"]]
    k, t = meta["response_shape"]
    response = np.frombuffer(take(4 * k * t), dtype="<i4").reshape(k, t).astype(np.int64)
    ref = None
    if meta["ref_shape"] is not None:
        k2, r = meta["ref_shape"]
        ref = np.frombuffer(take(4 * k2 * r), dtype="<i4").reshape(k2, r).astype(np.int64)
    vec = None
    if meta["speaker"]:
        vec = np.frombuffer(take(4 * SPEAKER_DIM), dtype="<f4").astype(np.float32)
    if pos != len(buf):
        raise RecordError(index, f"{len(buf) - pos} unexpected trailing bytes")
    return DatasetRecord([tuple(t) for t in meta["conversation"]], response, spans, ref, vec, meta["speaker_name"])


def write_records(path, records, codebook_count: int = 8, codebook_size: int = 2048,
                  oracle: "OracleTaskSpec | None" = None) -> None:
    records = list(records)
    for i, rec in enumerate(records):
        _check_record(rec, i, codebook_count, codebook_size)
    header = {
        "format": FORMAT, "version": VERSION, "count": len(records),
        "codebook_count": codebook_count, "codebook_size": codebook_size,
        "speaker_dim": SPEAKER_DIM, "oracle": oracle.to_json() if oracle else None,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for rec in records:
            payload = _encode_record(rec)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    if not line:
        return {"format": FORMAT, "version": VERSION, "count": 0, "oracle": None}
    try:
        header = json.loads(line)
    except json.JSONDecodeError:
        raise RecordError(None, f"{path}: unreadable header") from None
    if header.get("format") != FORMAT:
        raise RecordError(None, f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise RecordError(None, f"{path}: version {header.get('version')} is not supported (expected {VERSION})")
    return header


def read_records(path, shuffle: bool = False, seed: int = 0) -> list[DatasetRecord]:
    """Read every record; an empty file is an empty dataset."""
    raw = Path(path).read_bytes()
    if not raw:
        return []
    header = read_header(path)
    pos = raw.index(b"\n") + 1
    records = []
    for i in range(header["count"]):
        if pos + 4 > len(raw):
            raise RecordError(i, "truncated record length")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + n > len(raw):
            raise RecordError(i, "truncated record payload")
        rec = _decode_record(raw[pos:pos + n], i)
        _check_record(rec, i, header["codebook_count"], header["codebook_size"])
        records.append(rec)
        pos += n
    if pos != len(raw):
        raise RecordError(None, f"{len(raw) - pos} bytes after the last record")
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(records))
        records = [records[i] for i in order]
    return records


# -------------------------------------------------------------- oracle task


@dataclass
class OracleTaskSpec:
    """Invertible per-codebook affine map from text ids to codes."""

    multipliers: list[int]
    offsets: list[int]
    text_vocab: int
    codebook_size: int

    def __post_init__(self) -> None:
        if len(self.multipliers) != len(self.offsets):
            raise ValueError("one multiplier and one offset per codebook")
        for a in self.multipliers:
            if math.gcd(a, self.codebook_size) != 1:
                raise ValueError(f"multiplier {a} is not coprime with codebook size {self.codebook_size}")
        if self.text_vocab > self.codebook_size:
            raise ValueError("text vocab must not exceed codebook size for the mapping to be invertible")

    @property
    def codebook_count(self) -> int:
        return len(self.multipliers)

    @classmethod
    def random(cls, codebook_count: int, text_vocab: int, codebook_size: int, seed: int = 0) -> "OracleTaskSpec":
        rng = np.random.default_rng(seed)
        units = [a for a in range(3, codebook_size) if math.gcd(a, codebook_size) == 1]
        mult = [int(x) for x in rng.choice(units, size=codebook_count, replace=len(units) < codebook_count)]
        off = [int(x) for x in rng.integers(0, codebook_size, codebook_count)]
        return cls(mult, off, text_vocab, codebook_size)

    @classmethod
    def for_config(cls, config: ModelConfig, seed: int = 0) -> "OracleTaskSpec":
        return cls.random(config.codebook_count, config.text_vocab, config.codebook_size, seed)

    def encode(self, tokens) -> np.ndarray:
        """K x T code grid: ``(a_q * t + b_q) mod size``."""
        t = np.asarray(tokens, dtype=np.int64)
        a = np.asarray(self.multipliers, dtype=np.int64)[:, None]
        b = np.asarray(self.offsets, dtype=np.int64)[:, None]
        return (a * t[None, :] + b) % self.codebook_size

    def inverses(self) -> list[int]:
        return [pow(a, -1, self.codebook_size) for a in self.multipliers]

    def to_json(self) -> dict:
        return {"multipliers": self.multipliers, "offsets": self.offsets,
                "text_vocab": self.text_vocab, "codebook_size": self.codebook_size}

    @classmethod
    def from_json(cls, d: dict) -> "OracleTaskSpec":
        return cls(list(d["multipliers"]), list(d["offsets"]), d["text_vocab"], d["codebook_size"])


def oracle_transcribe(grid, spec: OracleTaskSpec) -> tuple[list[int], float]:
    """Majority vote of per-codebook inverse maps, frame by frame.

    Confidence is the mean fraction of codebooks agreeing with the winning
    token. Codes outside the codebook range cast no vote. Ties go to the
    token voted by the lowest codebook.
    """
    grid = np.asarray(grid, dtype=np.int64)
    if grid.ndim != 2 or grid.shape[0] != spec.codebook_count:
        raise ValueError(f"expected a {spec.codebook_count} x T grid, got {grid.shape}")
    if grid.shape[1] == 0:
        return [], 0.0
    inv = np.asarray(spec.inverses(), dtype=np.int64)[:, None]
    b = np.asarray(spec.offsets, dtype=np.int64)[:, None]
    votes = ((grid - b) * inv) % spec.codebook_size
    valid = (grid >= 0) & (grid < spec.codebook_size)
    tokens, agreement = [], []
    k = spec.codebook_count
    for f in range(grid.shape[1]):
        col = [int(v) for v, ok in zip(votes[:, f], valid[:, f]) if ok]
        if not col:
            tokens.append(-1)
            agreement.append(0.0)
            continue
        counts: dict[int, int] = {}
        for v in col:
            counts[v] = counts.get(v, 0) + 1
        best = max(counts.values())
        winner = next(v for v in col if counts[v] == best)
        tokens.append(winner)
        agreement.append(best / k)
    return tokens, float(np.mean(agreement))


def speaker_vector_for(name: str) -> np.ndarray:
    """Unit-norm Gaussian speaker vector seeded by the speaker name."""
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    v = rng.standard_normal(SPEAKER_DIM)
    return (v / np.linalg.norm(v)).astype(np.float32)


SEEN_SPEAKERS = ("dylan", "eric", "serena", "uncle_fu", "vivian")
UNSEEN_SPEAKERS = ("arthur", "chelsie", "cherry", "ethan", "jennifer", "momo", "moon")


def generate_oracle_dataset(
    spec: OracleTaskSpec,
    n: int,
    seed: int = 0,
    min_words: int = 2,
    max_words: int = 6,
    with_reference: bool = False,
    with_speaker: bool = False,
    audio_input: bool = False,
    image_input: bool = False,
    speakers=SEEN_SPEAKERS,
    max_ref_frames: int = 3,
    speech_output: bool = True,
) -> list[DatasetRecord]:
    """Echo task: the assistant repeats the user's words and speaks them.

    The response token sequence is the user's words followed by eos, and its
    codes are ``spec.encode`` of that sequence (one frame per text token).
    """
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        words = rng.integers(FIRST_CONTENT_ID, spec.text_vocab, rng.integers(min_words, max_words + 1))
        text = " ".join(f"w{int(w)}" for w in words)
        response_ids = [int(w) for w in words] + [TEXT_EOS]
        spans = []
        if audio_input:
            spans.append(SpanInput("audio", rng.bytes(int(rng.integers(1, 3)) * 1024)))
        if image_input:
            spans.append(SpanInput("vision", rng.bytes(64)))
        ref = vec = name = None
        if with_speaker:
            name = str(speakers[int(rng.integers(len(speakers)))])
            vec = speaker_vector_for(name)
        if with_reference:
            r = int(rng.integers(1, max_ref_frames + 1))
            ref = rng.integers(0, spec.codebook_size, (spec.codebook_count, r))
        records.append(DatasetRecord(
            conversation=[("user", text), ("assistant", text)],
            response_codes=spec.encode(response_ids if speech_output else []),
            spans=spans, ref_codes=ref, speaker_vector=vec, speaker_name=name,
        ))
    return records


def record_prompt(record: DatasetRecord, config: ModelConfig) -> tuple[list[int], list[PlaceholderSpan], list[bytes]]:
    """Prompt ids ``[bos, placeholders..., user words..., assistant]`` and its spans."""
    user = " ".join(text for role, text in record.conversation if role == "user")
    tokens = [TEXT_BOS]
    spans, contents = [], []
    for s in record.spans:
        length = stub_length(s.modality, len(s.content), config)
        spans.append(PlaceholderSpan(s.modality, len(tokens), length))
        contents.append(s.content)
        tokens += [PLACEHOLDER_IDS[s.modality]] * length
    tokens += encode_text(user)
    # keep room for reference codes and the spk slot in the audio buffer
    need = (0 if record.ref_codes is None else record.ref_codes.shape[1]) + (record.speaker_vector is not None)
    while len(tokens) + 1 < need:
        tokens.insert(1, TEXT_BOS)
        spans = [PlaceholderSpan(s.modality, s.start + 1, s.length) for s in spans]
    tokens.append(ASSISTANT)
    return tokens, spans, contents


def record_to_example(record: DatasetRecord, config: ModelConfig, max_length: int | None = None) -> OmniExample:
    prompt, spans, contents = record_prompt(record, config)
    reply = " ".join(text for role, text in record.conversation if role == "assistant")
    response = encode_text(reply) + [TEXT_EOS]
    return build_example(
        prompt, response, record.response_codes, record.ref_codes, record.speaker_vector, spans,
        codebook_size=config.codebook_size, stagger_base=config.stagger_base,
        span_contents=contents, max_length=max_length,
    )


def prompt_example(record: DatasetRecord, config: ModelConfig) -> OmniExample:
    """Prefix-only example (no response) used to start a streaming session."""
    prompt, spans, contents = record_prompt(record, config)
    empty = np.zeros((config.codebook_count, 0), dtype=np.int64)
    return build_example(
        prompt, [], empty, record.ref_codes, record.speaker_vector, spans,
        codebook_size=config.codebook_size, stagger_base=config.stagger_base, span_contents=contents,
    )
