"""Nine-stream training examples: one text row plus K aligned audio-code rows.

Layout for a prompt of length P (= assistant_start), response text of length
T and a K x T' response code grid, with stagger base s (default 1):

* text row: prompt, then response tokens at P..P+T-1, then text pad.
* text labels: response tokens at their own positions, ignore elsewhere.
* audio row q: pad everywhere except optional reference codes right-aligned
  to end at P, an optional spk column directly before them, and response
  code f at position P + q + s + f.
* audio labels: the response code at the same positions, ignore elsewhere.

Labels sit at the position of the token they describe; the loss compares
logits at p - 1 with labels at p.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import IGNORE_INDEX
from .config import SPEAKER_DIM, TEXT_PAD
from .modality import MODALITIES, PLACEHOLDER_IDS, PlaceholderSpan
from .model import Batch, ModalityInput


class FormatError(ValueError):
    pass


@dataclass
class OmniExample:
    text_tokens: np.ndarray
    text_labels: np.ndarray
    audio_streams: np.ndarray
    audio_labels: np.ndarray
    assistant_start: int
    codebook_size: int
    stagger_base: int = 1
    spans: list[PlaceholderSpan] = field(default_factory=list)
    span_contents: list[bytes] = field(default_factory=list)
    spk_position: int | None = None
    ref_region: tuple[int, int] | None = None
    speaker_vector: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.text_tokens)

    @property
    def codebook_count(self) -> int:
        return self.audio_streams.shape[0]

    @property
    def pad_id(self) -> int:
        return self.codebook_size

    @property
    def spk_id(self) -> int:
        return self.codebook_size + 3

    def first_label_position(self, q: int) -> int:
        return self.assistant_start + q + self.stagger_base

    def to_bytes(self) -> bytes:
        meta = {
            "assistant_start": self.assistant_start,
            "codebook_size": self.codebook_size,
            "stagger_base": self.stagger_base,
            "spans": [[s.modality, s.start, s.length] for s in self.spans],
            "spk_position": self.spk_position,
            "ref_region": list(self.ref_region) if self.ref_region else None,
        }
        arrays = {
            "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            "text_tokens": self.text_tokens,
            "text_labels": self.text_labels,
            "audio_streams": self.audio_streams,
            "audio_labels": self.audio_labels,
        }
        for i, c in enumerate(self.span_contents):
            arrays[f"content_{i}"] = np.frombuffer(c, dtype=np.uint8)
        if self.speaker_vector is not None:
            arrays["speaker_vector"] = self.speaker_vector
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "OmniExample":
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes())
            n_contents = sum(1 for k in z.files if k.startswith("content_"))
            return cls(
                text_tokens=z["text_tokens"],
                text_labels=z["text_labels"],
                audio_streams=z["audio_streams"],
                audio_labels=z["audio_labels"],
                assistant_start=meta["assistant_start"],
                codebook_size=meta["codebook_size"],
                stagger_base=meta["stagger_base"],
                spans=[PlaceholderSpan(m, s, n) for m, s, n in meta["spans"]],
                span_contents=[z[f"content_{i}"].tobytes() for i in range(n_contents)],
                spk_position=meta["spk_position"],
                ref_region=tuple(meta["ref_region"]) if meta["ref_region"] else None,
                speaker_vector=z["speaker_vector"] if "speaker_vector" in z.files else None,
            )

    def equals(self, other: "OmniExample") -> bool:
        """Bit-level equality of every field."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.text_tokens, other.text_tokens)
            and same(self.text_labels, other.text_labels)
            and same(self.audio_streams, other.audio_streams)
            and same(self.audio_labels, other.audio_labels)
            and same(self.speaker_vector, other.speaker_vector)
            and self.assistant_start == other.assistant_start
            and self.codebook_size == other.codebook_size
            and self.stagger_base == other.stagger_base
            and self.spans == other.spans
            and self.span_contents == other.span_contents
            and self.spk_position == other.spk_position
            and self.ref_region == other.ref_region
        )


def build_example(
    prompt_tokens,
    response_tokens,
    response_codes,
    ref_codes=None,
    speaker_vector=None,
    spans=(),
    *,
    codebook_size: int,
    stagger_base: int = 1,
    span_contents=(),
    max_length: int | None = None,
) -> OmniExample:
    """Assemble one example; raises FormatError instead of truncating."""
    prompt = np.asarray(prompt_tokens, dtype=np.int64).reshape(-1)
    response = np.asarray(response_tokens, dtype=np.int64).reshape(-1)
    codes = np.asarray(response_codes, dtype=np.int64)
    if codes.ndim != 2:
        raise FormatError(f"response codes must be a K x T' grid, got shape {codes.shape}")
    k, n_frames = codes.shape
    if codes.size and (codes.min() < 0 or codes.max() >= codebook_size):
        raise FormatError(f"response codes must lie in [0, {codebook_size})")
    p = len(prompt)
    if p == 0:
        raise FormatError("prompt must contain at least one token")
    length = p + len(response)
    if n_frames:
        length = max(length, p + k - 1 + stagger_base + n_frames)
    if max_length is not None and length > max_length:
        raise FormatError(f"example needs {length} positions, context is {max_length}")

    pad, spk = codebook_size, codebook_size + 3
    text = np.full(length, TEXT_PAD, dtype=np.int64)
    text[:p] = prompt
    text[p:p + len(response)] = response
    text_labels = np.full(length, IGNORE_INDEX, dtype=np.int64)
    text_labels[p:p + len(response)] = response
    audio = np.full((k, length), pad, dtype=np.int64)
    audio_labels = np.full((k, length), IGNORE_INDEX, dtype=np.int64)

    ref_region = None
    spk_position = None
    ref_len = 0
    if ref_codes is not None:
        ref = np.asarray(ref_codes, dtype=np.int64)
        if ref.ndim != 2 or ref.shape[0] != k:
            raise FormatError(f"reference codes must be a {k} x R grid, got shape {ref.shape}")
        if ref.size and (ref.min() < 0 or ref.max() >= codebook_size):
            raise FormatError(f"reference codes must lie in [0, {codebook_size})")
        ref_len = ref.shape[1]
    need = ref_len + (1 if speaker_vector is not None else 0)
    if need > p:
        raise FormatError(f"reference codes ({ref_len}) plus spk slot need {need} positions, "
                          f"pre-response buffer has {p}")
    if ref_len:
        audio[:, p - ref_len:p] = ref
        ref_region = (p - ref_len, ref_len)
    if speaker_vector is not None:
        speaker_vector = np.asarray(speaker_vector, dtype=np.float32)
        if speaker_vector.shape != (SPEAKER_DIM,):
            raise FormatError(f"speaker vector must have length {SPEAKER_DIM}, got {speaker_vector.shape}")
        spk_position = p - ref_len - 1
        audio[:, spk_position] = spk

    for q in range(k):
        pos = np.arange(n_frames) + p + q + stagger_base
        audio[q, pos] = codes[q]
        audio_labels[q, pos] = codes[q]

    example = OmniExample(
        text_tokens=text,
        text_labels=text_labels,
        audio_streams=audio,
        audio_labels=audio_labels,
        assistant_start=p,
        codebook_size=codebook_size,
        stagger_base=stagger_base,
        spans=list(spans),
        span_contents=[bytes(c) for c in span_contents],
        spk_position=spk_position,
        ref_region=ref_region,
        speaker_vector=speaker_vector,
    )
    problems = validate_example(example)
    if problems:
        raise FormatError("; ".join(str(v) for v in problems))
    return example


@dataclass(frozen=True)
class Violation:
    rule: str
    position: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = f" at position {self.position}" if self.position is not None else ""
        extra = f" ({self.detail})" if self.detail else ""
        return f"{self.rule}{where}{extra}"


REF_MASKED = "reference region must be masked from the audio loss"
SPK_FILLS = "speaker token must fill every audio layer at its position"


def validate_example(ex: OmniExample) -> list[Violation]:
    """Every broken layout rule, with position; empty list means valid."""
    out: list[Violation] = []
    n = ex.length
    k = ex.codebook_count
    p = ex.assistant_start
    pad, spk = ex.pad_id, ex.spk_id
    if ex.text_labels.shape != (n,) or ex.audio_streams.shape != (k, n) or ex.audio_labels.shape != (k, n):
        return [Violation("streams must share one length", None,
                          f"text {ex.text_tokens.shape}, labels {ex.text_labels.shape}, "
                          f"audio {ex.audio_streams.shape}, audio labels {ex.audio_labels.shape}")]
    if not 0 < p <= n:
        return [Violation("assistant_start outside the sequence", p)]

    # text labels: only response positions, equal to the token there
    for t in np.flatnonzero(ex.text_labels != IGNORE_INDEX):
        if t < p:
            out.append(Violation("text labels must be ignored before the response", int(t)))
        elif ex.text_labels[t] != ex.text_tokens[t]:
            out.append(Violation("text label must equal the text token", int(t)))

    # audio labels: staggered start, match the stream, real code ids, contiguous
    counts = []
    for q in range(k):
        labelled = np.flatnonzero(ex.audio_labels[q] != IGNORE_INDEX)
        counts.append(len(labelled))
        first = ex.first_label_position(q)
        for t in labelled:
            if t < first:
                out.append(Violation("audio label before its codebook's staggered start", int(t), f"codebook {q}"))
            if ex.audio_labels[q, t] != ex.audio_streams[q, t]:
                out.append(Violation("audio label must equal the stream code", int(t), f"codebook {q}"))
            if not 0 <= ex.audio_labels[q, t] < ex.codebook_size:
                out.append(Violation("audio label must be a codebook id", int(t), f"codebook {q}"))
        if len(labelled) and (labelled[0] != first or np.any(np.diff(labelled) != 1)):
            out.append(Violation("audio labels must be contiguous from the staggered start", int(labelled[0]),
                                 f"codebook {q}"))
    if len(set(counts)) > 1:
        out.append(Violation("every codebook must carry the same number of labels", None, f"counts {counts}"))

    # reference region
    if ex.ref_region is not None:
        start, length = ex.ref_region
        if start + length != p:
            out.append(Violation("reference codes must be right-aligned to assistant_start", start))
        if start < 0 or length <= 0:
            out.append(Violation("reference region outside the pre-response buffer", start))
        region = slice(max(start, 0), max(start + length, 0))
        for q, t in np.argwhere(ex.audio_labels[:, region] != IGNORE_INDEX):
            out.append(Violation(REF_MASKED, int(t) + max(start, 0), f"codebook {q}"))
        if np.any(ex.audio_streams[:, region] >= ex.codebook_size):
            out.append(Violation("reference region must hold real codes", start))

    # speaker slot
    spk_cols = np.flatnonzero((ex.audio_streams == spk).any(axis=0))
    if ex.spk_position is not None:
        s = ex.spk_position
        if not 0 <= s < p:
            out.append(Violation("spk position must precede the response", s))
        else:
            if np.any(ex.audio_streams[:, s] != spk):
                out.append(Violation(SPK_FILLS, s))
            expected = ex.ref_region[0] - 1 if ex.ref_region else p - 1
            if s != expected:
                out.append(Violation("spk position must directly precede the reference region", s))
            if np.any(ex.audio_labels[:, s] != IGNORE_INDEX):
                out.append(Violation("spk position must be masked from the audio loss", s))
        if ex.speaker_vector is None:
            out.append(Violation("spk position without a speaker vector", s))
    elif ex.speaker_vector is not None:
        out.append(Violation("speaker vector without a spk position"))
    for t in spk_cols:
        if t != ex.spk_position:
            out.append(Violation("spk id outside the spk position", int(t)))
    if ex.speaker_vector is not None and ex.speaker_vector.shape != (SPEAKER_DIM,):
        out.append(Violation(f"speaker vector must have length {SPEAKER_DIM}", None, str(ex.speaker_vector.shape)))

    # conditioning positions before the response carry no audio labels
    pre = np.argwhere(ex.audio_labels[:, :p] != IGNORE_INDEX)
    if ex.ref_region is None:
        for q, t in pre:
            out.append(Violation("conditioning positions must be masked from the audio loss", int(t)))

    # placeholder spans
    ordered = sorted(ex.spans, key=lambda s: s.start)
    for span in ordered:
        if span.modality not in MODALITIES:
            out.append(Violation("unknown span modality", span.start, span.modality))
            continue
        if span.start < 0 or span.stop > p or span.length <= 0:
            out.append(Violation("placeholder span must lie inside the prompt", span.start))
            continue
        if np.any(ex.text_tokens[span.start:span.stop] != PLACEHOLDER_IDS[span.modality]):
            out.append(Violation("placeholder span must hold its pad token", span.start, span.modality))
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.stop:
            out.append(Violation("placeholder spans must be disjoint", b.start))
    if ex.span_contents and len(ex.span_contents) != len(ex.spans):
        out.append(Violation("one content blob per span", None,
                             f"{len(ex.span_contents)} contents for {len(ex.spans)} spans"))
    return out


def frame_of_position(position: int, q: int, assistant_start: int, stagger_base: int = 1) -> int | None:
    """Frame index of codebook ``q``'s code at ``position`` (None before its start)."""
    f = position - assistant_start - q - stagger_base
    return f if f >= 0 else None


def collate(examples: list[OmniExample]) -> Batch:
    """Right-pad examples into one Batch (text pad / audio pad, ignored labels)."""
    if not examples:
        raise FormatError("cannot collate an empty list")
    k = examples[0].codebook_count
    pad = examples[0].pad_id
    length = max(e.length for e in examples)
    b = len(examples)
    text = np.full((b, length), TEXT_PAD, dtype=np.int64)
    text_labels = np.full((b, length), IGNORE_INDEX, dtype=np.int64)
    audio = np.full((b, k, length), pad, dtype=np.int64)
    audio_labels = np.full((b, k, length), IGNORE_INDEX, dtype=np.int64)
    modality: list[ModalityInput] = []
    speakers: dict[int, np.ndarray] = {}
    for i, e in enumerate(examples):
        if e.codebook_count != k or e.pad_id != pad:
            raise FormatError("examples disagree on codebook layout")
        n = e.length
        text[i, :n] = e.text_tokens
        text_labels[i, :n] = e.text_labels
        audio[i, :, :n] = e.audio_streams
        audio_labels[i, :, :n] = e.audio_labels
        if e.spans and len(e.span_contents) != len(e.spans):
            raise FormatError("example spans lack content bytes")
        for span, content in zip(e.spans, e.span_contents):
            modality.append(ModalityInput(i, span, content))
        if e.speaker_vector is not None:
            speakers[i] = e.speaker_vector
    return Batch(text, text_labels, audio, audio_labels, modality, speakers)
