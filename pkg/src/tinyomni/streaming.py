"""Incremental joint decoding under the staggered codebook schedule.

At text step s (0-based from assistant_start) the session emits the text
token for position P = assistant_start + s and, for every codebook q with
s >= q + stagger_base, that codebook's code at P. Frame f is complete, and
emitted, at step f + frame_delay (8 with the default layout). After the text
eos (or the text budget) the session keeps stepping with text pad input until
the frame of the last text token is complete.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autograd as ag
from .config import TEXT_EOS, TEXT_PAD
from .model import ModalityInput, OmniModel
from .sequence import OmniExample

log = logging.getLogger(__name__)

SAMPLE_RATE = 24000
FRAME_RATE = 12.5
SAMPLES_PER_FRAME = int(SAMPLE_RATE / FRAME_RATE)


class SessionClosed(RuntimeError):
    pass


class Status(str, Enum):
    RUNNING = "running"
    FINISHED = "finished"
    CANCELLED = "cancelled"


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0  # 0 means greedy
    seed: int = 0


@dataclass(frozen=True)
class StreamFrame:
    frame_index: int
    codes: tuple[int, ...]
    emitted_at_text_step: int


@dataclass
class StepResult:
    step: int
    text_id: int | None
    codes: dict[int, int]  # codebook -> code produced this step
    frame: StreamFrame | None


@dataclass
class StubWaveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


def decode_frame_stub(frame: StreamFrame) -> StubWaveform:
    """1920 deterministic samples seeded by a hash of the frame's codes."""
    digest = hashlib.sha256(np.asarray(frame.codes, dtype="<i8").tobytes()).digest()
    rng = np.random.default_rng(np.frombuffer(digest, dtype="<u4"))
    return StubWaveform((0.1 * rng.standard_normal(SAMPLES_PER_FRAME)).astype(np.float32))


def _choose(logits: np.ndarray, sampling: Sampling, rng: np.random.Generator) -> int:
    if sampling.temperature <= 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / sampling.temperature
    p = np.exp(z - z.max())
    return int(rng.choice(len(p), p=p / p.sum()))


@dataclass
class GenerationSession:
    """One streaming reply over a frozen model; see module docstring for the schedule."""

    model: OmniModel
    prompt: OmniExample
    sampling: Sampling = Sampling()
    max_text_tokens: int | None = None
    stop_at_eos: bool = True
    status: Status = Status.RUNNING
    text_ids: list[int] = field(default_factory=list)
    frames: list[StreamFrame] = field(default_factory=list)

    def __post_init__(self) -> None:
        cfg = self.model.config
        p = self.prompt
        if p.codebook_count != cfg.codebook_count or p.codebook_size != cfg.codebook_size:
            raise ValueError("prompt codebook layout does not match the model")
        self._cfg = cfg
        self._rng = np.random.default_rng(self.sampling.seed)
        self._cancel = threading.Event()
        self._lock = threading.Lock()
        self.assistant_start = p.assistant_start
        self.step_index = 0
        self.text_done = False
        self.n_text = 0
        # generated stream columns, position assistant_start + s
        self.text_stream: list[int] = []
        self.audio_stream: list[np.ndarray] = []
        self._partial: dict[int, dict[int, int]] = {}
        self._speakers = {0: p.speaker_vector} if p.speaker_vector is not None else {}
        self.thinker_cache = self.model.thinker.new_cache()
        self.talker_cache = self.model.talker.new_cache()
        n = p.assistant_start
        mods = [ModalityInput(0, s, c) for s, c in zip(p.spans, p.span_contents)]
        self._text_logits, self._audio_logits = self.model.step(
            p.text_tokens[None, :n], p.audio_streams[None, :, :n],
            self.thinker_cache, self.talker_cache, mods, self._speakers)

    @property
    def frames_emitted(self) -> int:
        return len(self.frames)

    def codes_produced(self, q: int) -> int:
        return sum(1 for col in self.audio_stream if col[q] < self._cfg.codebook_size)

    def step(self) -> StepResult:
        with self._lock:
            if self._cancel.is_set() and self.status is Status.RUNNING:
                self._close(Status.CANCELLED)
            if self.status is not Status.RUNNING:
                raise SessionClosed(f"step on a {self.status.value} session")
            return self._step()

    def _step(self) -> StepResult:
        cfg = self._cfg
        s = self.step_index
        text_id = None
        if not self.text_done:
            text_id = _choose(self._text_logits[0], self.sampling, self._rng)
            self.n_text += 1
            if (self.stop_at_eos and text_id == TEXT_EOS) or (
                    self.max_text_tokens is not None and self.n_text >= self.max_text_tokens):
                self.text_done = True
            self.text_ids.append(text_id)
        column = np.full(cfg.codebook_count, cfg.audio_pad_id, dtype=np.int64)
        produced = {}
        for q in range(cfg.codebook_count):
            f = s - q - cfg.stagger_base
            if 0 <= f < self.n_text:
                code = _choose(self._audio_logits[q][0, :cfg.codebook_size], self.sampling, self._rng)
                column[q] = code
                produced[q] = code
                self._partial.setdefault(f, {})[q] = code
        frame = None
        f_done = s - cfg.frame_delay
        if f_done >= 0 and len(self._partial.get(f_done, {})) == cfg.codebook_count:
            codes = self._partial.pop(f_done)
            frame = StreamFrame(f_done, tuple(codes[q] for q in range(cfg.codebook_count)), s)
            self.frames.append(frame)
        self.text_stream.append(TEXT_PAD if text_id is None else text_id)
        self.audio_stream.append(column)
        self.step_index += 1
        if self.text_done and self.frames_emitted == self.n_text:
            self._close(Status.FINISHED)
        else:
            self._text_logits, self._audio_logits = self.model.step(
                np.array([[self.text_stream[-1]]]), column[None, :, None],
                self.thinker_cache, self.talker_cache)
        return StepResult(s, text_id, produced, frame)

    def run(self, max_steps: int | None = None) -> list[StepResult]:
        out = []
        while self.status is Status.RUNNING and (max_steps is None or len(out) < max_steps):
            out.append(self.step())
        return out

    def cancel(self) -> bool:
        """Abandon the reply. Safe from another thread; waits for an in-flight step.

        Returns False (and logs) when the session was already closed.
        """
        self._cancel.set()
        with self._lock:
            if self.status is not Status.RUNNING:
                log.info("cancel ignored: session already %s", self.status.value)
                return False
            self._close(Status.CANCELLED)
            return True

    def _close(self, status: Status) -> None:
        self.status = status
        self.thinker_cache = self.talker_cache = None
        if status is Status.CANCELLED:
            self._partial.clear()

    def code_grid(self) -> np.ndarray:
        """K x frames grid of the emitted frames."""
        if not self.frames:
            return np.zeros((self._cfg.codebook_count, 0), dtype=np.int64)
        return np.array([f.codes for f in self.frames], dtype=np.int64).T

    def full_sequence(self) -> tuple[np.ndarray, np.ndarray]:
        """Prompt plus every generated column: text (L,) and audio (K, L)."""
        p = self.prompt
        n = p.assistant_start
        text = np.concatenate([p.text_tokens[:n], np.asarray(self.text_stream, dtype=np.int64)])
        audio = p.audio_streams[:, :n]
        if self.audio_stream:
            audio = np.concatenate([audio, np.stack(self.audio_stream, axis=1)], axis=1)
        return text, audio


@dataclass
class Divergence:
    step: int
    position: int
    stream: str  # "text" or "codebook <q>"
    streamed: int
    offline: int


@dataclass
class EquivalenceReport:
    steps: int
    divergences: list[Divergence]

    @property
    def ok(self) -> bool:
        return not self.divergences


def offline_equivalence(session: GenerationSession) -> EquivalenceReport:
    """Re-decode the session's stream with one teacher-forced full forward.

    Every greedy choice the session made must equal the argmax of the
    full-sequence logits at the preceding position.
    """
    if session.sampling.temperature > 0:
        raise ValueError("offline equivalence is defined for greedy decoding only")
    model, cfg, p = session.model, session._cfg, session.prompt
    text, audio = session.full_sequence()
    a0 = p.assistant_start
    batch_mods = [ModalityInput(0, s, c) for s, c in zip(p.spans, p.span_contents)]
    with ag.no_grad():
        out = model.thinker(model.thinker_inputs(text[None], batch_mods))
        codec = model.talker.embed_codes(audio[None], session._speakers)
        talker_logits = model.talker(model.talker.fuse_inputs(out.bridge, codec))
    text_logits = out.text_logits.data[0]
    found = []
    for s in range(session.step_index):
        pos = a0 + s
        if s < len(session.text_ids):
            want = int(np.argmax(text_logits[pos - 1]))
            if want != session.text_stream[s]:
                found.append(Divergence(s, pos, "text", session.text_stream[s], want))
        for q in range(cfg.codebook_count):
            got = int(audio[q, pos])
            if got >= cfg.codebook_size:
                continue
            want = int(np.argmax(talker_logits[q].data[0, pos - 1, :cfg.codebook_size]))
            if want != got:
                found.append(Divergence(s, pos, f"codebook {q}", got, want))
    return EquivalenceReport(session.step_index, found)
