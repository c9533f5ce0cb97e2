"""Edit-distance rates, speaker cosine similarity and the consistency protocol."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TEXT_EOS
from .data import DatasetRecord, OracleTaskSpec, oracle_transcribe, prompt_example
from .model import OmniModel
from .streaming import GenerationSession, Sampling


def levenshtein(a, b) -> int:
    """Unit-cost substitutions, insertions and deletions."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _units(seq, unit: str):
    if isinstance(seq, str):
        return list(seq) if unit == "character" else seq.split()
    return list(seq)


def edit_distance_rate(hypothesis, reference, unit: str = "character") -> float:
    """Levenshtein distance over reference length (CER or WER); may exceed 1.

    Strings are split into characters or whitespace words according to
    ``unit``; other sequences are compared element-wise.
    """
    if unit not in ("character", "word"):
        raise ValueError(f"unit must be 'character' or 'word', got {unit!r}")
    ref = _units(reference, unit)
    if not ref:
        raise ValueError("edit distance rate is undefined for an empty reference")
    return levenshtein(_units(hypothesis, unit), ref) / len(ref)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


# ----------------------------------------------------------- consistency


@dataclass
class ExampleResult:
    index: int
    cer: float
    words: int
    bucket: str
    transcript: list[int]
    reference: list[int]
    flag: str | None = None


@dataclass
class ConsistencyReport:
    examples: list[ExampleResult]
    thresholds: tuple[int, int] = (15, 30)
    bucket_means: dict[str, float] = field(default_factory=dict)
    average: float = float("nan")

    def __post_init__(self) -> None:
        if self.examples:
            self.average = float(np.mean([e.cer for e in self.examples]))
        for name in ("short", "mid", "long"):
            vals = [e.cer for e in self.examples if e.bucket == name]
            if vals:
                self.bucket_means[name] = float(np.mean(vals))

    def to_json(self) -> dict:
        return {
            "average_cer": self.average,
            "bucket_cer": self.bucket_means,
            "bucket_counts": {b: sum(e.bucket == b for e in self.examples) for b in ("short", "mid", "long")},
            "thresholds": list(self.thresholds),
            "examples": [asdict(e) for e in self.examples],
        }

    def table(self) -> str:
        lines = [f"{'Bucket':<8} {'n':>4} {'CER':>8}"]
        for b in ("short", "mid", "long"):
            n = sum(e.bucket == b for e in self.examples)
            val = f"{self.bucket_means[b]:.4f}" if b in self.bucket_means else "--"
            lines.append(f"{b:<8} {n:>4} {val:>8}")
        lines.append(f"{'average':<8} {len(self.examples):>4} {self.average:>8.4f}")
        return "\n".join(lines)


def length_bucket(words: int, thresholds: tuple[int, int] = (15, 30)) -> str:
    short, mid = thresholds
    if words <= short:
        return "short"
    return "mid" if words <= mid else "long"


def _strip_eos(ids) -> list[int]:
    return [int(t) for t in ids if t != TEXT_EOS]


def score_transcript(index: int, transcript, reference, thresholds=(15, 30)) -> ExampleResult:
    hyp, ref = _strip_eos(transcript), _strip_eos(reference)
    if not ref:
        return ExampleResult(index, 1.0, 0, length_bucket(0, thresholds), hyp, ref, "empty generation")
    return ExampleResult(index, edit_distance_rate(hyp, ref, "word"), len(ref),
                         length_bucket(len(ref), thresholds), hyp, ref)


def consistency_eval(model: OmniModel, prompts: list[DatasetRecord], spec: OracleTaskSpec,
                     max_text_tokens: int = 40, thresholds: tuple[int, int] = (15, 30),
                     transcribe=None, sampling: Sampling = Sampling(),
                     stop_at_eos: bool = True) -> ConsistencyReport:
    """Stream each prompt, transcribe the codes, score against the model's own text.

    ``transcribe`` defaults to the oracle inverse; passing a function of the
    session lets the harness be checked with an identity path.
    """
    results = []
    for i, record in enumerate(prompts):
        session = GenerationSession(model, prompt_example(record, model.config),
                                    Sampling(sampling.temperature, sampling.seed + i),
                                    max_text_tokens=max_text_tokens, stop_at_eos=stop_at_eos)
        session.run()
        if transcribe is None:
            transcript, _conf = oracle_transcribe(session.code_grid(), spec)
        else:
            transcript = transcribe(session)
        results.append(score_transcript(i, transcript, session.text_ids, thresholds))
    return ConsistencyReport(results, thresholds)


# ----------------------------------------------------------- speaker


@dataclass
class SimilarityReport:
    per_speaker: dict[str, float]
    seen: float | None
    unseen: float | None
    overall: float

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [f"{'Speaker':<12} {'cos':>8}"]
        lines += [f"{k:<12} {v:>8.4f}" for k, v in sorted(self.per_speaker.items())]
        for label, val in (("seen", self.seen), ("unseen", self.unseen), ("overall", self.overall)):
            lines.append(f"{label:<12} {('--' if val is None else f'{val:.4f}'):>8}")
        return "\n".join(lines)


def speaker_similarity(pairs, seen_names) -> SimilarityReport:
    """``pairs``: iterable of (speaker_name, reference_vector, produced_vector)."""
    by_speaker: dict[str, list[float]] = {}
    for name, ref, produced in pairs:
        by_speaker.setdefault(name, []).append(cosine_similarity(ref, produced))
    means = {k: float(np.mean(v)) for k, v in by_speaker.items()}
    seen = [v for k, vals in by_speaker.items() if k in seen_names for v in vals]
    unseen = [v for k, vals in by_speaker.items() if k not in seen_names for v in vals]
    everything = seen + unseen
    return SimilarityReport(
        means,
        float(np.mean(seen)) if seen else None,
        float(np.mean(unseen)) if unseen else None,
        float(np.mean(everything)) if everything else float("nan"),
    )


def stub_speaker_embedding(grid, codebook_size: int, dim: int = 192) -> np.ndarray:
    """Fixed random projection of per-codebook code histograms (speaker-encoder stand-in)."""
    grid = np.asarray(grid, dtype=np.int64)
    k = grid.shape[0]
    hist = np.zeros((k, codebook_size))
    for q in range(k):
        valid = grid[q][(grid[q] >= 0) & (grid[q] < codebook_size)]
        hist[q] = np.bincount(valid, minlength=codebook_size)
    rng = np.random.default_rng(zlib.crc32(b"speaker-stub"))
    proj = rng.standard_normal((k * codebook_size, dim))
    v = hist.reshape(-1) @ proj
    n = np.linalg.norm(v)
    return v / n if n else v
