from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import IGNORE_INDEX, NonFiniteError, Tensor
from .config import ModelConfig
from .model import Batch, OmniModel
from .optim import AdamWState, adamw_step
from .sequence import OmniExample, collate
from .thinker import adapter_parameter_count, count_parameters

log = logging.getLogger(__name__)


class TrainMode(str, Enum):
    ALL = "all"
    AUDIO_PROJ = "audio_proj"
    VISION_PROJ = "vision_proj"


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


def mode_predicate(mode: TrainMode | str) -> Callable[[str], bool]:
    mode = TrainMode(mode)
    if mode is TrainMode.ALL:
        return lambda name: True
    prefix = "audio_proj." if mode is TrainMode.AUDIO_PROJ else "vision_proj."
    return lambda name: name.startswith(prefix)


def talker_side(name: str) -> bool:
    """Everything except the Thinker (rank ablations freeze the Thinker)."""
    return not name.startswith("thinker.")


# ------------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    text_loss: float
    audio_loss_per_codebook: list[float]
    total: float
    codebook_accuracy: list[float]
    text_accuracy: float = float("nan")
    degenerate_codebooks: list[int] = field(default_factory=list)

    @property
    def audio_loss(self) -> float:
        return float(np.mean(self.audio_loss_per_codebook))

    @property
    def mean_accuracy(self) -> float:
        vals = [a for a in self.codebook_accuracy if not np.isnan(a)]
        return float(np.mean(vals)) if vals else float("nan")


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    mask = labels != IGNORE_INDEX
    if not mask.any():
        return float("nan")
    return float((logits.argmax(axis=-1)[mask] == labels[mask]).mean())


def joint_loss(batch: Batch, text_logits: Tensor, talker_logits: list[Tensor],
               lambda_audio: float = 1.0) -> tuple[Tensor, LossBreakdown]:
    """Text cross-entropy plus lambda times the sum of per-codebook cross-entropies.

    Logits at p are scored against labels at p + 1; each term is a token mean
    over its own labelled positions. A codebook without labels contributes 0
    and is listed in ``degenerate_codebooks``.
    """
    if text_logits.shape[:2] != batch.text_labels.shape:
        raise ag.ShapeError(f"joint_loss: text logits {text_logits.shape} vs labels {batch.text_labels.shape}")
    text_labels = batch.text_labels[:, 1:]
    text = ag.cross_entropy(text_logits[:, :-1], text_labels)
    audio_terms, per_cb, acc, degenerate = [], [], [], []
    for q, logits in enumerate(talker_logits):
        labels = batch.audio_labels[:, q, 1:]
        term = ag.cross_entropy(logits[:, :-1], labels)
        audio_terms.append(term)
        per_cb.append(term.item())
        acc.append(_accuracy(logits.data[:, :-1], labels))
        if not (labels != IGNORE_INDEX).any():
            degenerate.append(q)
    total = text
    if audio_terms and lambda_audio != 0.0:
        total = text + ag.scale(ag.stack_sum(audio_terms), lambda_audio)
    breakdown = LossBreakdown(
        text_loss=text.item(),
        audio_loss_per_codebook=per_cb,
        total=total.item(),
        codebook_accuracy=acc,
        text_accuracy=_accuracy(text_logits.data[:, :-1], text_labels),
        degenerate_codebooks=degenerate,
    )
    return total, breakdown


def evaluate(model: OmniModel, examples: list[OmniExample], batch_size: int = 32) -> LossBreakdown:
    """Token-weighted losses and accuracies over ``examples`` without gradients."""
    k = model.config.codebook_count
    sums = np.zeros(k + 1)
    counts = np.zeros(k + 1)
    hits = np.zeros(k + 1)
    with ag.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = collate(examples[i:i + batch_size])
            out, logits = model.forward(batch)
            _, br = joint_loss(batch, out.text_logits, logits, model.config.lambda_audio)
            labels = [batch.text_labels[:, 1:]] + [batch.audio_labels[:, q, 1:] for q in range(k)]
            losses = [br.text_loss] + br.audio_loss_per_codebook
            accs = [br.text_accuracy] + br.codebook_accuracy
            for j, (lab, loss, a) in enumerate(zip(labels, losses, accs)):
                n = int((lab != IGNORE_INDEX).sum())
                sums[j] += loss * n
                counts[j] += n
                hits[j] += (0.0 if n == 0 else a * n)
    mean = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    acc = np.divide(hits, counts, out=np.full_like(hits, np.nan), where=counts > 0)
    lam = model.config.lambda_audio
    return LossBreakdown(
        text_loss=float(mean[0]),
        audio_loss_per_codebook=[float(x) for x in mean[1:]],
        total=float(mean[0] + lam * mean[1:].sum()),
        codebook_accuracy=[float(x) for x in acc[1:]],
        text_accuracy=float(acc[0]),
        degenerate_codebooks=[q for q in range(k) if counts[q + 1] == 0],
    )


# --------------------------------------------------------------- training


@dataclass
class TrainHyper:
    lr: float = 3e-3
    batch_size: int = 16
    epochs: int = 1
    max_steps: int | None = None
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    precision: int = 32


@dataclass
class TrainResult:
    model: OmniModel
    log: list[dict]
    trainable: list[str]
    checkpoint: Path | None = None
    seconds: float = 0.0


def _batches(n: int, hyper: TrainHyper):
    rng = np.random.default_rng(hyper.seed)
    step = 0
    epoch = 0
    while True:
        if hyper.max_steps is None and epoch >= hyper.epochs:
            return
        order = rng.permutation(n)
        for i in range(0, n, hyper.batch_size):
            if hyper.max_steps is not None and step >= hyper.max_steps:
                return
            yield epoch, order[i:i + hyper.batch_size]
            step += 1
        epoch += 1


def train_run(
    examples: list[OmniExample],
    config: ModelConfig,
    mode: TrainMode | str = TrainMode.ALL,
    hyper: TrainHyper | None = None,
    model: OmniModel | None = None,
    out_dir: str | Path | None = None,
    trainable: Callable[[str], bool] | None = None,
    log_every: int = 1,
) -> TrainResult:
    """Train with AdamW and global-norm clipping; deterministic given ``hyper.seed``.

    Only parameters selected by ``mode`` (or the ``trainable`` override) are
    updated. One JSON object per logged step goes to ``metrics.jsonl`` and
    the final weights to ``model.ckpt`` under ``out_dir``. A non-finite loss
    or gradient stops training; the untouched last-good weights are saved and
    TrainingAborted is raised.
    """
    if not examples:
        raise ValueError("train_run: empty dataset")
    hyper = hyper or TrainHyper()
    mode = TrainMode(mode)
    select = trainable or mode_predicate(mode)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    t0 = time.perf_counter()
    with ag.precision(hyper.precision):
        if model is None:
            model = OmniModel(config, seed=hyper.seed)
        named = list(model.named_parameters())
        for name, p in named:
            p.requires_grad = select(name)
            p.grad = None
        params = [p for name, p in named if p.requires_grad]
        names = [name for name, p in named if p.requires_grad]
        state = AdamWState()
        records: list[dict] = []
        logfile = open(out / "metrics.jsonl", "a") if out is not None else None
        try:
            for step, (epoch, idx) in enumerate(_batches(len(examples), hyper)):
                batch = collate([examples[i] for i in idx])
                thinker_out, talker_logits = model.forward(batch)
                total, br = joint_loss(batch, thinker_out.text_logits, talker_logits, config.lambda_audio)
                if not np.isfinite(br.total):
                    ag.current_tape().clear()
                    raise NonFiniteError(f"non-finite loss at step {step}")
                if total.requires_grad:
                    ag.backward(total)
                live = [(p, p.grad) for p in params if p.grad is not None]
                norm = 0.0
                if live:
                    norm = adamw_step([p for p, _ in live], [g for _, g in live], state, hyper.lr,
                                      hyper.weight_decay, hyper.clip_norm)
                for p in params:
                    p.grad = None
                rec = {
                    "step": step, "epoch": epoch, "mode": mode.value,
                    "text_loss": br.text_loss, "audio_loss": br.audio_loss_per_codebook,
                    "total": br.total, "accuracy": br.codebook_accuracy, "grad_norm": norm,
                }
                if step % log_every == 0:
                    records.append(rec)
                    if logfile is not None:
                        logfile.write(json.dumps(rec) + "\n")
        except NonFiniteError as exc:
            ckpt = None
            if out is not None:
                ckpt = out / "last_good.ckpt"
                model.save(ckpt)
            raise TrainingAborted(str(exc), ckpt) from exc
        finally:
            if logfile is not None:
                logfile.close()
        for p in model.parameters():
            p.requires_grad = True
        ckpt = None
        if out is not None:
            ckpt = out / "model.ckpt"
            model.save(ckpt)
    return TrainResult(model, records, names, ckpt, time.perf_counter() - t0)


# ---------------------------------------------------------------- sweeps


@dataclass
class AblationRow:
    rank_embed: int
    rank_head: int
    added_params: int
    final_audio_loss: float
    final_accuracy: float
    seed: int


def added_adapter_params(config: ModelConfig) -> int:
    va, ht, k = config.audio_vocab, config.talker_hidden, config.codebook_count
    return k * (adapter_parameter_count(config.adapter_rank_embed, va, ht)
                + adapter_parameter_count(config.adapter_rank_head, va, ht))


def _ablation_cell(args) -> AblationRow:
    examples, config, hyper, eval_examples, thinker_state = args
    with ag.precision(hyper.precision):
        model = OmniModel(config, seed=hyper.seed)
        if thinker_state is not None:
            for name, p in model.named_parameters():
                if name.startswith("thinker."):
                    p.data[...] = thinker_state[name]
    result = train_run(examples, config, TrainMode.ALL, hyper, model=model, trainable=talker_side,
                       log_every=max(1, hyper.max_steps or 1))
    with ag.precision(hyper.precision):
        ev = evaluate(result.model, eval_examples or examples)
    return AblationRow(config.adapter_rank_embed, config.adapter_rank_head, added_adapter_params(config),
                       ev.audio_loss, ev.mean_accuracy, hyper.seed)


def _map(fn, cells, workers: int):
    if workers <= 1:
        return [fn(c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, cells))


def rank_ablation(
    examples: list[OmniExample],
    base_config: ModelConfig,
    embed_ranks: list[int],
    head_ranks: list[int] | None = None,
    unified: bool = True,
    hyper: TrainHyper | None = None,
    eval_examples: list[OmniExample] | None = None,
    thinker_state: dict | None = None,
    workers: int = 1,
) -> list[AblationRow]:
    """Train one frozen-Thinker run per rank setting; same seed, data and steps.

    ``unified`` pairs each rank with itself; otherwise ``embed_ranks`` and
    ``head_ranks`` are zipped into (r_e, r_h) pairs.
    """
    hyper = hyper or TrainHyper(max_steps=200)
    if unified:
        pairs = [(r, r) for r in embed_ranks]
    else:
        if head_ranks is None or len(head_ranks) != len(embed_ranks):
            raise ValueError("decoupled sweep needs one head rank per embedding rank")
        pairs = list(zip(embed_ranks, head_ranks))
    for r_e, r_h in pairs:
        if max(r_e, r_h) > base_config.talker_hidden or min(r_e, r_h) < 0:
            raise ValueError(f"rank pair ({r_e}, {r_h}) outside [0, talker_hidden={base_config.talker_hidden}]")
    cells = [(examples, base_config.replace(adapter_rank_embed=r_e, adapter_rank_head=r_h), hyper,
              eval_examples, thinker_state) for r_e, r_h in pairs]
    return _map(_ablation_cell, cells, workers)


@dataclass
class SweepRow:
    value: int
    params: int
    final_audio_loss: float
    final_accuracy: float
    average_cer: float
    bucket_cer: dict[str, float]


def _sweep_cell(args) -> SweepRow:
    from .metrics import consistency_eval

    examples, config, hyper, prompts, spec, value = args
    result = train_run(examples, config, TrainMode.ALL, hyper, log_every=max(1, hyper.max_steps or 1))
    with ag.precision(hyper.precision):
        ev = evaluate(result.model, examples)
        report = consistency_eval(result.model, prompts, spec)
    return SweepRow(value, count_parameters(config)["total"], ev.audio_loss, ev.mean_accuracy,
                    report.average, report.bucket_means)


def bridge_sweep(examples, config: ModelConfig, layer_indices: list[int], hyper: TrainHyper,
                 prompts, spec, workers: int = 1) -> list[SweepRow]:
    """Identical runs that differ only in bridge_layer_index."""
    for i in layer_indices:
        if not 0 <= i < config.num_hidden_layers:
            raise ValueError(f"bridge index {i} is not a block output of a {config.num_hidden_layers}-layer Thinker")
    cells = [(examples, config.replace(bridge_layer_index=i), hyper, prompts, spec, i) for i in layer_indices]
    return _map(_sweep_cell, cells, workers)


def hidden_sweep(examples, config: ModelConfig, hiddens: list[int], hyper: TrainHyper,
                 prompts, spec, workers: int = 1) -> list[SweepRow]:
    """Identical runs that differ only in talker_hidden."""
    cells = [(examples, config.replace(talker_hidden=h), hyper, prompts, spec, h) for h in hiddens]
    return _map(_sweep_cell, cells, workers)


def rows_to_json(rows) -> list[dict]:
    return [asdict(r) for r in rows]
