"""Command-line entry point: ``tinyomni <command> [flags]``.

Every command that writes files writes them under ``--out`` together with a
``manifest.json`` recording the resolved config, seed, inputs, outputs and
their hashes. Config precedence is built-in preset < ``--config`` file <
flags. Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as dt
import hashlib
import json
import sys
import wave
from pathlib import Path

import numpy as np

from . import __version__
from . import autograd as ag
from .config import ModelConfig, full_config, toy_config
from .data import (SEEN_SPEAKERS, UNSEEN_SPEAKERS, OracleTaskSpec, RecordError, generate_oracle_dataset,
                   prompt_example, read_header, read_records, record_to_example, write_records)
from .modality import InjectionError
from .model import CheckpointError, OmniModel
from .sequence import FormatError, validate_example

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (RecordError, FormatError, CheckpointError, InjectionError, FileNotFoundError)
PRESETS = {"toy": toy_config, "full": full_config}
HYPER_KEYS = ("lr", "batch_size", "epochs", "max_steps", "clip_norm", "weight_decay", "precision")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ------------------------------------------------------------------ config


def _coerce(raw: str):
    if raw.strip().lower() in ("none", "null"):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _typed(cls, values: dict, where: str) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in fields:
            raise UsageError(f"{where}: unknown key {key!r}")
        val = _coerce(raw) if isinstance(raw, str) else raw
        default = fields[key].default
        if isinstance(default, float) and isinstance(val, int):
            val = float(val)
        out[key] = val
    return out


def resolve_config(args, default_preset: str = "toy") -> tuple[ModelConfig, dict]:
    """Model config and training hyper-parameters after preset, file and flags."""
    from .training import TrainHyper

    model_keys: dict = {}
    train_keys: dict = {}
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        for section in parser.sections():
            if section == "model":
                model_keys.update(parser[section])
            elif section == "train":
                train_keys.update(parser[section])
            else:
                raise UsageError(f"{args.config}: unknown section [{section}]")
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        section, _, name = key.rpartition(".")
        target = train_keys if section == "train" or (not section and name in HYPER_KEYS) else model_keys
        target[name] = value
    for key in HYPER_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            train_keys[key] = flag
    try:
        config = PRESETS[args.preset or default_preset]().replace(**_typed(ModelConfig, model_keys, "[model]"))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    hyper = dataclasses.asdict(TrainHyper())
    hyper.update(_typed(TrainHyper, train_keys, "[train]"))
    hyper["seed"] = args.seed
    return config, hyper


# ---------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.started = _now()
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.extra: dict = {}
        self.config: ModelConfig | None = None
        self.hyper: dict | None = None
        self.out = Path(args.out) if getattr(args, "out", None) else None

    def output(self, name: str) -> Path:
        if self.out is None:
            raise UsageError(f"{self.args.command} needs --out DIR")
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        self.outputs.append(path)
        return path

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input {path} does not exist")
        self.inputs.append(path)
        return path

    def finish(self) -> None:
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "version": __version__,
            "seed": self.args.seed,
            "config": None if self.config is None else self.config.to_dict(),
            "hyper": self.hyper,
            "inputs": {str(p): _sha256(p) for p in self.inputs},
            "outputs": {str(p): _sha256(p) for p in self.outputs if p.exists()},
            "started": self.started,
            "finished": _now(),
            **self.extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_examples(run: Run, path, config: ModelConfig):
    records = read_records(run.read(path))
    if not records:
        raise RecordError(None, f"{path}: no records")
    header = read_header(path)
    if (header.get("codebook_count"), header.get("codebook_size")) != (config.codebook_count, config.codebook_size):
        raise RecordError(None, f"{path}: codebook layout {header.get('codebook_count')}x{header.get('codebook_size')}"
                                f" does not match config {config.codebook_count}x{config.codebook_size}")
    return records, [record_to_example(r, config) for r in records], header


def _oracle(header: dict, config: ModelConfig) -> OracleTaskSpec:
    if header.get("oracle"):
        return OracleTaskSpec.from_json(header["oracle"])
    return OracleTaskSpec.for_config(config, seed=0)


def _hyper(hyper: dict):
    from .training import TrainHyper
    return TrainHyper(**hyper)


def _print_rows(rows, columns):
    print("  ".join(f"{c:>14}" for c in columns))
    for r in rows:
        cells = []
        for c in columns:
            v = getattr(r, c)
            cells.append(f"{v:>14.4f}" if isinstance(v, float) else f"{str(v):>14}")
        print("  ".join(cells))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, run: Run) -> int:
    config, _ = resolve_config(args)
    run.config = config
    spec = OracleTaskSpec.for_config(config, seed=args.oracle_seed)
    records = generate_oracle_dataset(
        spec, args.n, seed=args.seed, min_words=args.min_words, max_words=args.max_words,
        with_reference=args.with_reference, with_speaker=args.with_speaker,
        audio_input=args.audio_input, image_input=args.image_input,
        speakers=UNSEEN_SPEAKERS if args.unseen_speakers else SEEN_SPEAKERS,
    )
    write_records(run.output("data.bin"), records, config.codebook_count, config.codebook_size, oracle=spec)
    print(f"wrote {len(records)} records to {run.out / 'data.bin'}")
    return EXIT_OK


def cmd_build_seq(args, run: Run) -> int:
    config, _ = resolve_config(args)
    run.config = config
    records = read_records(run.read(args.data))
    if not 0 <= args.index < len(records):
        raise RecordError(args.index, f"index outside [0, {len(records)})")
    ex = record_to_example(records[args.index], config)
    violations = validate_example(ex)
    if run.out is not None:
        run.output("example.bin").write_bytes(ex.to_bytes())
    summary = {
        "length": ex.length, "assistant_start": ex.assistant_start, "spk_position": ex.spk_position,
        "ref_region": ex.ref_region, "stagger_base": ex.stagger_base,
        "spans": [dataclasses.asdict(s) for s in ex.spans],
        "labeled_frames": int((ex.audio_labels[0] != ag.IGNORE_INDEX).sum()),
        "violations": [dataclasses.asdict(v) for v in violations],
    }
    print(json.dumps(summary, indent=2))
    run.extra["violations"] = len(violations)
    return EXIT_DATA if violations else EXIT_OK


def cmd_train(args, run: Run) -> int:
    from .training import train_run

    config, hyper = resolve_config(args)
    if args.init:
        model = OmniModel.load(run.read(args.init))
        config = model.config
    else:
        model = None
    run.config, run.hyper = config, hyper
    _, examples, _ = _load_examples(run, args.data, config)
    out = run.output("model.ckpt").parent
    run.outputs.append(out / "metrics.jsonl")
    result = train_run(examples, config, args.mode, _hyper(hyper), model=model, out_dir=out)
    modules = sorted({n.split(".")[0] for n in result.trainable})
    run.extra.update(mode=args.mode, trainable_modules=modules, steps=len(result.log))
    last = result.log[-1]
    print(f"{len(result.log)} steps in {result.seconds:.1f}s  text_loss={last['text_loss']:.4f}  "
          f"mean_acc={float(np.mean(last['accuracy'])):.4f}  trainable={','.join(modules)}")
    return EXIT_OK


def cmd_ablate_rank(args, run: Run) -> int:
    from .training import rank_ablation, rows_to_json

    config, hyper = resolve_config(args)
    run.config, run.hyper = config, hyper
    _, examples, _ = _load_examples(run, args.data, config)
    thinker_state = None
    if args.thinker:
        state = OmniModel.load(run.read(args.thinker)).state_dict()
        thinker_state = {k: v for k, v in state.items() if k.startswith("thinker.")}
    rows = []
    for seed in args.seeds or [args.seed]:
        h = _hyper({**hyper, "seed": seed})
        rows += rank_ablation(examples, config, args.ranks, args.head_ranks, unified=args.head_ranks is None,
                              hyper=h, thinker_state=thinker_state, workers=args.workers)
    run.output("ablation.json").write_text(json.dumps(rows_to_json(rows), indent=2) + "\n")
    _print_rows(rows, ["seed", "rank_embed", "rank_head", "added_params", "final_audio_loss", "final_accuracy"])
    return EXIT_OK


def _sweep(args, run: Run, kind: str) -> int:
    from .training import bridge_sweep, hidden_sweep, rows_to_json

    config, hyper = resolve_config(args)
    run.config, run.hyper = config, hyper
    _, examples, header = _load_examples(run, args.data, config)
    spec = _oracle(header, config)
    prompts = generate_oracle_dataset(spec, args.eval_n, seed=args.eval_seed)
    if kind == "bridge":
        rows = bridge_sweep(examples, config, args.layers, _hyper(hyper), prompts, spec, args.workers)
    else:
        rows = hidden_sweep(examples, config, args.hiddens, _hyper(hyper), prompts, spec, args.workers)
    run.output(f"sweep_{kind}.json").write_text(json.dumps(rows_to_json(rows), indent=2) + "\n")
    _print_rows(rows, ["value", "params", "final_audio_loss", "final_accuracy", "average_cer"])
    return EXIT_OK


def cmd_decode_stream(args, run: Run) -> int:
    from .streaming import GenerationSession, Sampling, decode_frame_stub

    model = OmniModel.load(run.read(args.checkpoint))
    run.config = model.config
    records = read_records(run.read(args.data))
    if not 0 <= args.index < len(records):
        raise RecordError(args.index, f"index outside [0, {len(records)})")
    session = GenerationSession(model, prompt_example(records[args.index], model.config),
                                Sampling(args.temperature, args.seed), max_text_tokens=args.max_text_tokens,
                                stop_at_eos=not args.ignore_eos)
    events = []
    while session.status.value == "running":
        if args.cancel_after is not None and session.step_index >= args.cancel_after:
            session.cancel()
            events.append({"event": "cancel", "step": session.step_index})
            break
        res = session.step()
        if res.text_id is not None:
            events.append({"event": "text", "step": res.step, "token": res.text_id})
        if res.frame is not None:
            events.append({"event": "frame", "step": res.step, "frame": res.frame.frame_index,
                           "codes": list(res.frame.codes)})
    events.append({"event": "finish", "step": session.step_index, "status": session.status.value,
                   "text_tokens": session.n_text, "frames": session.frames_emitted})
    with open(run.output("events.ndjson"), "w") as fh:
        for e in events:
            fh.write(json.dumps(e) + "\n")
    if args.wav:
        samples = [decode_frame_stub(f).samples for f in session.frames]
        pcm = np.concatenate(samples) if samples else np.zeros(0, dtype=np.float32)
        with wave.open(str(run.output("reply.wav")), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(24000)
            w.writeframes((np.clip(pcm, -1, 1) * 32767).astype("<i2").tobytes())
    print(f"{session.status.value}: {session.n_text} text tokens, {session.frames_emitted} frames")
    return EXIT_OK


def cmd_eval_consistency(args, run: Run) -> int:
    from .metrics import consistency_eval

    model = OmniModel.load(run.read(args.checkpoint))
    run.config = model.config
    prompts = read_records(run.read(args.data))
    spec = _oracle(read_header(args.data), model.config)
    report = consistency_eval(model, prompts, spec, args.max_text_tokens, tuple(args.thresholds))
    run.output("report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    print(report.table())
    return EXIT_OK


def cmd_eval_speaker(args, run: Run) -> int:
    from .metrics import speaker_similarity, stub_speaker_embedding
    from .streaming import GenerationSession

    model = OmniModel.load(run.read(args.checkpoint))
    cfg = run.config = model.config
    pairs = []
    for rec in read_records(run.read(args.data)):
        if rec.speaker_name is None:
            continue
        session = GenerationSession(model, prompt_example(rec, cfg), max_text_tokens=args.max_text_tokens)
        session.run()
        ref = rec.ref_codes if rec.ref_codes is not None else rec.response_codes
        pairs.append((rec.speaker_name, stub_speaker_embedding(ref, cfg.codebook_size),
                      stub_speaker_embedding(session.code_grid(), cfg.codebook_size)))
    if not pairs:
        raise RecordError(None, f"{args.data}: no records carry a speaker")
    report = speaker_similarity(pairs, SEEN_SPEAKERS)
    run.output("speaker.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    print(report.table())
    return EXIT_OK


def cmd_count_params(args, run: Run) -> int:
    from .thinker import count_parameters

    config, _ = resolve_config(args, default_preset="full")
    run.config = config
    counts = count_parameters(config)
    for name, n in counts.items():
        print(f"{name:<40} {n:>14,}")
    if run.out is not None:
        run.output("params.json").write_text(json.dumps(counts, indent=2) + "\n")
    return EXIT_OK


def cmd_grad_check(args, run: Run) -> int:
    from .gradcheck import module_gradient_suite

    results = module_gradient_suite(seed=args.seed, max_coords=args.max_coords)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name:<20} {err:.3e}")
    ok = worst < 1e-4
    print(f"max relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    if run.out is not None:
        run.output("gradcheck.json").write_text(json.dumps({"modules": results, "max": worst}, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_dump(args, run: Run) -> int:
    path = run.read(args.data)
    header = read_header(path)
    print(json.dumps({"header": header}))
    for i, rec in enumerate(read_records(path)):
        if args.limit is not None and i >= args.limit:
            break
        print(json.dumps({"index": i, **rec.to_json()}))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="INI file with [model] and [train] sections")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (prefix train. for training keys); repeatable")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in model dimensions")
    common.add_argument("--seed", type=int, default=0, help="seed for data, init and sampling")
    common.add_argument("--out", metavar="DIR", help="directory for every output and the manifest")

    hyper = Parser(add_help=False)
    hyper.add_argument("--lr", type=float, help="AdamW learning rate")
    hyper.add_argument("--batch-size", dest="batch_size", type=int, help="examples per step")
    hyper.add_argument("--epochs", type=int, help="passes over the data when --steps is unset")
    hyper.add_argument("--steps", dest="max_steps", type=int, help="optimizer steps (overrides --epochs)")
    hyper.add_argument("--clip", dest="clip_norm", type=float, help="global gradient-norm clip")
    hyper.add_argument("--weight-decay", dest="weight_decay", type=float, help="decoupled weight decay")
    hyper.add_argument("--precision", type=int, choices=(32, 64), help="float width for parameters and math")

    sweep = Parser(add_help=False)
    sweep.add_argument("--workers", type=int, default=1, help="worker processes for independent cells")

    parser = Parser(prog="tinyomni", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tinyomni {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help, parents=()):
        p = sub.add_parser(name, help=help, description=help, parents=[common, *parents])
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write an oracle-task dataset")
    p.add_argument("--n", type=int, default=200, help="number of records")
    p.add_argument("--oracle-seed", type=int, default=0, help="seed for the code mapping (keep fixed across splits)")
    p.add_argument("--min-words", type=int, default=2, help="shortest user utterance")
    p.add_argument("--max-words", type=int, default=6, help="longest user utterance")
    p.add_argument("--with-reference", action="store_true", help="attach reference codes")
    p.add_argument("--with-speaker", action="store_true", help="attach a speaker vector")
    p.add_argument("--unseen-speakers", action="store_true", help="draw speakers from the held-out set")
    p.add_argument("--audio-input", action="store_true", help="attach an audio input span")
    p.add_argument("--image-input", action="store_true", help="attach an image input span")

    p = add("build-seq", cmd_build_seq, "assemble, validate and dump one training sequence")
    p.add_argument("--data", required=True, help="record file")
    p.add_argument("--index", type=int, default=0, help="record index")

    p = add("train", cmd_train, "train a model on a record file", [hyper])
    p.add_argument("--data", required=True, help="record file")
    p.add_argument("--mode", choices=("all", "audio_proj", "vision_proj"), default="all", help="which modules train")
    p.add_argument("--init", metavar="CKPT", help="start from this checkpoint (its config wins)")

    p = add("ablate-rank", cmd_ablate_rank, "adapter-rank ablation with a frozen Thinker", [hyper, sweep])
    p.add_argument("--data", required=True, help="record file")
    p.add_argument("--ranks", type=_ints, default=[2, 8, 32], help="embedding ranks (unified when alone)")
    p.add_argument("--head-ranks", type=_ints, help="head ranks, paired with --ranks (decoupled sweep)")
    p.add_argument("--thinker", metavar="CKPT", help="take frozen Thinker weights from this checkpoint")
    p.add_argument("--seeds", type=_ints, help="repeat the sweep for each seed")

    for name, kind, flag, default, text in (
            ("sweep-bridge", "bridge", "--layers", [0, 1, 2, 3], "bridge layer indices"),
            ("sweep-hidden", "hidden", "--hiddens", [32, 48, 64], "Talker hidden sizes")):
        p = add(name, lambda a, r, k=kind: _sweep(a, r, k), f"sweep {text} on the oracle task", [hyper, sweep])
        p.add_argument("--data", required=True, help="training record file")
        p.add_argument(flag, type=_ints, default=default, help=f"comma-separated {text}")
        p.add_argument("--eval-n", type=int, default=20, help="held-out prompts for CER")
        p.add_argument("--eval-seed", type=int, default=10_000, help="seed for held-out prompts")

    p = add("decode-stream", cmd_decode_stream, "stream one reply and log text and frame events")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="record file holding the prompt")
    p.add_argument("--index", type=int, default=0, help="record index")
    p.add_argument("--max-text-tokens", type=int, default=40, help="text token budget")
    p.add_argument("--temperature", type=float, default=0.0, help="0 is greedy")
    p.add_argument("--ignore-eos", action="store_true", help="keep generating past a text eos")
    p.add_argument("--cancel-after", type=int, metavar="S", help="cancel once S steps have completed")
    p.add_argument("--wav", action="store_true", help="also write the stub waveform as reply.wav")

    p = add("eval-consistency", cmd_eval_consistency, "text/speech consistency CER on the oracle task")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="prompt record file")
    p.add_argument("--max-text-tokens", type=int, default=40, help="text token budget per prompt")
    p.add_argument("--thresholds", type=_ints, default=[15, 30], help="short/mid word-count bucket bounds")

    p = add("eval-speaker", cmd_eval_speaker, "speaker similarity of generated codes (stub embedding)")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="records with speakers")
    p.add_argument("--max-text-tokens", type=int, default=40, help="text token budget per prompt")

    add("count-params", cmd_count_params, "structural parameter counts per module")

    p = add("grad-check", cmd_grad_check, "finite-difference gradient check over every module")
    p.add_argument("--max-coords", type=int, default=4, help="sampled coordinates per parameter tensor")

    p = add("dump", cmd_dump, "print a record file as JSON lines")
    p.add_argument("--data", required=True, help="record file")
    p.add_argument("--limit", type=int, help="print at most this many records")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    run = Run(args, argv)
    where = f"tinyomni {args.command}"
    try:
        code = args.func(args, run)
    except UsageError as exc:
        print(f"{where}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"{where}: data error ({type(exc).__module__}): {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ag.NonFiniteError, _training_aborted()) as exc:
        print(f"{where}: numerical failure ({type(exc).__module__}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run.finish()
    return code


def _training_aborted():
    from .training import TrainingAborted
    return TrainingAborted


if __name__ == "__main__":
    sys.exit(main())
