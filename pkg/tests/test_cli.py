import json
import re
import wave
from pathlib import Path

import pytest

from tinyomni import cli

README = Path(__file__).resolve().parents[1] / "README.md"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--n", 24, "--with-speaker", "--with-reference", "--out", out) == 0
    return out / "data.bin"


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert run("train", "--data", data, "--steps", 2, "--batch-size", 4, "--out", out) == 0
    return out / "model.ckpt"


def test_count_params_prints_projector_counts(capsys):
    assert run("count-params") == 0
    text = capsys.readouterr().out
    assert "985,600" in text and "1,182,720" in text


def test_vision_proj_manifest_has_one_trainable_module(data, tmp_path):
    assert run("train", "--data", data, "--mode", "vision_proj", "--steps", 2, "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["trainable_modules"] == ["vision_proj"]
    assert manifest["command"] == "train" and manifest["hyper"]["max_steps"] == 2


def test_grad_check_exit_status(monkeypatch, capsys):
    assert run("grad-check") == 0
    import tinyomni.gradcheck as gc
    monkeypatch.setattr(gc, "module_gradient_suite", lambda **kw: {"thinker_blocks": 3e-4})
    assert run("grad-check") == 3
    assert "FAIL" in capsys.readouterr().out


def test_unknown_flag_and_bad_config_are_usage_errors(tmp_path, capsys):
    assert run("count-params", "--no-such-flag") == 1
    assert "usage" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nnot_a_key = 3\n")
    assert run("count-params", "--config", bad) == 1
    bad.write_text("[model]\nnum_query_heads = 3\n")
    assert run("count-params", "--config", bad) == 1
    assert run("count-params", "--set", "oops") == 1


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\nhidden_size = 32\ntalker_hidden = 32\n[train]\nlr = 0.5\nbatch_size = 3\n")
    args = cli.build_parser().parse_args(["train", "--data", "x", "--config", str(cfg), "--lr", "0.25",
                                          "--set", "talker_hidden=16"])
    config, hyper = cli.resolve_config(args)
    assert config.hidden_size == 32 and config.talker_hidden == 16 and config.text_vocab == 64
    assert hyper["lr"] == 0.25 and hyper["batch_size"] == 3


def test_data_errors_exit_two(tmp_path, data):
    assert run("dump", "--data", tmp_path / "missing.bin") == 2
    broken = tmp_path / "broken.bin"
    broken.write_bytes(data.read_bytes()[:-5])
    assert run("dump", "--data", broken) == 2
    assert run("build-seq", "--data", data, "--index", 999) == 2
    assert run("train", "--data", data, "--preset", "full", "--steps", 1, "--out", tmp_path / "t") == 2


def test_build_seq_writes_example(data, tmp_path, capsys):
    assert run("build-seq", "--data", data, "--index", 1, "--out", tmp_path) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["violations"] == [] and summary["spk_position"] is not None
    assert (tmp_path / "example.bin").stat().st_size > 0


def test_build_seq_violation_exit_two(data, monkeypatch):
    from tinyomni.sequence import Violation
    monkeypatch.setattr(cli, "validate_example", lambda ex: [Violation("rule", 0, "bad")])
    assert run("build-seq", "--data", data) == 2


def test_decode_stream_events_and_cancel(ckpt, data, tmp_path):
    out = tmp_path / "s"
    assert run("decode-stream", "--checkpoint", ckpt, "--data", data, "--cancel-after", 11,
               "--max-text-tokens", 30, "--ignore-eos", "--wav", "--out", out) == 0
    events = [json.loads(line) for line in (out / "events.ndjson").read_text().splitlines()]
    frames = [e["frame"] for e in events if e["event"] == "frame"]
    finish = events[-1]
    assert finish["status"] == "cancelled" and events[-2] == {"event": "cancel", "step": 11}
    assert frames == [0, 1, 2] and sum(e["event"] == "text" for e in events) == 11
    assert finish["frames"] == len(frames)
    with wave.open(str(out / "reply.wav")) as w:
        assert w.getframerate() == 24000 and w.getnframes() == 1920 * len(frames)


def test_same_inputs_reproduce_outputs(data, tmp_path):
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("train", "--data", data, "--steps", 3, "--precision", 64, "--seed", 5, "--out", out) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        hashes.append({Path(k).name: v for k, v in manifest["outputs"].items()})
    assert hashes[0] == hashes[1] and set(hashes[0]) == {"model.ckpt", "metrics.jsonl"}


def test_outputs_stay_under_out_dir(data, ckpt, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "only"
    assert run("eval-consistency", "--checkpoint", ckpt, "--data", data, "--max-text-tokens", 4, "--out", out) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["only"]
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "report.json"]


def test_eval_speaker_and_sweeps_run(data, ckpt, tmp_path):
    assert run("eval-speaker", "--checkpoint", ckpt, "--data", data, "--max-text-tokens", 3, "--out", tmp_path / "sp") == 0
    assert run("ablate-rank", "--data", data, "--ranks", "2,4", "--head-ranks", "4,2", "--steps", 1,
               "--out", tmp_path / "ab") == 0
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [(r["rank_embed"], r["rank_head"]) for r in rows] == [(2, 4), (4, 2)]
    assert run("sweep-bridge", "--data", data, "--layers", "0,3", "--steps", 1, "--eval-n", 1,
               "--out", tmp_path / "sb") == 0


def test_dump_prints_every_record(data, capsys):
    assert run("dump", "--data", data) == 0
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[0])["header"]["count"] == 24 and len(lines) == 25


def _all_flags():
    parser = cli.build_parser()
    flags = set()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    for name, p in sub.choices.items():
        flags |= {(name, o) for a in p._actions for o in a.option_strings if o.startswith("--")}
    return sub.choices, flags


def test_readme_documents_every_command_and_flag():
    text = README.read_text()
    commands, flags = _all_flags()
    missing = sorted(c for c in commands if f"`{c}`" not in text)
    missing += sorted(f for _, f in flags if not re.search(rf"`{re.escape(f)}[` ]", text))
    assert not missing, f"undocumented: {missing}"


def test_help_lists_every_flag(capsys):
    commands, flags = _all_flags()
    for name in commands:
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args([name, "--help"])
        shown = capsys.readouterr().out
        assert all(f in shown for c, f in flags if c == name)
