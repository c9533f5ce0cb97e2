"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one PASS/FAIL line (printed immediately and again in the
pytest terminal summary) before asserting.
"""

import math
import time

import numpy as np
import pytest

from tinyomni import autograd as ag
from tinyomni.autograd import IGNORE_INDEX, Tensor
from tinyomni.config import SPEAKER_DIM, full_config, toy_config
from tinyomni.data import OracleTaskSpec, generate_oracle_dataset, prompt_example, record_to_example
from tinyomni.gradcheck import MODULE_GROUPS, module_gradient_suite
from tinyomni.metrics import consistency_eval, cosine_similarity, edit_distance_rate, levenshtein
from tinyomni.modality import PlaceholderSpan, Projector
from tinyomni.model import Batch, OmniModel
from tinyomni.sequence import OmniExample, build_example, collate, frame_of_position, validate_example
from tinyomni.streaming import GenerationSession, offline_equivalence
from tinyomni.thinker import count_parameters
from tinyomni.training import TrainHyper, evaluate, joint_loss, rank_ablation, train_run

from conftest import ACCEPTANCE
from oracles import bfs_edit_distances


def report(key: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}"
    ACCEPTANCE[key] = line
    print(line)
    assert ok, line


def _examples(cfg, n, seed, **kw):
    spec = OracleTaskSpec.for_config(cfg, seed=0)
    return [record_to_example(r, cfg) for r in generate_oracle_dataset(spec, n, seed=seed, **kw)]


# 1 ------------------------------------------------------------------------


def test_1_gradient_suite():
    t0 = time.perf_counter()
    errors = module_gradient_suite(seed=0, max_coords=4)
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = set(errors) == set(MODULE_GROUPS) and errors[worst] < 1e-4 and seconds < 120
    report("1", ok, f"{len(errors)} module groups, max rel err {errors[worst]:.2e} ({worst}) < 1e-4, "
                    f"{seconds:.1f}s < 120s")


# 2 ------------------------------------------------------------------------


def test_2_parameter_counts():
    full = full_config()
    counts = count_parameters(full)
    audio = Projector(full.audio_feature_dim, full.hidden_size)
    vision = Projector(full.vision_feature_dim, full.hidden_size)
    built = (sum(p.data.size for p in audio.parameters()), sum(p.data.size for p in vision.parameters()))
    toy = toy_config(adapter_rank_embed=8, adapter_rank_head=16)
    model = OmniModel(toy)
    sizes = dict((n, p.data.size) for n, p in model.named_parameters())
    per_q_embed = [sizes[f"talker.embedding.adapters.{q}.down"] + sizes[f"talker.embedding.adapters.{q}.up"]
                   for q in range(8)]
    per_q_head = [sizes[f"talker.head.adapters.{q}.down"] + sizes[f"talker.head.adapters.{q}.up"] for q in range(8)]
    ok = (counts["audio_projector"] == built[0] == 985_600
          and counts["vision_projector"] == built[1] == 1_182_720
          and f"{985_600 / 1e6:.2f}M" == "0.99M" and f"{1_182_720 / 1e6:.2f}M" == "1.18M"
          and counts["talker_embedding_adapter_per_codebook"] == 256 * (2112 + 768)
          and counts["talker_head_adapter_per_codebook"] == 256 * (2112 + 768)
          and per_q_embed == [8 * (toy.audio_vocab + toy.talker_hidden)] * 8
          and per_q_head == [16 * (toy.audio_vocab + toy.talker_hidden)] * 8)
    report("2", ok, f"projectors {built[0]:,} / {built[1]:,}; adapters r(vocab+hidden) per codebook at full and toy dims")


# 3 ------------------------------------------------------------------------

SIZE = 32


def _random_example(rng):
    k = int(rng.integers(1, 9))
    base = int(rng.integers(1, 3))
    p = int(rng.integers(1, 16))
    prompt = rng.integers(6, 40, p)
    spans, contents = [], []
    if p >= 4 and rng.random() < 0.3:
        start = int(rng.integers(1, p - 2))
        length = int(rng.integers(1, p - start))
        prompt[start:start + length] = 4
        spans, contents = [PlaceholderSpan("vision", start, length)], [rng.bytes(8)]
    use_spk = rng.random() < 0.5
    ref_len = int(rng.integers(0, p - int(use_spk) + 1))
    return build_example(
        prompt, rng.integers(6, 40, int(rng.integers(0, 10))), rng.integers(0, SIZE, (k, int(rng.integers(0, 10)))),
        ref_codes=rng.integers(0, SIZE, (k, ref_len)) if ref_len else None,
        speaker_vector=rng.normal(size=SPEAKER_DIM) if use_spk else None,
        spans=spans, span_contents=contents, codebook_size=SIZE, stagger_base=base,
    )


def _conditioning_gradients_are_zero():
    cfg = toy_config()
    ex = _examples(cfg, 4, seed=11, with_reference=True, with_speaker=True, audio_input=True, max_ref_frames=3)
    batch = collate(ex)
    with ag.precision(64):
        model = OmniModel(cfg, seed=0)
        out, talker_logits = model.forward(batch)
        total, _ = joint_loss(batch, out.text_logits, talker_logits)
        ag.backward(total)
    checked = 0
    for row, e in enumerate(ex):
        # logits at p are scored against the label at p + 1
        conditioning = list(range(e.ref_region[0] - 1, e.ref_region[0] + e.ref_region[1] - 1))
        conditioning += [e.spk_position - 1] if e.spk_position > 0 else []
        conditioning += list(range(e.assistant_start))
        for q, lg in enumerate(talker_logits):
            if np.any(lg.grad[row, conditioning] != 0.0):
                return False, checked
            checked += len(conditioning)
        text_masked = np.flatnonzero(batch.text_labels[row, 1:] == IGNORE_INDEX)
        if np.any(out.text_logits.grad[row, text_masked] != 0.0):
            return False, checked
    return True, checked


def test_3_format_invariants():
    rng = np.random.default_rng(2024)
    violations = mismatched = stagger_errors = labeled = 0
    for _ in range(10_000):
        ex = _random_example(rng)
        back = OmniExample.from_bytes(ex.to_bytes())
        mismatched += not back.equals(ex)
        violations += len(validate_example(ex)) + len(validate_example(back))
        for q in range(ex.codebook_count):
            pos = np.flatnonzero(ex.audio_labels[q] != IGNORE_INDEX)
            frames = [frame_of_position(int(p), q, ex.assistant_start, ex.stagger_base) for p in pos]
            stagger_errors += frames != list(range(len(pos)))
            labeled += len(pos)
    zero_grad, checked = _conditioning_gradients_are_zero()
    ok = violations == 0 and mismatched == 0 and stagger_errors == 0 and zero_grad
    report("3", ok, f"10,000 round trips: {violations} violations, {mismatched} mismatches; stagger inverse exact on "
                    f"{labeled} labels; {checked} conditioning logits with exactly zero gradient")


# 4 ------------------------------------------------------------------------


def _random_checkpoint(seed, tmp_path):
    cfg = toy_config()
    rng = np.random.default_rng(seed)
    model = OmniModel(cfg, seed=seed)
    for _, p in model.named_parameters():
        p.data[...] = (rng.normal(0, 0.3, p.shape) if p.init == "normal"
                       else p.data + rng.normal(0, 0.2, p.shape)).astype(p.data.dtype)
    path = tmp_path / f"ckpt{seed}.bin"
    model.save(path)
    return OmniModel.load(path)


def test_4_streaming_equivalence(tmp_path):
    spec = OracleTaskSpec.for_config(toy_config(), seed=0)
    records = generate_oracle_dataset(spec, 100, seed=4, with_speaker=True, with_reference=True)
    diverged = schedule_errors = cancel_errors = 0
    cancels = 0
    for i in range(100):
        model = _random_checkpoint(i, tmp_path)
        prompt = prompt_example(records[i], model.config)
        session = GenerationSession(model, prompt, stop_at_eos=False)
        for done in range(1, 65):
            session.step()
            schedule_errors += session.frames_emitted != max(0, done - 8)
        diverged += not offline_equivalence(session).ok
        cut_points = range(0, 20) if i == 0 else [int(np.random.default_rng(i).integers(0, 64))]
        for s in cut_points:
            cut = GenerationSession(model, prompt, stop_at_eos=False)
            cut.run(max_steps=s)
            cut.cancel()
            cancel_errors += cut.frames_emitted != max(0, s - 8)
            cancels += 1
    ok = diverged == 0 and schedule_errors == 0 and cancel_errors == 0
    report("4", ok, f"100 checkpoints x 64 steps: {diverged} divergent from teacher-forced decode, "
                    f"{schedule_errors} frame-count errors, {cancel_errors}/{cancels} cancel errors")


# 5 ------------------------------------------------------------------------


def test_5_oracle_convergence():
    cfg = toy_config()
    spec = OracleTaskSpec.for_config(cfg, seed=0)
    train = [record_to_example(r, cfg) for r in generate_oracle_dataset(spec, 2000, seed=1)]
    held_out = [record_to_example(r, cfg) for r in generate_oracle_dataset(spec, 400, seed=3)]
    t0 = time.perf_counter()
    result = train_run(train, cfg, "all", TrainHyper(lr=3e-3, batch_size=16, max_steps=5000, seed=0),
                       log_every=500)
    train_seconds = time.perf_counter() - t0
    accuracy = evaluate(result.model, held_out).mean_accuracy
    cer = consistency_eval(result.model, generate_oracle_dataset(spec, 50, seed=99), spec).average
    seconds = time.perf_counter() - t0
    ok = accuracy >= 0.95 and cer <= 0.05 and seconds <= 15 * 60
    report("5", ok, f"held-out mean codebook accuracy {accuracy:.4f} >= 0.95, consistency CER {cer:.4f} <= 0.05, "
                    f"{seconds:.0f}s <= 900s (training {train_seconds:.0f}s)")


# 6 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation_data():
    cfg = toy_config()
    return cfg, _examples(cfg, 1000, seed=1), _examples(cfg, 200, seed=2)


def test_6a_unified_rank_non_increasing(ablation_data):
    cfg, train, held_out = ablation_data
    hyper = TrainHyper(lr=3e-3, batch_size=16, max_steps=300, seed=0)
    rows = rank_ablation(train, cfg, [2, 8, 32], hyper=hyper, eval_examples=held_out)
    losses = [r.final_audio_loss for r in rows]
    slack = 0.02 * (max(losses) - min(losses))
    ok = all(b <= a + slack for a, b in zip(losses, losses[1:]))
    report("6a", ok, "frozen-Thinker audio loss at ranks 2/8/32: " + " / ".join(f"{x:.4f}" for x in losses)
                     + f" (slack {slack:.4f})")


def test_6b_head_rank_beats_embedding_rank(ablation_data):
    cfg, train, held_out = ablation_data
    per_seed = []
    for seed in (0, 1, 2):
        hyper = TrainHyper(lr=3e-3, batch_size=16, max_steps=300, seed=seed)
        head_heavy, embed_heavy = rank_ablation(train, cfg, [8, 32], [32, 8], unified=False, hyper=hyper,
                                                eval_examples=held_out)
        assert head_heavy.added_params == embed_heavy.added_params
        per_seed.append((head_heavy.final_audio_loss, embed_heavy.final_audio_loss))
    wins = sum(h <= e for h, e in per_seed)
    mean_h, mean_e = np.mean(per_seed, axis=0)
    ok = mean_h <= mean_e and wins >= 2
    report("6b", ok, f"(r_e, r_h)=(8, 32) vs (32, 8) at equal added params, {wins}/3 seeds head-heavy better; "
                     "losses " + ", ".join(f"{h:.4f}<={e:.4f}" for h, e in per_seed))


# 7 ------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["audio_proj", "vision_proj"])
def test_7_mode_freezing(mode):
    cfg = toy_config()
    train = _examples(cfg, 64, seed=5, audio_input=True, image_input=True, max_words=3)
    model = OmniModel(cfg, seed=0)
    before = model.module_hashes()
    train_run(train, cfg, mode, TrainHyper(lr=1e-2, batch_size=8, max_steps=100), model=model)
    after = model.module_hashes()
    frozen_same = all(before[m] == after[m] for m in before if m != mode)
    ok = frozen_same and before[mode] != after[mode]
    report(f"7 {mode}", ok, f"{mode}: 100 steps, non-selected module hashes unchanged, {mode} updated")


# 8 ------------------------------------------------------------------------


@pytest.mark.parametrize("lam", [1.0, 0.5])
def test_8_uniform_logit_identity(lam):
    rng = np.random.default_rng(8)
    t = 6
    batch = Batch(np.zeros((1, t), dtype=np.int64), rng.integers(0, 6400, (1, t)),
                  np.zeros((1, 8, t), dtype=np.int64), rng.integers(0, 2112, (1, 8, t)))
    with ag.precision(64):
        _, br = joint_loss(batch, Tensor(np.zeros((1, t, 6400))), [Tensor(np.zeros((1, t, 2112))) for _ in range(8)],
                           lam)
    expected = math.log(6400) + lam * 8 * math.log(2112)
    err = abs(br.total - expected)
    report(f"8 lambda={lam}", err < 1e-9, f"uniform joint loss {br.total:.12f} vs {expected:.12f} (|diff| {err:.1e})")


# 9 ------------------------------------------------------------------------


def test_9_metric_oracles():
    nodes, dist = bfs_edit_distances("abc", 4)
    bad = 0
    for a in nodes:
        for b in nodes:
            bad += levenshtein(a, b) != dist[a, b]
            if b:
                bad += edit_distance_rate(a, b) != dist[a, b] / len(b)
    u = np.array([0.3, -1.2, 2.0])
    cos = (cosine_similarity(u, u), cosine_similarity([1.0, 0.0], [0.0, 2.0]), cosine_similarity(u, -u))
    ok = bad == 0 and cos == (1.0, 0.0, -1.0)
    report("9", ok, f"{len(nodes) ** 2} string pairs vs breadth-first edit search, {bad} mismatches; "
                    f"cosine identities {cos}")
