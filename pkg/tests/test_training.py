import json
import math

import numpy as np
import pytest

from tinyomni import autograd as ag
from tinyomni.autograd import IGNORE_INDEX, Tensor
from tinyomni.data import OracleTaskSpec, generate_oracle_dataset, record_to_example
from tinyomni.gradcheck import finite_difference_check
from tinyomni.model import Batch, OmniModel
from tinyomni.sequence import collate
from tinyomni.training import (TrainHyper, TrainingAborted, TrainMode, bridge_sweep, joint_loss, rank_ablation,
                               train_run)

from conftest import randomize, tiny_config


def _examples(cfg, n=8, seed=0, **kw):
    spec = OracleTaskSpec.for_config(cfg, seed=0)
    return [record_to_example(r, cfg) for r in generate_oracle_dataset(spec, n, seed=seed, max_words=3, **kw)]


def _uniform_batch(t, k, rng, audio_mask=False):
    text_labels = rng.integers(0, 10, (1, t))
    audio_labels = rng.integers(0, 10, (1, k, t))
    if audio_mask:
        audio_labels[...] = IGNORE_INDEX
    return Batch(np.zeros((1, t), dtype=np.int64), text_labels, np.zeros((1, k, t), dtype=np.int64), audio_labels)


def test_uniform_logits_full_vocab(f64):
    rng = np.random.default_rng(0)
    batch = _uniform_batch(5, 8, rng)
    text = Tensor(np.zeros((1, 5, 6400)))
    audio = [Tensor(np.zeros((1, 5, 2112))) for _ in range(8)]
    _, br = joint_loss(batch, text, audio, 1.0)
    assert abs(br.total - (math.log(6400) + 8 * math.log(2112))) < 1e-9


def test_masked_audio_and_zero_lambda_leave_text_loss(f64):
    rng = np.random.default_rng(1)
    text = Tensor(rng.normal(size=(1, 6, 12)))
    audio = [Tensor(rng.normal(size=(1, 6, 20))) for _ in range(8)]
    _, masked = joint_loss(_uniform_batch(6, 8, rng, audio_mask=True), text, audio, 1.0)
    assert masked.total == masked.text_loss and masked.degenerate_codebooks == list(range(8))
    batch = _uniform_batch(6, 8, rng)
    _, zero = joint_loss(batch, text, audio, 0.0)
    assert zero.total == zero.text_loss


def test_lambda_linearity(f64):
    rng = np.random.default_rng(2)
    batch = _uniform_batch(6, 8, rng)
    text = Tensor(rng.normal(size=(1, 6, 12)))
    audio = [Tensor(rng.normal(size=(1, 6, 20))) for _ in range(8)]
    _, one = joint_loss(batch, text, audio, 1.0)
    _, two = joint_loss(batch, text, audio, 2.0)
    assert two.total == pytest.approx(one.text_loss + 2 * (one.total - one.text_loss), abs=1e-12)


def test_masked_positions_get_exactly_zero_gradient(f64):
    cfg = tiny_config()
    model = OmniModel(cfg, seed=0)
    randomize(model, 1, std=0.3)
    batch = collate(_examples(cfg, 3, with_reference=True, with_speaker=True))
    out, talker_logits = model.forward(batch)
    total, _ = joint_loss(batch, out.text_logits, talker_logits)
    ag.backward(total)
    # logits at p are scored against labels at p + 1
    text_grad = out.text_logits.grad[:, :-1]
    assert np.all(text_grad[batch.text_labels[:, 1:] == IGNORE_INDEX] == 0.0)
    assert np.all(out.text_logits.grad[:, -1] == 0.0)
    for q, lg in enumerate(talker_logits):
        masked = batch.audio_labels[:, q, 1:] == IGNORE_INDEX
        assert np.all(lg.grad[:, :-1][masked] == 0.0)
        assert np.any(lg.grad[:, :-1][~masked] != 0.0)


def test_full_model_gradient_check(f64):
    cfg = tiny_config()
    model = OmniModel(cfg, seed=0)
    randomize(model, 2, std=0.3)
    batch = collate(_examples(cfg, 1, seed=3, with_speaker=True, with_reference=True, audio_input=True))

    def loss():
        out, logits = model.forward(batch)
        return joint_loss(batch, out.text_logits, logits)[0]

    assert finite_difference_check(loss, model.parameters(), 1e-6, max_coords=3) < 1e-4


@pytest.mark.parametrize("mode,changing", [("audio_proj", "audio_proj"), ("vision_proj", "vision_proj")])
def test_projector_modes_freeze_everything_else(mode, changing):
    cfg = tiny_config()
    examples = _examples(cfg, 6, audio_input=True, image_input=True)
    model = OmniModel(cfg, seed=0)
    before = model.module_hashes()
    train_run(examples, cfg, mode, TrainHyper(lr=1e-2, batch_size=3, max_steps=4), model=model)
    after = model.module_hashes()
    for name in before:
        assert (before[name] != after[name]) == (name == changing), name


def test_all_mode_trains_every_module():
    cfg = tiny_config()
    examples = _examples(cfg, 6, audio_input=True, image_input=True)
    model = OmniModel(cfg, seed=0)
    before = model.module_hashes()
    train_run(examples, cfg, TrainMode.ALL, TrainHyper(lr=1e-2, batch_size=3, max_steps=3), model=model)
    after = model.module_hashes()
    assert all(before[k] != after[k] for k in before)


def test_same_seed_bit_identical_logs(tmp_path):
    cfg = tiny_config()
    examples = _examples(cfg, 10)
    hyper = TrainHyper(lr=1e-2, batch_size=4, max_steps=5, seed=7, precision=64)
    train_run(examples, cfg, "all", hyper, out_dir=tmp_path / "a")
    train_run(examples, cfg, "all", hyper, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(line) for line in a.splitlines()]
    assert [r["step"] for r in rows] == list(range(5)) and len(rows[0]["audio_loss"]) == 8
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_non_finite_loss_aborts_with_last_good(tmp_path):
    cfg = tiny_config()
    model = OmniModel(cfg, seed=0)
    model.talker.audio_scale.data[...] = 3e38
    model.talker.text_scale.data[...] = 3e38
    with pytest.raises(TrainingAborted) as err:
        train_run(_examples(cfg, 4), cfg, "all", TrainHyper(max_steps=2, batch_size=2), model=model, out_dir=tmp_path)
    assert err.value.checkpoint == tmp_path / "last_good.ckpt" and err.value.checkpoint.exists()
    assert OmniModel.load(err.value.checkpoint).module_hashes() == model.module_hashes()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_run([], tiny_config())


def test_rank_ablation_rows_and_rank_zero_collapse():
    cfg = tiny_config()
    examples = _examples(cfg, 8)
    rows = rank_ablation(examples, cfg, [0, 2], hyper=TrainHyper(lr=1e-2, batch_size=4, max_steps=2))
    assert [(r.rank_embed, r.rank_head) for r in rows] == [(0, 0), (2, 2)]
    assert rows[0].added_params == 0
    assert rows[1].added_params == 8 * 2 * 2 * (cfg.audio_vocab + cfg.talker_hidden)
    with pytest.raises(ValueError):
        rank_ablation(examples, cfg, [cfg.talker_hidden + 1])


def test_rank_ablation_freezes_thinker():
    cfg = tiny_config()
    examples = _examples(cfg, 4)
    model = OmniModel(cfg, seed=0)
    before = model.module_hashes()["thinker"]
    from tinyomni.training import talker_side
    train_run(examples, cfg, "all", TrainHyper(max_steps=2, batch_size=2), model=model, trainable=talker_side)
    after = model.module_hashes()
    assert after["thinker"] == before


def test_bridge_sweep_single_layer_only_index_zero():
    cfg = tiny_config(num_hidden_layers=1, bridge_layer_index=0)
    examples = _examples(cfg, 4)
    spec = OracleTaskSpec.for_config(cfg, seed=0)
    prompts = generate_oracle_dataset(spec, 2, seed=9, max_words=2)
    hyper = TrainHyper(max_steps=1, batch_size=2)
    rows = bridge_sweep(examples, cfg, [0], hyper, prompts, spec)
    assert [r.value for r in rows] == [0] and 0.0 <= rows[0].average_cer
    with pytest.raises(ValueError):
        bridge_sweep(examples, cfg, [1], hyper, prompts, spec)
