import numpy as np
import pytest

from tinyomni import autograd as ag
from tinyomni.config import toy_config


def tiny_config(**overrides):
    """Very small model for gradient and schedule tests."""
    base = dict(
        num_hidden_layers=2, hidden_size=8, num_query_heads=2, num_kv_heads=1, mlp_intermediate=12,
        num_talker_hidden_layers=1, talker_hidden=8, text_vocab=16, codebook_size=16, audio_vocab=20,
        codebook_count=8, adapter_rank_embed=2, adapter_rank_head=2, audio_feature_dim=6,
        vision_feature_dim=5, image_token_count=2, audio_bytes_per_feature=16,
    )
    base.update(overrides)
    return toy_config(**base)


def randomize(model, seed, std=0.5):
    """Large random weights (including gains, biases and scales) for gradient checks."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        if p.init == "normal":
            p.data[...] = rng.normal(0, std, p.shape)
        else:
            p.data[...] += rng.normal(0, 0.3, p.shape)


@pytest.fixture
def f64():
    with ag.precision(64):
        yield


@pytest.fixture(autouse=True)
def clean_tape():
    ag.current_tape().clear()
    yield
    ag.current_tape().clear()


ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0].rstrip("ab")), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
