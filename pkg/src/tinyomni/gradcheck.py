"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad


class GradCheckError(RuntimeError):
    pass


def _value(f: Callable[[], Tensor]) -> float:
    out = f()
    return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    max_coords: int | None = 16,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` by closure. Up to
    ``max_coords`` coordinates per parameter are sampled (all when None).
    Relative error is ``|a - c| / max(|a|, |c|, 1e-12)``.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")
    for p in params:
        if p.data.dtype != np.float64:
            raise GradCheckError(f"finite-difference check needs float64 params, {p!r} is {p.dtype}")

    with no_grad():
        if _value(f) != _value(f):
            raise GradCheckError("f is not deterministic: two forward passes disagree")

    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f()
    if isinstance(loss, Tensor) and loss.requires_grad:
        backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + epsilon
                up = _value(f)
                flat[i] = orig - epsilon
                down = _value(f)
                flat[i] = orig
                central = (up - down) / (2.0 * epsilon)
                a = float(grad.reshape(-1)[i])
                err = abs(a - central) / max(abs(a), abs(central), 1e-12)
                worst = max(worst, err)
    return worst


MODULE_GROUPS = {
    "audio_projector": ("audio_proj.",),
    "vision_projector": ("vision_proj.",),
    "thinker_embedding": ("thinker.embed", "thinker.norm."),
    "thinker_blocks": ("thinker.blocks.",),
    "talker_blocks": ("talker.blocks.", "talker.norm."),
    "talker_shared": ("talker.embedding.shared", "talker.head.shared"),
    "embedding_adapters": ("talker.embedding.adapters.",),
    "head_adapters": ("talker.head.adapters.",),
    "fusion": ("talker.text_scale", "talker.audio_scale", "talker.embed_proj.", "talker.codec_proj."),
    "spk_proj": ("talker.spk_proj.",),
}


def module_gradient_suite(config=None, seed: int = 0, max_coords: int = 4, epsilon: float = 1e-6) -> dict[str, float]:
    """Max relative error per parameter group of the full joint loss at 64-bit precision.

    Uses one oracle example carrying audio and image spans, reference codes
    and a speaker slot, so every module sits on the gradient path.
    """
    from . import autograd as ag
    from .config import toy_config
    from .data import OracleTaskSpec, generate_oracle_dataset, record_to_example
    from .model import OmniModel
    from .sequence import collate
    from .training import joint_loss

    if config is None:
        config = toy_config(num_hidden_layers=2, hidden_size=16, num_query_heads=2, num_kv_heads=1,
                            mlp_intermediate=24, num_talker_hidden_layers=2, talker_hidden=16,
                            text_vocab=32, codebook_size=32, audio_vocab=36, adapter_rank_embed=4,
                            adapter_rank_head=4, audio_feature_dim=8, vision_feature_dim=8,
                            image_token_count=2, audio_bytes_per_feature=512)
    spec = OracleTaskSpec.for_config(config, seed=seed)
    record = generate_oracle_dataset(spec, 1, seed=seed, max_words=3, with_reference=True, with_speaker=True,
                                     audio_input=True, image_input=True)[0]
    batch = collate([record_to_example(record, config)])
    rng = np.random.default_rng(seed)
    with ag.precision(64):
        model = OmniModel(config, seed=seed)
        # break the symmetric init (unit gains, zero biases, unit scales) so every path is exercised
        for _, p in model.named_parameters():
            scale = 0.3 if p.init == "normal" else 0.2
            p.data[...] = (0.0 if p.init == "normal" else p.data) + rng.normal(0, scale, p.shape)

        def loss():
            out, logits = model.forward(batch)
            return joint_loss(batch, out.text_logits, logits, config.lambda_audio)[0]

        named = list(model.named_parameters())
        results = {}
        for group, prefixes in MODULE_GROUPS.items():
            params = [p for n, p in named if n.startswith(prefixes)]
            if params:
                results[group] = finite_difference_check(loss, params, epsilon, max_coords, seed)
    return results
