"""Parameter containers and the shared transformer block."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    __slots__ = ("init",)

    def __init__(self, shape: tuple[int, ...], init: str = "normal"):
        super().__init__(np.zeros(shape, dtype=ag.get_default_dtype()), requires_grad=True)
        self.init = init


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def init_parameters(self, seed: int, std: float = 0.02, prefix: str = "") -> None:
        """Seed each parameter from (seed, crc32(name)) so inits are shape-local."""
        for name, p in self.named_parameters(prefix):
            if p.init == "ones":
                p.data[...] = 1.0
            elif p.init == "zeros":
                p.data[...] = 0.0
            else:
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                p.data[...] = rng.normal(0.0, std, size=p.shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = False):
        self.weight = Parameter((n_in, n_out))
        if bias:
            self.bias = Parameter((n_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if "bias" in vars(self):
            y = y + self.bias
        return y


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter((dim,), init="ones")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.rmsnorm(x, self.weight, self.eps)


class CacheError(RuntimeError):
    pass


@dataclass
class KVCache:
    """Per-layer rotated keys/values for incremental decoding (inference only)."""

    keys: list[np.ndarray | None] = field(default_factory=list)
    values: list[np.ndarray | None] = field(default_factory=list)
    length: int = 0

    @classmethod
    def empty(cls, num_layers: int) -> "KVCache":
        return cls([None] * num_layers, [None] * num_layers, 0)

    def check(self, num_layers: int, start: int | None) -> None:
        if len(self.keys) != num_layers:
            raise CacheError(f"cache has {len(self.keys)} layers, model has {num_layers}")
        if start is not None and start != self.length:
            raise CacheError(f"cache holds {self.length} positions but input starts at {start}")


class Attention(Module):
    def __init__(self, hidden: int, n_heads: int, n_kv: int):
        self.n_heads, self.n_kv = n_heads, n_kv
        self.head_dim = hidden // n_heads
        self.wq = Linear(hidden, n_heads * self.head_dim)
        self.wk = Linear(hidden, n_kv * self.head_dim)
        self.wv = Linear(hidden, n_kv * self.head_dim)
        self.wo = Linear(n_heads * self.head_dim, hidden)

    def _heads(self, x: Tensor, n: int) -> Tensor:
        b, t, _ = x.shape
        return ag.transpose(ag.reshape(x, (b, t, n, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, cos, sin, cache: KVCache | None = None, layer: int = 0) -> Tensor:
        b, t, _ = x.shape
        q = ag.rope(self._heads(self.wq(x), self.n_heads), cos, sin)
        k = ag.rope(self._heads(self.wk(x), self.n_kv), cos, sin)
        v = self._heads(self.wv(x), self.n_kv)
        offset = 0
        if cache is not None:
            offset = cache.length
            if cache.keys[layer] is not None:
                k = Tensor(np.concatenate([cache.keys[layer], k.data], axis=2), dtype=k.dtype)
                v = Tensor(np.concatenate([cache.values[layer], v.data], axis=2), dtype=v.dtype)
            cache.keys[layer], cache.values[layer] = k.data, v.data
        out = ag.causal_attention(q, k, v, offset)
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, t, self.n_heads * self.head_dim))
        return self.wo(out)


class SwiGLU(Module):
    def __init__(self, hidden: int, inter: int):
        self.gate = Linear(hidden, inter)
        self.up = Linear(hidden, inter)
        self.down = Linear(inter, hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ag.silu(self.gate(x)) * self.up(x))


class Block(Module):
    """Pre-norm decoder block: x + attn(norm(x)), then h + mlp(norm(h))."""

    def __init__(self, hidden: int, n_heads: int, n_kv: int, inter: int, eps: float):
        self.attn_norm = RMSNorm(hidden, eps)
        self.attn = Attention(hidden, n_heads, n_kv)
        self.mlp_norm = RMSNorm(hidden, eps)
        self.mlp = SwiGLU(hidden, inter)

    def __call__(self, x: Tensor, cos, sin, cache: KVCache | None = None, layer: int = 0) -> Tensor:
        h = x + self.attn(self.attn_norm(x), cos, sin, cache, layer)
        return h + self.mlp(self.mlp_norm(h))


def block_parameter_count(hidden: int, n_heads: int, n_kv: int, inter: int) -> int:
    head_dim = hidden // n_heads
    attn = hidden * n_heads * head_dim * 2 + hidden * n_kv * head_dim * 2
    return attn + 3 * hidden * inter + 2 * hidden


def run_blocks(blocks: list[Block], x: Tensor, cache: KVCache | None, start: int | None,
               rope_theta: float, taps: dict[int, Tensor] | None = None) -> Tensor:
    """Apply ``blocks`` to ``x`` (B, T, H) at absolute positions start..start+T-1."""
    if cache is not None:
        cache.check(len(blocks), start)
        start = cache.length
    start = start or 0
    t = x.shape[1]
    head_dim = blocks[0].attn.head_dim if blocks else 2
    cos, sin = ag.rope_tables(np.arange(start, start + t), head_dim, rope_theta, x.dtype)
    for i, block in enumerate(blocks):
        x = block(x, cos, sin, cache, i)
        if taps is not None:
            taps[i] = x
    if cache is not None:
        cache.length += t
    return x
