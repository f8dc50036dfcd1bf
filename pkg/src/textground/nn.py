"""Layers shared across the encoder, fusion, and sampler: linear maps,
layer normalization, multi-head attention, and positional encodings.

Every layer registers its parameters in a flat name-to-parameter map so
training and checkpointing can address them uniformly.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .optim import Parameter

__all__ = [
    "ParameterRegistry",
    "Linear",
    "LayerNorm",
    "gelu",
    "AttentionLayer",
    "TransformerBlock",
    "sinusoidal_positional_encoding",
    "split_heads",
    "merge_heads",
]


class ParameterRegistry:
    """Flat registry of named parameters; the unit of training and saving."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def create(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name: {name}")
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def values(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def subset(self, prefix: str) -> list[Parameter]:
        return [p for name, p in self.params.items() if name.startswith(prefix)]


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    """Affine map on the last axis: y = x W + b."""

    def __init__(self, reg: ParameterRegistry, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.w = reg.create(name + ".w", linear_init(rng, fan_in, fan_out))
        self.b = reg.create(name + ".b", np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.fan_in:
            raise ShapeError(f"linear expects last dim {self.fan_in}, got {x.shape}")
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.fan_in)) if x.ndim != 2 else x
        out = ad.matmul_any(flat, self.w.tensor)
        if self.b is not None:
            out = ad.add(out, self.b.tensor)
        if x.ndim != 2:
            out = ad.reshape(out, lead + (self.fan_out,))
        return out


class LayerNorm:
    """Normalize the last axis to zero mean and unit variance, then scale/shift."""

    def __init__(self, reg: ParameterRegistry, name: str, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.g = reg.create(name + ".g", np.ones(dim))
        self.b = reg.create(name + ".b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
        inv = ad.power(ad.add(var, self.eps), -0.5)
        return ad.add(ad.mul(ad.mul(centered, inv), self.g.tensor), self.b.tensor)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    x = ad.as_tensor(x)
    c = math.sqrt(2.0 / math.pi)
    inner = ad.mul(ad.add(x, ad.mul(ad.mul(ad.mul(x, x), x), 0.044715)), c)
    return ad.mul(ad.mul(x, ad.add(ad.tanh(inner), 1.0)), 0.5)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[T, C] -> [H, T, C/H], or batched [B, T, C] -> [B, H, T, C/H]."""
    c = x.shape[-1]
    if c % num_heads:
        raise ConfigError(f"channel count {c} not divisible by {num_heads} heads")
    d = c // num_heads
    if x.ndim == 2:
        t = x.shape[0]
        return ad.transpose(ad.reshape(x, (t, num_heads, d)), (1, 0, 2))
    if x.ndim == 3:
        b, t = x.shape[0], x.shape[1]
        return ad.transpose(ad.reshape(x, (b, t, num_heads, d)), (0, 2, 1, 3))
    raise ShapeError(f"split_heads expects rank 2 or 3, got {x.shape}")


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of split_heads."""
    if x.ndim == 3:
        h, t, d = x.shape
        return ad.reshape(ad.transpose(x, (1, 0, 2)), (t, h * d))
    if x.ndim == 4:
        b, h, t, d = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * d))
    raise ShapeError(f"merge_heads expects rank 3 or 4, got {x.shape}")


class AttentionLayer:
    """Multi-head scaled dot-product attention over token sequences.

    Queries may come from a different sequence than keys/values (the
    fusion path uses that); self-attention passes the same tensor twice.
    """

    def __init__(self, reg: ParameterRegistry, name: str, dim: int, num_heads: int,
                 rng: np.random.Generator):
        if dim % num_heads:
            raise ConfigError(f"attention dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.wq = Linear(reg, name + ".q", dim, dim, rng)
        self.wk = Linear(reg, name + ".k", dim, dim, rng)
        self.wv = Linear(reg, name + ".v", dim, dim, rng)
        self.proj = Linear(reg, name + ".proj", dim, dim, rng)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        q = split_heads(self.wq(queries), self.num_heads)
        k = split_heads(self.wk(context), self.num_heads)
        v = split_heads(self.wv(context), self.num_heads)
        scale = 1.0 / math.sqrt(self.dim // self.num_heads)
        scores = ad.mul(ad.matmul_any(q, ad.swapaxes(k, -1, -2)), scale)
        attn = ad.softmax(scores, axis=-1)
        return self.proj(merge_heads(ad.matmul_any(attn, v)))


class TransformerBlock:
    """Pre-norm self-attention followed by a two-layer feed-forward, both residual."""

    def __init__(self, reg: ParameterRegistry, name: str, dim: int, num_heads: int,
                 rng: np.random.Generator, mlp_ratio: float = 4.0):
        self.norm1 = LayerNorm(reg, name + ".norm1", dim)
        self.attn = AttentionLayer(reg, name + ".attn", dim, num_heads, rng)
        self.norm2 = LayerNorm(reg, name + ".norm2", dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(reg, name + ".fc1", dim, hidden, rng)
        self.fc2 = Linear(reg, name + ".fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = ad.add(x, self.attn(h, h))
        return ad.add(x, self.fc2(gelu(self.fc1(self.norm2(x)))))


def sinusoidal_positional_encoding(length: int, dim: int) -> Tensor:
    """Interleaved sin/cos position codes over geometric frequencies.

    Row p holds sin(p·ω_i) in even slots and cos(p·ω_i) in odd slots with
    ω_i = 10000^(−2i/dim), so every row has norm √(dim/2).
    """
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs)
    return Tensor(table)
