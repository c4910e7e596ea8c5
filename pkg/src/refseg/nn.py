"""Parameter containers and the layers shared by the discovery, fusion and decoder modules."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor, activation: str | None = None) -> Tensor:
        return ad.linear(x, self.weight, self.bias, activation)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class Projection(Module):
    """Layer norm followed by a bias-free linear map (the q/k/v maps)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.norm = LayerNorm(d_in)
        self.linear = Linear(d_in, d_out, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(self.norm(x))


class MLP(Module):
    """linear -> ReLU -> linear, optionally preceded by layer norm."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, norm: bool = False):
        self.norm = LayerNorm(d_in) if norm else None
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.norm is not None:
            x = self.norm(x)
        return self.fc2(ad.linear(x, self.fc1.weight, self.fc1.bias, activation="relu"))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, D) -> (..., heads, L, D // heads)."""
    *lead, length, dim = x.shape
    x = x.reshape(tuple(lead) + (length, heads, dim // heads))
    n = len(lead)
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(tuple(lead) + (length, heads * dh))


class SelfAttentionLayer(Module):
    """Pre-norm transformer layer: x + MHA(LN(x)), then x + MLP(LN(x)).

    Attention runs over axis -2; every leading axis is a batch axis.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng, bias=False)
        self.proj = Linear(dim, dim, rng)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng, norm=True)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        dim = x.shape[-1]
        qkv = self.qkv(self.norm1(x))
        q = split_heads(qkv[..., :dim], self.heads)
        k = split_heads(qkv[..., dim : 2 * dim], self.heads)
        v = split_heads(qkv[..., 2 * dim :], self.heads)
        scale = 1.0 / math.sqrt(dim // self.heads)
        weights = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale, axis=-1)
        return self.proj(merge_heads(ad.matmul(weights, v))), weights

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(x)[0]
        return x + self.mlp(x)
