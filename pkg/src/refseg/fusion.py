"""Top-down fusion of entity embeddings with a sentence feature."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .nn import MLP, Linear, Module, Projection


@dataclass
class CrossModalOutput:
    z: Tensor  # (..., D), unit norm
    a_fuse: Tensor  # (..., K), sums to one


class ModalityFusion(Module):
    """Single-head cross-attention layer whose query is the text feature.

    ``entities`` is ``(..., K, D)`` and ``text`` is ``(..., D)``; leading
    axes broadcast against each other, so passing entities of shape
    ``(B, 1, K, D)`` and texts of shape ``(B', D)`` scores every
    image against every text in one call.
    """

    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator, use_mlp: bool = True):
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.q_proj = Projection(dim, hidden_dim, rng)
        self.k_proj = Projection(dim, hidden_dim, rng)
        self.v_proj = Projection(dim, hidden_dim, rng)
        self.out = Linear(hidden_dim, dim, rng, bias=False)
        self.mlp = MLP(dim, hidden_dim, dim, rng, norm=True) if use_mlp else None

    def __call__(self, entities: Tensor, text: Tensor) -> CrossModalOutput:
        if entities.ndim < 2 or entities.shape[-2] == 0:
            raise DimensionError("fusion needs at least one entity")
        if entities.shape[-1] != self.dim or text.shape[-1] != self.dim:
            raise DimensionError(
                f"fusion expects feature dim {self.dim}, got {entities.shape} and {text.shape}"
            )
        k = self.k_proj(entities)  # (..., K, Dh)
        v = self.v_proj(entities)
        q = self.q_proj(text)  # (..., Dh)
        q_col = q.reshape(q.shape[:-1] + (self.hidden_dim, 1))
        logits = ad.matmul(k, q_col) * (1.0 / math.sqrt(self.hidden_dim))  # (..., K, 1)
        logits = logits.reshape(logits.shape[:-1])
        a_fuse = ad.softmax(logits, axis=-1)
        attended = ad.matmul(a_fuse.reshape(a_fuse.shape[:-1] + (1, a_fuse.shape[-1])), v)
        attended = attended.reshape(attended.shape[:-2] + (self.hidden_dim,))
        h = self.out(attended) + text
        if self.mlp is not None:
            h = h + self.mlp(h)
        return CrossModalOutput(ad.l2_normalize(h, axis=-1), a_fuse)

    fuse = __call__

    def fuse_all_pairs(self, entities: Tensor, texts: Tensor) -> CrossModalOutput:
        """Fuse every image ``i`` (entities ``(B, K, D)``) with every text ``j`` (``(B', D)``).

        Outputs are indexed ``[i, j]``.
        """
        b, kk, d = entities.shape
        return self(entities.reshape(b, 1, kk, d), texts)
