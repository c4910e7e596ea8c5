"""Training objectives: contrastive cycle-consistency and feature reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .nn import Linear, Module, param


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    """Standard transformer position table, ``(n, dim)``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * i / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return table


def sinusoidal_table_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Half the channels encode the row, half the column."""
    rows = sinusoidal_table(grid_h, dim // 2)
    cols = sinusoidal_table(grid_w, dim // 2)
    table = np.concatenate(
        [np.repeat(rows, grid_w, axis=0), np.tile(cols, (grid_h, 1))], axis=1
    )
    return table


class SpatialBroadcastDecoder(Module):
    """Per-slot MLP decoder over all positions with a softmax-over-slots mixing channel.

    Widths are ``D -> H -> H -> H -> D + 1``.  The first layer acts on
    ``slot + position``; because it is affine it is evaluated as
    ``W slot + W position + b`` without materialising the sum.
    """

    def __init__(
        self,
        dim: int,
        num_positions: int,
        hidden: int,
        rng: np.random.Generator,
        pos_encoding: str = "1d",
        grid: tuple[int, int] | None = None,
    ):
        self.dim = dim
        self.num_positions = num_positions
        if pos_encoding == "1d":
            table = sinusoidal_table(num_positions, dim)
        elif pos_encoding == "2d":
            if grid is None or grid[0] * grid[1] != num_positions:
                raise ConfigError("2d positional encoding needs a grid matching num_positions")
            table = sinusoidal_table_2d(grid[0], grid[1], dim)
        else:
            raise ConfigError(f"unknown positional encoding {pos_encoding!r}")
        self.positions = table
        self.layers = [
            Linear(dim, hidden, rng),
            Linear(hidden, hidden, rng),
            Linear(hidden, hidden, rng),
            Linear(hidden, dim + 1, rng),
        ]

    def __call__(self, slots: Tensor, n: int | None = None) -> tuple[Tensor, Tensor]:
        """Decode ``(..., K, D)`` slots into ``(..., N, D)`` features.

        Returns the reconstruction and the mixing weights ``(..., K, N)``.
        """
        n = self.num_positions if n is None else n
        if n != self.num_positions:
            raise DimensionError(f"decoder built for {self.num_positions} positions, asked for {n}")
        if slots.shape[-1] != self.dim:
            raise DimensionError(f"decoder expects slot dim {self.dim}, got {slots.shape}")
        first = self.layers[0]
        pos = ad.matmul(Tensor(self.positions), first.weight)  # (N, H)
        pre = ad.linear(slots, first.weight, first.bias)  # (..., K, H)
        hidden = [(layer.weight, layer.bias) for layer in self.layers[1:-1]]
        head = self.layers[-1]
        return ad.broadcast_mixture_mlp(pre, pos, hidden, (head.weight, head.bias))

    decode = __call__


def c3_from_embeddings(z: Tensor, texts: Tensor, temperature: float = 1.0) -> Tensor:
    """Contrastive cycle-consistency loss from the pairwise embeddings.

    ``z[i, j]`` fuses image ``i`` with text ``j``.  For each text the
    softmax runs over images and the matching image is the target.  The
    text features enter only through a stop-gradient.
    """
    b = z.shape[0]
    if z.shape[:2] != (b, b) or texts.shape[0] != b:
        raise DimensionError(f"expected z of shape (B, B, D) matching B texts, got {z.shape}")
    target = ad.stop_gradient(texts)
    logits = ad.sum_(z * target, axis=-1)  # (B images, B texts)
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    log_p = ad.log_softmax(logits, axis=0)
    per_text = -ad.sum_(log_p * Tensor(np.eye(b)), axis=0)  # (B,)
    # mean taken around the first entry, so a batch of equal terms averages to
    # exactly that term (a collapsed model scores exactly log B)
    anchor = per_text[0]
    return anchor + ad.sum_(per_text - anchor) * (1.0 / b)


def recon_from_decoded(visual: Tensor, recon: Tensor) -> Tensor:
    """Batch mean of the per-item summed squared error against the stop-gradient target."""
    if visual.shape != recon.shape:
        raise DimensionError(f"reconstruction shape {recon.shape} != target {visual.shape}")
    residual = ad.stop_gradient(visual) - recon
    b = visual.shape[0] if visual.ndim == 3 else 1
    return ad.sum_(ad.square(residual)) * (1.0 / b)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class BatchPairs:
    """``visual[i]`` (N x D) is paired with ``textual[i]`` (D).

    Fields are arrays or tensors; tensors are used as given, which lets
    callers inspect gradients with respect to the inputs.
    """

    visual: np.ndarray | Tensor
    textual: np.ndarray | Tensor

    def __post_init__(self):
        if not isinstance(self.visual, Tensor):
            self.visual = np.asarray(self.visual)
        if not isinstance(self.textual, Tensor):
            self.textual = np.asarray(self.textual)
        if self.visual.ndim != 3 or self.textual.ndim != 2:
            raise DimensionError("visual must be (B, N, D) and textual (B, D)")
        if self.visual.shape[0] < 1 or self.visual.shape[0] != self.textual.shape[0]:
            raise DimensionError("batch sizes of visual and textual features must agree and be >= 1")
        if self.visual.shape[2] != self.textual.shape[1]:
            raise DimensionError("visual and textual feature dims differ")

    @property
    def size(self) -> int:
        return self.visual.shape[0]

    def tensors(self) -> tuple[Tensor, Tensor]:
        return _as_tensor(self.visual), _as_tensor(self.textual)


@dataclass
class LossTerms:
    c3: Tensor
    recon: Tensor
    total: Tensor


def loss_terms(batch: BatchPairs, model, rng_seed: int, lambda_recon: float = 1.0) -> LossTerms:
    """Both objectives from a single discovery pass per image."""
    if lambda_recon < 0:
        raise ConfigError("lambda_recon must be >= 0")
    visual, textual = batch.tensors()
    # text features are frozen inputs: no gradient reaches them through any path
    textual = ad.stop_gradient(textual)
    entities, _ = model.discovery(visual, rng_seed)
    fused = model.fusion.fuse_all_pairs(entities, textual)
    c3 = c3_from_embeddings(fused.z, textual, model.c3_temperature)
    if lambda_recon == 0:
        recon = Tensor(0.0)
        total = c3
    else:
        decoded, _ = model.decoder(entities)
        recon = recon_from_decoded(visual, decoded)
        total = c3 + recon * lambda_recon
    return LossTerms(c3, recon, total)


def c3_loss(batch: BatchPairs, model, rng_seed: int) -> Tensor:
    visual, textual = batch.tensors()
    textual = ad.stop_gradient(textual)
    entities, _ = model.discovery(visual, rng_seed)
    fused = model.fusion.fuse_all_pairs(entities, textual)
    return c3_from_embeddings(fused.z, textual, model.c3_temperature)


def recon_loss(batch: BatchPairs, model, rng_seed: int) -> Tensor:
    visual, _ = batch.tensors()
    entities, _ = model.discovery(visual, rng_seed)
    decoded, _ = model.decoder(entities)
    return recon_from_decoded(visual, decoded)


def total_loss(batch: BatchPairs, model, lambda_recon: float, rng_seed: int) -> Tensor:
    return loss_terms(batch, model, rng_seed, lambda_recon).total
