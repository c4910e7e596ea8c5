"""Mask prediction from the patch-to-slot and slot-relevance attention maps.

All arithmetic here is float64 elementwise numpy, kept in a fixed
evaluation order so that a per-pixel scalar reimplementation reproduces
the masks bit for bit.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError


class InferenceScheme(str, enum.Enum):
    COMPOSE = "compose"  # A_slot . A_fuse
    AVG = "avg"  # A_fuse replaced by the uniform distribution
    MAX = "max"  # single A_slot column with the largest relevance
    MIN = "min"  # single A_slot column with the smallest relevance


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray  # (H, W) bool

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise DimensionError(f"mask must be a non-empty 2-d array, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits.astype(bool, copy=False))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


def relevance_vector(a_slot: np.ndarray, a_fuse: np.ndarray, scheme: InferenceScheme | str) -> np.ndarray:
    """Per-patch relevance ``(N,)`` under one of the four inference schemes."""
    scheme = InferenceScheme(scheme)
    a_slot = np.asarray(a_slot, dtype=np.float64)
    a_fuse = np.asarray(a_fuse, dtype=np.float64)
    if a_slot.ndim != 2 or a_fuse.shape != (a_slot.shape[1],):
        raise DimensionError(f"a_slot must be (N, K) and a_fuse (K,), got {a_slot.shape}, {a_fuse.shape}")
    k = a_slot.shape[1]
    if scheme is InferenceScheme.MAX:
        return a_slot[:, int(np.argmax(a_fuse))].copy()
    if scheme is InferenceScheme.MIN:
        return a_slot[:, int(np.argmin(a_fuse))].copy()
    weights = np.full(k, 1.0 / k) if scheme is InferenceScheme.AVG else a_fuse
    # sequential accumulation over slots keeps the summation order fixed
    v = np.zeros(a_slot.shape[0])
    for j in range(k):
        v += a_slot[:, j] * weights[j]
    return v


def upsample_map(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping (float64)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target extent must be positive, got {out_h}x{out_w}")
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    if (h, w) == (out_h, out_w):
        return m.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
        src = np.minimum(np.maximum(src, 0.0), n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    wy = wy[:, None]
    wx = wx[None, :]
    top = (1.0 - wx) * m[y0][:, x0] + wx * m[y0][:, x1]
    bot = (1.0 - wx) * m[y1][:, x0] + wx * m[y1][:, x1]
    return (1.0 - wy) * top + wy * bot


def normalize_min_max(m: np.ndarray) -> np.ndarray | None:
    """Rescale to [0, 1]; ``None`` when the map is constant."""
    lo, hi = m.min(), m.max()
    if hi == lo:
        return None
    return (m - lo) / (hi - lo)


def predict_mask(
    a_slot: np.ndarray,
    a_fuse: np.ndarray,
    grid_h: int,
    grid_w: int,
    out_h: int,
    out_w: int,
    tau: float = 0.5,
    scheme: InferenceScheme | str = InferenceScheme.COMPOSE,
) -> Mask:
    """relevance -> grid -> bilinear upsample -> min-max -> threshold (``>= tau``)."""
    a_slot = np.asarray(a_slot)
    if a_slot.ndim != 2 or a_slot.shape[0] != grid_h * grid_w:
        raise DimensionError(f"a_slot has {a_slot.shape[0] if a_slot.ndim else 0} rows, grid is {grid_h}x{grid_w}")
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    v = relevance_vector(a_slot, a_fuse, scheme)
    up = upsample_map(v.reshape(grid_h, grid_w), out_h, out_w)
    norm = normalize_min_max(up)
    if norm is None:
        return Mask(np.zeros((out_h, out_w), dtype=bool))
    return Mask(norm >= tau)
