"""Synthetic scenes with planted rectangular entities and oracle masks.

Each scene is a ``grid_h x grid_w`` patch grid.  Instances are
non-overlapping rectangles; every patch inside instance ``i`` carries
``prototype[group_i] + offset_i + noise`` and every other patch carries
the background prototype plus noise.  The query feature is the mean of
the referred instances' ``prototype + offset`` vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SyntheticSpec
from .errors import GenerationError

MAX_PLACEMENT_TRIES = 200
MAX_SCENE_TRIES = 20


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    prototypes: np.ndarray  # (G + 1, D); last row is the background
    visual: np.ndarray  # (M, N, D) float32
    textual: np.ndarray  # (M, D) float32
    labels: np.ndarray  # (M, h, w) int16; 0 background, i + 1 for instance i
    instance_groups: list[np.ndarray] = field(default_factory=list)
    referred: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return self.visual.shape[0]

    @property
    def grid(self) -> tuple[int, int, int]:
        """(grid_h, grid_w, patch_px)."""
        return self.spec.grid_h, self.spec.grid_w, self.spec.patch_px

    @property
    def gt_patch_masks(self) -> np.ndarray:
        """(M, h, w) bool: union of the referred instances."""
        out = np.zeros(self.labels.shape, dtype=bool)
        for m, refs in enumerate(self.referred):
            out[m] = np.isin(self.labels[m], refs + 1)
        return out

    def gt_mask(self, index: int) -> np.ndarray:
        """Ground-truth mask at image resolution (patches expanded to pixels)."""
        px = self.spec.patch_px
        patch = np.isin(self.labels[index], self.referred[index] + 1)
        return np.repeat(np.repeat(patch, px, axis=0), px, axis=1)

    def instance_masks(self, index: int) -> np.ndarray:
        """(num_instances, h, w) bool patch masks of every planted instance."""
        n = len(self.instance_groups[index])
        return self.labels[index][None] == (np.arange(1, n + 1)[:, None, None])

    def subset(self, indices) -> SyntheticDataset:
        indices = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(
            spec=self.spec,
            prototypes=self.prototypes,
            visual=self.visual[indices],
            textual=self.textual[indices],
            labels=self.labels[indices],
            instance_groups=[self.instance_groups[i] for i in indices],
            referred=[self.referred[i] for i in indices],
        )

    def split(self, train_fraction: float, seed: int) -> tuple[SyntheticDataset, SyntheticDataset]:
        """Deterministic seeded shuffle into (train, held-out)."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))

    def tobytes(self) -> bytes:
        parts = [self.prototypes.tobytes(), self.visual.tobytes(), self.textual.tobytes(), self.labels.tobytes()]
        parts += [g.tobytes() for g in self.instance_groups]
        parts += [r.tobytes() for r in self.referred]
        return b"".join(parts)


def orthonormal_prototypes(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, count)))
    return q.T.copy()


def _place(rng: np.random.Generator, spec: SyntheticSpec, count: int) -> list[tuple[int, int, int, int]] | None:
    occupied = np.zeros((spec.grid_h, spec.grid_w), dtype=bool)
    boxes = []
    for _ in range(count):
        for _ in range(MAX_PLACEMENT_TRIES):
            h = int(rng.integers(spec.min_side, min(spec.max_side, spec.grid_h) + 1))
            w = int(rng.integers(spec.min_side, min(spec.max_side, spec.grid_w) + 1))
            if h > spec.grid_h or w > spec.grid_w:
                continue
            top = int(rng.integers(0, spec.grid_h - h + 1))
            left = int(rng.integers(0, spec.grid_w - w + 1))
            if not occupied[top : top + h, left : left + w].any():
                occupied[top : top + h, left : left + w] = True
                boxes.append((top, left, h, w))
                break
        else:
            return None
    return boxes


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, g = spec.feature_dim, spec.num_groups
    protos = orthonormal_prototypes(g + 1, d, rng)
    background = protos[g]
    m, n = spec.num_items, spec.num_patches
    visual = np.empty((m, n, d), dtype=np.float32)
    textual = np.empty((m, d), dtype=np.float32)
    labels = np.zeros((m, spec.grid_h, spec.grid_w), dtype=np.int16)
    groups_all, referred_all = [], []
    for item in range(m):
        for _ in range(MAX_SCENE_TRIES):
            count = int(rng.integers(spec.referent_arity, spec.max_instances + 1))
            boxes = _place(rng, spec, count)
            if boxes is not None:
                break
        else:
            raise GenerationError(
                f"could not place instances for item {item} after {MAX_SCENE_TRIES} scene attempts"
            )
        groups = rng.integers(0, g, size=count)
        offsets = rng.normal(0.0, spec.offset_std, size=(count, d))
        vectors = protos[groups] + offsets
        feat = np.broadcast_to(background, (spec.grid_h, spec.grid_w, d)).copy()
        for i, (top, left, h, w) in enumerate(boxes):
            feat[top : top + h, left : left + w] = vectors[i]
            labels[item, top : top + h, left : left + w] = i + 1
        if spec.noise_std > 0:
            feat = feat + rng.normal(0.0, spec.noise_std, size=feat.shape)
        refs = np.sort(rng.choice(count, size=spec.referent_arity, replace=False))
        visual[item] = feat.reshape(n, d)
        textual[item] = vectors[refs].mean(axis=0)
        groups_all.append(groups.astype(np.int64))
        referred_all.append(refs.astype(np.int64))
    return SyntheticDataset(spec, protos, visual, textual, labels, groups_all, referred_all)
