"""Precomputed feature files and on-disk datasets.

A feature file is::

    b"SGFT" | version u16 | role u8 | ndims u32 | dims u32 * ndims | payload

with every integer little-endian and a row-major little-endian float32
payload.  Role 0 marks visual features, role 1 textual features.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .metrics import read_pgm, write_pgm
from .inference import Mask

MAGIC = b"SGFT"
VERSION = 1
ROLE_VISUAL = 0
ROLE_TEXTUAL = 1
ROLES = {"visual": ROLE_VISUAL, "textual": ROLE_TEXTUAL}
MAX_DIMS = 8
MAX_ELEMENTS = 1 << 34

_HEAD = struct.Struct("<4sHBI")


def _role_code(role) -> int:
    code = ROLES.get(role, role) if isinstance(role, str) else role
    if code not in (ROLE_VISUAL, ROLE_TEXTUAL):
        raise DomainError(f"role must be 'visual', 'textual', 0 or 1, got {role!r}")
    return int(code)


def encode_feature_file(array: np.ndarray, role) -> bytes:
    array = np.asarray(array)
    if array.ndim < 1 or array.ndim > MAX_DIMS or array.size == 0:
        raise DimensionError(f"feature arrays need 1..{MAX_DIMS} non-empty axes, got shape {array.shape}")
    header = _HEAD.pack(MAGIC, VERSION, _role_code(role), array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + np.ascontiguousarray(array, dtype="<f4").tobytes()


def write_feature_file(path: str | Path, array: np.ndarray, role) -> None:
    Path(path).write_bytes(encode_feature_file(array, role))


def decode_feature_file(data: bytes, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse a feature file; returns ``(array, role)``."""
    if len(data) < _HEAD.size:
        raise FormatError(f"{source}: header needs {_HEAD.size} bytes, file has {len(data)}")
    magic, version, role, ndims = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte 4")
    if role not in (ROLE_VISUAL, ROLE_TEXTUAL):
        raise FormatError(f"{source}: unknown role {role} at byte 6")
    if not 1 <= ndims <= MAX_DIMS:
        raise FormatError(f"{source}: dimension count {ndims} at byte 7 outside 1..{MAX_DIMS}")
    offset = _HEAD.size
    need = offset + 4 * ndims
    if len(data) < need:
        raise FormatError(f"{source}: dims need {need} bytes, file has {len(data)}")
    dims = struct.unpack_from(f"<{ndims}I", data, offset)
    offset = need
    count = 1
    for i, extent in enumerate(dims):
        if extent == 0:
            raise FormatError(f"{source}: zero extent in dim {i} at byte {_HEAD.size + 4 * i}")
        count *= extent
        if count > MAX_ELEMENTS:
            raise FormatError(f"{source}: dims overflow the {MAX_ELEMENTS}-element limit at byte {_HEAD.size + 4 * i}")
    expected = count * 4
    actual = len(data) - offset
    if actual != expected:
        raise FormatError(
            f"{source}: payload at byte {offset} should be {expected} bytes, found {actual}"
        )
    array = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims)
    return array.astype(np.float32), role


def read_feature_file(path: str | Path, role=None) -> np.ndarray:
    array, found = decode_feature_file(Path(path).read_bytes(), str(path))
    if role is not None and found != _role_code(role):
        raise FormatError(f"{path}: role byte {found} at byte 6, expected {_role_code(role)}")
    return array


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

META = "meta.json"


@dataclass
class FeatureDataset:
    """Paired features plus ground-truth masks loaded from a directory.

    Layout: ``visual.sgft`` (M, N, D), ``textual.sgft`` (M, D), ``meta.json``
    with the patch grid, and ``masks/gt_XXXXX.pgm``.  A mask stored at grid
    resolution is expanded to pixels by repeating each patch.
    """

    visual: np.ndarray
    textual: np.ndarray
    masks: list[np.ndarray]
    grid_h: int
    grid_w: int
    patch_px: int

    def __post_init__(self):
        m = self.visual.shape[0]
        if self.visual.ndim != 3 or self.textual.shape != (m, self.visual.shape[2]) or len(self.masks) != m:
            raise DimensionError("visual (M, N, D), textual (M, D) and M masks are required")

    def __len__(self) -> int:
        return self.visual.shape[0]

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.grid_h, self.grid_w, self.patch_px

    def gt_mask(self, index: int) -> np.ndarray:
        mask = self.masks[index]
        if mask.shape == (self.grid_h, self.grid_w) and self.patch_px > 1:
            px = self.patch_px
            return np.repeat(np.repeat(mask, px, axis=0), px, axis=1)
        return mask

    def subset(self, indices) -> FeatureDataset:
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureDataset(
            self.visual[indices], self.textual[indices], [self.masks[i] for i in indices],
            self.grid_h, self.grid_w, self.patch_px,
        )

    def split(self, train_fraction: float, seed: int) -> tuple[FeatureDataset, FeatureDataset]:
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


def save_dataset(directory: str | Path, data, extra_meta: dict | None = None) -> Path:
    """Write any dataset with ``visual``, ``textual``, ``grid`` and ``gt_patch_masks``/``gt_mask``."""
    out = Path(directory)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    write_feature_file(out / "visual.sgft", data.visual, ROLE_VISUAL)
    write_feature_file(out / "textual.sgft", data.textual, ROLE_TEXTUAL)
    grid_h, grid_w, patch_px = data.grid
    patch_masks = getattr(data, "gt_patch_masks", None)
    for i in range(len(data)):
        bits = patch_masks[i] if patch_masks is not None else data.gt_mask(i)
        write_pgm(out / "masks" / f"gt_{i:05d}.pgm", Mask(bits))
    meta = {"grid_h": grid_h, "grid_w": grid_w, "patch_px": patch_px, "items": len(data), **(extra_meta or {})}
    (out / META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(directory: str | Path) -> FeatureDataset:
    src = Path(directory)
    try:
        meta = json.loads((src / META).read_text())
    except FileNotFoundError:
        raise FormatError(f"{src}: no {META}; not a dataset directory") from None
    visual = read_feature_file(src / "visual.sgft", ROLE_VISUAL)
    textual = read_feature_file(src / "textual.sgft", ROLE_TEXTUAL)
    masks = [read_pgm(src / "masks" / f"gt_{i:05d}.pgm").bits for i in range(visual.shape[0])]
    return FeatureDataset(visual, textual, masks, int(meta["grid_h"]), int(meta["grid_w"]), int(meta["patch_px"]))
