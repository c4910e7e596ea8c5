"""IoU bookkeeping (cIoU, mIoU, A@t), metrics JSON and PGM mask files."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, StateError
from .inference import Mask

THRESHOLDS = (0.3, 0.5, 0.7)


def _counts(pred: Mask, gt: Mask) -> tuple[int, int]:
    if pred.bits.shape != gt.bits.shape:
        raise DimensionError(f"mask sizes differ: {pred.bits.shape} vs {gt.bits.shape}")
    inter = int(np.count_nonzero(pred.bits & gt.bits))
    union = int(np.count_nonzero(pred.bits | gt.bits))
    return inter, union


def iou(pred: Mask, gt: Mask) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    inter, union = _counts(pred, gt)
    return 1.0 if union == 0 else inter / union


@dataclass
class EvalRecord:
    intersection: int = 0
    union: int = 0
    ious: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.ious)

    def accumulate(self, pred: Mask, gt: Mask) -> EvalRecord:
        inter, union = _counts(pred, gt)
        self.intersection += inter
        self.union += union
        self.ious.append(1.0 if union == 0 else inter / union)
        return self

    def merge(self, other: EvalRecord) -> EvalRecord:
        return EvalRecord(self.intersection + other.intersection, self.union + other.union, self.ious + other.ious)

    def finalize(self, thresholds=THRESHOLDS) -> dict:
        if self.count == 0:
            raise StateError("cannot finalize an empty evaluation record")
        ious = np.asarray(self.ious)
        ciou = 1.0 if self.union == 0 else self.intersection / self.union
        return {
            "ciou": ciou,
            "miou": float(ious.mean()),
            "acc": {t: float(np.mean(ious >= t)) for t in thresholds},
        }


def accumulate(rec: EvalRecord, pred: Mask, gt: Mask) -> EvalRecord:
    return rec.accumulate(pred, gt)


def finalize(rec: EvalRecord) -> dict:
    return rec.finalize()


def metrics_json(metrics: dict) -> str:
    """Flat JSON object with four decimals per value."""
    items = [("ciou", metrics["ciou"]), ("miou", metrics["miou"])]
    items += [(f"acc@{t}", v) for t, v in sorted(metrics["acc"].items())]
    body = ", ".join(f'"{k}": {v:.4f}' for k, v in items)
    return "{" + body + "}"


def parse_metrics_json(text: str) -> dict:
    raw = json.loads(text)
    acc = {float(k.split("@", 1)[1]): v for k, v in raw.items() if k.startswith("acc@")}
    return {"ciou": raw["ciou"], "miou": raw["miou"], "acc": acc}


# ---------------------------------------------------------------------------
# Binary PGM (P5) masks
# ---------------------------------------------------------------------------


def write_pgm(path: str | Path, mask: Mask) -> None:
    pixels = np.where(mask.bits, 255, 0).astype(np.uint8)
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*([^\s#]+)")


def read_pgm(path: str | Path) -> Mask:
    """Read a binary PGM; pixels above 127 are foreground."""
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        match = _TOKEN.match(data, pos)
        if match is None:
            raise FormatError(f"{path}: truncated PGM header at byte {pos}")
        fields.append(match.group(1))
        pos = match.end()
    if fields[0] != b"P5":
        raise FormatError(f"{path}: expected P5 magic at byte 0, found {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes at offset {pos}, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return Mask(pixels > 127)
