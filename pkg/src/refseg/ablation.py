"""Ablation sweeps that emit one CSV row per grid point."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SLOT_KINDS, SCHEMES, RunConfig
from .errors import ConfigError, FormatError
from .training import attention_maps, score_maps, train

log = logging.getLogger(__name__)

AXES = ("slot_kind", "kgks", "t_iters", "tau", "scheme", "loss")
T_GRID = (1, 2, 4, 6, 8)
TAU_GRID = (0.3, 0.4, 0.5, 0.6, 0.7)
KS_GRID = (1, 2, 3, 4, 6)
METRIC_COLUMNS = ("ciou", "miou", "acc@0.3", "acc@0.5", "acc@0.7")
COLUMNS = ("axis", "value", "seeds") + METRIC_COLUMNS


def kgks_grid(num_slots: int) -> list[tuple[int, int]]:
    """(K_g, K_s) factorisations of ``num_slots`` with K_s from ``KS_GRID`` and K_s <= K_g.

    For 36 slots this is (36,1), (18,2), (12,3), (9,4), (6,6).
    """
    return [(num_slots // ks, ks) for ks in KS_GRID if num_slots % ks == 0 and ks <= num_slots // ks]


@dataclass(frozen=True)
class GridPoint:
    label: str
    changes: dict  # RunConfig overrides for training
    tau: float | None = None
    scheme: str | None = None


def grid_points(axis: str, config: RunConfig) -> list[GridPoint]:
    if axis == "slot_kind":
        return [GridPoint(kind, {"slot_kind": kind}) for kind in SLOT_KINDS]
    if axis == "kgks":
        return [GridPoint(f"{kg}x{ks}", {"k_g": kg, "k_s": ks}) for kg, ks in kgks_grid(config.num_slots)]
    if axis == "t_iters":
        return [GridPoint(str(t), {"t_iters": t}) for t in T_GRID]
    if axis == "tau":
        return [GridPoint(f"{tau:g}", {}, tau=tau) for tau in TAU_GRID]
    if axis == "scheme":
        return [GridPoint(s, {}, scheme=s) for s in SCHEMES]
    if axis == "loss":
        return [
            GridPoint("full", {}),
            GridPoint("w/o reconstruction loss", {"lambda_recon": 0.0}),
        ]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def _flat(metrics: dict) -> dict:
    row = {"ciou": metrics["ciou"], "miou": metrics["miou"]}
    row.update({f"acc@{t}": v for t, v in sorted(metrics["acc"].items())})
    return row


def ablate(axis: str, config: RunConfig, train_data, eval_data, seeds=None) -> list[dict]:
    """Train and evaluate every grid point of ``axis``; metrics are seed means.

    Points that differ only in inference settings (tau, scheme) share one
    training run per seed.
    """
    points = grid_points(axis, config)
    seeds = [config.seed] if seeds is None else list(seeds)
    if not seeds:
        raise ConfigError("at least one seed is required")
    trained: dict[tuple, tuple] = {}
    per_point: dict[str, list[dict]] = {p.label: [] for p in points}
    for seed in seeds:
        for point in points:
            run_config = config.replace(seed=seed, **point.changes)
            key = (seed, tuple(sorted(point.changes.items())))
            if key not in trained:
                log.info("ablation %s=%s seed %d: training", axis, point.label, seed)
                result = train(run_config, train_data)
                trained.clear()  # inference-only points reuse at most the latest run
                trained[key] = (result.model, attention_maps(result.model, eval_data, run_config.eval_seed))
            _, (a_slot, a_fuse) = trained[key]
            metrics, _ = score_maps(a_slot, a_fuse, eval_data, run_config, point.tau, point.scheme)
            per_point[point.label].append(_flat(metrics))
    rows = []
    for point in points:
        runs = per_point[point.label]
        row = {"axis": axis, "value": point.label, "seeds": " ".join(str(s) for s in seeds)}
        row.update({c: float(np.mean([r[c] for r in runs])) for c in METRIC_COLUMNS})
        rows.append(row)
    return rows


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.4f}" if k in METRIC_COLUMNS else row[k]) for k in COLUMNS})
    return buf.getvalue()


def write_csv(path: str | Path, rows: list[dict]) -> None:
    Path(path).write_text(format_csv(rows))


def parse_csv(text: str) -> list[dict]:
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        if list(raw) != list(COLUMNS):
            raise FormatError(f"unexpected ablation columns {list(raw)}")
        rows.append({k: (float(v) if k in METRIC_COLUMNS else v) for k, v in raw.items()})
    return rows
