"""AdamW with cosine annealing, the training loop and held-out evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .config import RunConfig
from .errors import ConfigError, DimensionError, DivergenceError
from .inference import InferenceScheme, Mask, predict_mask
from .metrics import EvalRecord, write_pgm
from .model import ReferringSegmenter
from .objectives import BatchPairs, loss_terms
from .synthetic import SyntheticDataset

log = logging.getLogger(__name__)

EVAL_BATCH = 64


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at step ``total_steps - 1``."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; moments are keyed by parameter name."""

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            data = p.data
            data *= 1.0 - lr * self.weight_decay
            data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def step_seed(run_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([run_seed, step]).generate_state(1)[0])


@dataclass
class TrainResult:
    model: ReferringSegmenter
    optimizer: AdamW
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def check_compatible(config: RunConfig, data) -> None:
    """``data`` is any dataset exposing ``visual``, ``textual``, ``grid`` and ``gt_mask``."""
    grid_h, grid_w, patch_px = data.grid
    if data.visual.shape[2] != config.dim:
        raise ConfigError(f"data feature dim {data.visual.shape[2]} != model dim {config.dim}")
    if (grid_h, grid_w) != (config.grid_h, config.grid_w):
        raise ConfigError(f"data grid {grid_h}x{grid_w} != model grid {config.grid_h}x{config.grid_w}")
    if data.visual.shape[1] != grid_h * grid_w:
        raise ConfigError(f"data has {data.visual.shape[1]} patches, grid is {grid_h}x{grid_w}")
    if patch_px != config.patch_px:
        raise ConfigError(f"data patch size {patch_px} != model patch size {config.patch_px}")


def train(
    config: RunConfig,
    train_data: SyntheticDataset,
    eval_data: SyntheticDataset | None = None,
    model: ReferringSegmenter | None = None,
    optimizer: AdamW | None = None,
) -> TrainResult:
    """Minimise the total loss; returns the trained model and per-epoch history."""
    config.validate()
    if len(train_data) == 0:
        raise ConfigError("training set is empty")
    check_compatible(config, train_data)
    model = model or ReferringSegmenter(config)
    params = model.named_parameters()
    optimizer = optimizer or AdamW(params, config.lr, config.betas, config.adam_eps, config.weight_decay)
    n = len(train_data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    history = []
    start = time.perf_counter()
    with ad.precision(config.precision), ad.check_finite(False):
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            sums = {"total": 0.0, "c3": 0.0, "recon": 0.0}
            for b in range(steps_per_epoch):
                idx = np.sort(order[b * config.batch_size : (b + 1) * config.batch_size])
                step = optimizer.step_count
                batch = BatchPairs(train_data.visual[idx], train_data.textual[idx])
                terms = loss_terms(batch, model, step_seed(config.seed, step), config.lambda_recon)
                value = terms.total.item()
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss {value} at epoch {epoch}, batch {b} (items {idx.tolist()})",
                        epoch, b, idx.tolist(),
                    )
                optimizer.zero_grad()
                terms.total.backward()
                for name, p in params.items():
                    if p.grad is not None and not np.isfinite(p.grad).all():
                        raise DivergenceError(
                            f"non-finite gradient for {name} at epoch {epoch}, batch {b} (items {idx.tolist()})",
                            epoch, b, idx.tolist(),
                        )
                optimizer.step(cosine_lr(step, total_steps, config.lr))
                sums["total"] += value * len(idx)
                sums["c3"] += terms.c3.item() * len(idx)
                sums["recon"] += terms.recon.item() * len(idx)
            entry = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
            entry["lr"] = cosine_lr(optimizer.step_count - 1, total_steps, config.lr)
            if eval_data is not None and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
                entry["eval"] = evaluate(model, eval_data, config)
            entry["seconds"] = time.perf_counter() - start
            log.info("epoch %d loss %.4f c3 %.4f recon %.4f", epoch + 1, entry["total"], entry["c3"], entry["recon"])
            history.append(entry)
    return TrainResult(model, optimizer, history, time.perf_counter() - start)


def attention_maps(model: ReferringSegmenter, data: SyntheticDataset, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """A_slot ``(M, N, K)`` and A_fuse ``(M, K)`` for every item, in fixed-size chunks."""
    slots, fuses = [], []
    with ad.precision(model.config.precision):
        for start in range(0, len(data), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            a_slot, a_fuse = model.attention_maps(data.visual[sl], data.textual[sl], step_seed(seed, start))
            slots.append(a_slot)
            fuses.append(a_fuse)
    return np.concatenate(slots), np.concatenate(fuses)


def score_maps(
    a_slot: np.ndarray,
    a_fuse: np.ndarray,
    data: SyntheticDataset,
    config: RunConfig,
    tau: float | None = None,
    scheme: str | None = None,
    export_dir: str | Path | None = None,
) -> tuple[dict, EvalRecord]:
    tau = config.tau if tau is None else tau
    scheme = InferenceScheme(config.scheme if scheme is None else scheme)
    rec = EvalRecord()
    if export_dir is not None:
        Path(export_dir).mkdir(parents=True, exist_ok=True)
    for i in range(len(data)):
        pred = predict_mask(
            a_slot[i], a_fuse[i], config.grid_h, config.grid_w, config.image_h, config.image_w, tau, scheme
        )
        gt = Mask(data.gt_mask(i))
        rec.accumulate(pred, gt)
        if export_dir is not None:
            write_pgm(Path(export_dir) / f"pred_{i:05d}.pgm", pred)
            write_pgm(Path(export_dir) / f"gt_{i:05d}.pgm", gt)
    return rec.finalize(), rec


def evaluate(
    model: ReferringSegmenter,
    data: SyntheticDataset,
    config: RunConfig | None = None,
    tau: float | None = None,
    scheme: str | None = None,
    export_dir: str | Path | None = None,
) -> dict:
    """discover -> fuse -> predict_mask -> accumulate -> finalize with the fixed eval seed."""
    config = config or model.config
    check_compatible(model.config, data)
    a_slot, a_fuse = attention_maps(model, data, config.eval_seed)
    metrics, _ = score_maps(a_slot, a_fuse, data, config, tau, scheme, export_dir)
    return metrics


def slot_discovery_iou(a_slot: np.ndarray, data: SyntheticDataset) -> float:
    """Mean IoU between planted instances and their best-matching slots.

    Each patch is assigned to its arg-max slot; slots and instances are
    matched one-to-one by maximum total IoU.
    """
    h, w = data.spec.grid_h, data.spec.grid_w
    if a_slot.shape[:2] != (len(data), h * w):
        raise DimensionError("attention maps do not match the dataset")
    scores = []
    for i in range(len(data)):
        owner = a_slot[i].argmax(axis=1).reshape(h, w)
        slot_masks = owner[None] == np.arange(a_slot.shape[2])[:, None, None]
        inst = data.instance_masks(i)
        inter = np.einsum("ihw,khw->ik", inst.astype(np.int64), slot_masks.astype(np.int64))
        union = inst.sum(axis=(1, 2))[:, None] + slot_masks.sum(axis=(1, 2))[None, :] - inter
        ious = inter / np.maximum(union, 1)
        rows, cols = linear_sum_assignment(-ious)
        scores.append(ious[rows, cols].mean())
    return float(np.mean(scores))
