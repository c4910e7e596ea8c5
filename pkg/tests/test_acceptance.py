"""Acceptance criteria 1-9.

Each criterion is one test that records a ``criterion N: PASS|FAIL`` line;
the lines are printed in the pytest terminal summary and when this file is
run as a script (``python tests/test_acceptance.py``).

Criteria 7 and 8 need twelve full training runs on the default synthetic
benchmark (about 20 minutes each on one core).  Their measurements are
stored under ``.acceptance-cache/`` keyed by a hash of the package sources
and the run configuration, so a rerun on unchanged code reuses the
numbers and any code change invalidates them.  ``--populate`` fills the
cache without running the rest of the suite.
"""
from __future__ import annotations

import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (  # noqa: E402
    GRAD_TOL,
    c3_scalar,
    gradcheck,
    gradcheck_scalar,
    metrics_scalar,
    predict_mask_scalar,
    tiny_batch,
    tiny_config,
)
from refseg import autodiff as ad  # noqa: E402
from refseg.autodiff import Tensor  # noqa: E402
from refseg.checkpoint import decode_checkpoint, encode_checkpoint  # noqa: E402
from refseg.config import SyntheticSpec, synthetic_run_config  # noqa: E402
from refseg.features import decode_feature_file, encode_feature_file  # noqa: E402
from refseg.inference import Mask, predict_mask  # noqa: E402
from refseg.metrics import EvalRecord, metrics_json  # noqa: E402
from refseg.model import ReferringSegmenter  # noqa: E402
from refseg.objectives import BatchPairs, c3_from_embeddings, c3_loss, recon_loss, total_loss  # noqa: E402
from refseg.synthetic import generate_synthetic  # noqa: E402
from refseg.training import attention_maps, evaluate, score_maps, slot_discovery_iou, train  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".acceptance-cache"
SEEDS = (0, 1, 2)
RESULTS: dict[int, str] = {}

# criterion 7 thresholds (artifact contracts)
MIN_MIOU = 0.55
MIN_RATIO = 3.0
MAX_RUN_SECONDS = 30 * 60
# criterion 8: "near the all-zero floor" for the Min scheme, fixed before any run was scored
MIN_SCHEME_CEILING = 0.05


def record(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(RESULTS[number])
    assert ok, RESULTS[number]


# ---------------------------------------------------------------------------
# 1. Gradient suite
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    from test_autodiff import CASES
    from test_objectives import LOSSES

    start = time.perf_counter()
    worst_op, worst_op_name = 0.0, ""
    for name in sorted(CASES):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            fn, arrays = CASES[name](rng)
            err = gradcheck(fn, arrays, rng)
            if err > worst_op:
                worst_op, worst_op_name = err, name
    worst_loss, probes = {}, 0
    for name, loss in LOSSES.items():
        worst_loss[name] = 0.0
        for seed in range(100):
            model = ReferringSegmenter(tiny_config(seed=seed))
            rng = np.random.default_rng(1000 + seed)
            visual, textual = tiny_batch(rng, model.config)
            with ad.precision("f64"):
                vis = Tensor(visual, requires_grad=True)
                batch = BatchPairs(vis, textual)
                params = dict(model.named_parameters())
                params["<visual>"] = vis
                err, n = gradcheck_scalar(lambda: loss(batch, model, visual), params, rng)
            worst_loss[name] = max(worst_loss[name], err)
            probes += n
    seconds = time.perf_counter() - start
    ok = worst_op < GRAD_TOL and max(worst_loss.values()) < GRAD_TOL and seconds < 300
    losses = ", ".join(f"{k} {v:.1e}" for k, v in worst_loss.items())
    record(1, ok, f"{len(CASES)} ops x 100 seeds worst {worst_op:.1e} ({worst_op_name}); "
                  f"losses x 100 seeds worst {losses} over {probes} probes; {seconds:.0f} s")


# ---------------------------------------------------------------------------
# 2. Normalisation invariants
# ---------------------------------------------------------------------------


def test_criterion_2_normalisation_invariants():
    worst = {"a_slot": 0.0, "a_fuse": 0.0, "z": 0.0, "decoder": 0.0}
    forwards = 0
    for precision in ("f32", "f64"):
        model = ReferringSegmenter(tiny_config(precision=precision, seed=7))
        with ad.precision(precision), ad.no_grad():
            for i in range(500):
                rng = np.random.default_rng(i)
                visual, textual = tiny_batch(rng, model.config, b=2)
                visual *= rng.uniform(0.1, 10.0)
                entities, a_slot = model.discovery(Tensor(visual), i)
                fused = model.fusion(entities, Tensor(textual))
                _, weights = model.decoder(entities)
                worst["a_slot"] = max(worst["a_slot"], np.abs(a_slot.data.sum(-1) - 1).max())
                worst["a_fuse"] = max(worst["a_fuse"], np.abs(fused.a_fuse.data.sum(-1) - 1).max())
                worst["z"] = max(worst["z"], np.abs(np.linalg.norm(fused.z.data.astype(np.float64), axis=-1) - 1).max())
                worst["decoder"] = max(worst["decoder"], np.abs(weights.sum(-2) - 1).max())
                forwards += 1
    ok = all(v <= 1e-6 for v in worst.values())
    record(2, ok, f"{forwards} forwards (f32 and f64); worst deviations "
                  + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ---------------------------------------------------------------------------
# 3. Stop-gradient contract
# ---------------------------------------------------------------------------


def test_criterion_3_stop_gradient():
    nonzero = {}
    for name, fn in {"c3": lambda b, m: c3_loss(b, m, 1), "recon": lambda b, m: recon_loss(b, m, 1),
                     "total": lambda b, m: total_loss(b, m, 1.0, 1)}.items():
        count = 0
        for seed in range(10):
            model = ReferringSegmenter(tiny_config(seed=seed))
            visual, textual = tiny_batch(np.random.default_rng(seed), model.config, b=4)
            with ad.precision("f64"):
                text = Tensor(textual, requires_grad=True)
                ad.backward(fn(BatchPairs(Tensor(visual), text), model))
            count += 0 if text.grad is None else int(np.count_nonzero(text.grad))
        nonzero[name] = count
    # the reconstruction target branch: d/d(target) of ||sg(x) - y||^2 is exactly zero
    with ad.precision("f64"):
        from refseg.objectives import recon_from_decoded

        target = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
        ad.backward(recon_from_decoded(target, Tensor(np.zeros((2, 3, 4)), requires_grad=True)))
    target_nonzero = 0 if target.grad is None else int(np.count_nonzero(target.grad))
    ok = not any(nonzero.values()) and target_nonzero == 0
    record(3, ok, f"nonzero text-gradient entries {nonzero}; recon target branch {target_nonzero}")


# ---------------------------------------------------------------------------
# 4. Loss oracles
# ---------------------------------------------------------------------------


def test_criterion_4_loss_oracles():
    worst = 0.0
    for seed in range(50):
        model = ReferringSegmenter(tiny_config(seed=seed))
        visual, textual = tiny_batch(np.random.default_rng(seed), model.config, b=4)
        with ad.precision("f64"), ad.no_grad():
            entities, _ = model.discovery(Tensor(visual), 3)
            z = model.fusion.fuse_all_pairs(entities, Tensor(textual)).z.data
            got = c3_loss(BatchPairs(visual, textual), model, 3).item()
        worst = max(worst, abs(got - c3_scalar(z, textual)))
    singles = []
    for seed in range(10):
        model = ReferringSegmenter(tiny_config(seed=seed))
        visual, textual = tiny_batch(np.random.default_rng(seed), model.config, b=1)
        with ad.precision("f64"):
            singles.append(c3_loss(BatchPairs(visual, textual), model, 0).item())
    collapsed_exact = True
    with ad.precision("f64"):
        for b in range(2, 33):
            rng = np.random.default_rng(b)
            z = np.broadcast_to(rng.normal(size=6), (b, b, 6)).copy()
            collapsed_exact &= c3_from_embeddings(Tensor(z), Tensor(rng.normal(size=(b, 6)))).item() == math.log(b)
    ok = worst < 1e-6 and all(s == 0.0 for s in singles) and collapsed_exact
    record(4, ok, f"50 B=4 batches max |diff| {worst:.1e}; B=1 values {set(singles)}; "
                  f"collapsed == log B exactly for B=2..32: {collapsed_exact}")


# ---------------------------------------------------------------------------
# 5. Inference oracle
# ---------------------------------------------------------------------------


def test_criterion_5_inference_oracle():
    from test_inference import SCHEMES, random_instance

    rng = np.random.default_rng(2024)
    mismatched = compose_avg = monotone = 0
    taus = np.linspace(0.05, 0.95, 10)
    for _ in range(100):
        a_slot, a_fuse, gh, gw, oh, ow, tau = random_instance(rng)
        for scheme in SCHEMES:
            got = predict_mask(a_slot, a_fuse, gh, gw, oh, ow, tau, scheme).bits
            mismatched += not np.array_equal(got, predict_mask_scalar(a_slot, a_fuse, gh, gw, oh, ow, tau, scheme))
        k = a_slot.shape[1]
        compose_avg += not np.array_equal(
            predict_mask(a_slot, np.full(k, 1.0 / k), gh, gw, oh, ow, tau, "compose").bits,
            predict_mask(a_slot, a_fuse, gh, gw, oh, ow, tau, "avg").bits,
        )
        masks = [predict_mask(a_slot, a_fuse, gh, gw, oh, ow, t).bits for t in taus]
        monotone += any((hi & ~lo).any() for lo, hi in zip(masks, masks[1:]))
    ok = mismatched == compose_avg == monotone == 0
    record(5, ok, f"100 instances x 4 schemes: {mismatched} oracle mismatches, "
                  f"{compose_avg} compose/avg mismatches, {monotone} tau-monotonicity violations")


# ---------------------------------------------------------------------------
# 6. Metric oracle
# ---------------------------------------------------------------------------


def test_criterion_6_metric_oracle():
    from test_metrics import random_pairs

    pairs = random_pairs(np.random.default_rng(77), 50)
    rec = EvalRecord()
    for pred, gt in pairs:
        rec.accumulate(Mask(pred), Mask(gt))
    got, want = rec.finalize(), metrics_scalar(pairs)
    diff = max([abs(got["ciou"] - want["ciou"]), abs(got["miou"] - want["miou"])]
               + [abs(got["acc"][t] - want["acc"][t]) for t in (0.3, 0.5, 0.7)])
    empty = EvalRecord().accumulate(Mask(np.zeros((2, 2))), Mask(np.zeros((2, 2)))).finalize()
    half = np.zeros((1, 4), bool)
    half[0, :2] = True
    inclusive = EvalRecord().accumulate(Mask(half), Mask(np.ones((1, 4), bool))).finalize()["acc"][0.5]
    ok = diff < 1e-9 and empty["miou"] == empty["ciou"] == 1.0 and inclusive == 1.0
    record(6, ok, f"50 pairs max |diff| {diff:.1e}; 0/0 -> {empty['miou']}; IoU 0.5 counts at A@0.5: {inclusive == 1.0}")


# ---------------------------------------------------------------------------
# 7 and 8. Synthetic benchmark runs (cached)
# ---------------------------------------------------------------------------

BENCH_SPEC = SyntheticSpec()  # 24x24, D=64, G=6, <=4 instances, noise 0.05, 2500 items -> 2000/500


def bench_config(seed: int, **changes):
    return synthetic_run_config(seed=seed, eval_every=1000, **changes)


def _source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "refseg").glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _cache_path(config) -> Path:
    key = hashlib.sha256((_source_hash() + config.to_json() + json.dumps(vars(BENCH_SPEC), sort_keys=True)).encode())
    return CACHE / f"{config.slot_kind}-t{config.t_iters}-s{config.seed}-{key.hexdigest()[:16]}.json"


_DATA = {}


def bench_data():
    if not _DATA:
        _DATA["split"] = generate_synthetic(BENCH_SPEC).split(0.8, 0)
    return _DATA["split"]


def bench_run(config) -> dict:
    """Untrained baseline, training, and scored attention maps for one configuration."""
    path = _cache_path(config)
    if path.exists():
        return json.loads(path.read_text())
    train_data, eval_data = bench_data()
    untrained = evaluate(ReferringSegmenter(config), eval_data, config)
    result = train(config, train_data)
    a_slot, a_fuse = attention_maps(result.model, eval_data, config.eval_seed)
    out = {
        "config": json.loads(config.to_json()),
        "seconds": result.seconds,
        "untrained": untrained,
        "slot_iou": slot_discovery_iou(a_slot, eval_data),
        "schemes": {s: score_maps(a_slot, a_fuse, eval_data, config, scheme=s)[0] for s in ("compose", "avg", "max", "min")},
        "tau": {f"{t:g}": score_maps(a_slot, a_fuse, eval_data, config, tau=t)[0]["miou"] for t in (0.3, 0.4, 0.5, 0.6, 0.7)},
        "loss": [{k: h[k] for k in ("epoch", "total", "c3", "recon")} for h in result.history],
    }
    CACHE.mkdir(exist_ok=True)
    path.write_text(json.dumps(out, indent=1, default=str) + "\n")
    return out


VARIANTS = {
    "entity": {},
    "random": {"slot_kind": "random"},
    "query": {"slot_kind": "query"},
    "t1": {"t_iters": 1},
}


def variant_runs(name: str) -> list[dict]:
    return [bench_run(bench_config(seed, **VARIANTS[name])) for seed in SEEDS]


def _mean(runs, fn):
    return float(np.mean([fn(r) for r in runs]))


@pytest.mark.slow
def test_criterion_7_synthetic_learning():
    runs = variant_runs("entity")
    trained = _mean(runs, lambda r: r["schemes"]["compose"]["miou"])
    baseline = _mean(runs, lambda r: r["untrained"]["miou"])
    slowest = max(r["seconds"] for r in runs)
    ok = trained >= MIN_MIOU and trained >= MIN_RATIO * baseline and slowest < MAX_RUN_SECONDS
    record(7, ok, f"trained mIoU {trained:.4f} (seeds {[round(r['schemes']['compose']['miou'], 4) for r in runs]}), "
                  f"untrained {baseline:.4f}, ratio {trained / baseline:.2f}; slot-discovery IoU "
                  f"{_mean(runs, lambda r: r['slot_iou']):.3f}; slowest run {slowest / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_ablation_directions():
    runs = {name: variant_runs(name) for name in VARIANTS}
    miou = {name: _mean(rs, lambda r: r["schemes"]["compose"]["miou"]) for name, rs in runs.items()}
    scheme = {s: _mean(runs["entity"], lambda r, s=s: r["schemes"][s]["miou"]) for s in ("compose", "avg", "max", "min")}
    checks = {
        "entity>=random": miou["entity"] >= miou["random"],
        "entity>=query": miou["entity"] >= miou["query"],
        "compose>avg": scheme["compose"] > scheme["avg"],
        "compose>min": scheme["compose"] > scheme["min"],
        f"min<={MIN_SCHEME_CEILING}": scheme["min"] <= MIN_SCHEME_CEILING,
        "T6>T1": miou["entity"] > miou["t1"],
    }
    failed = [k for k, v in checks.items() if not v]
    record(8, not failed, "mIoU " + ", ".join(f"{k} {v:.4f}" for k, v in miou.items())
           + "; schemes " + ", ".join(f"{k} {v:.4f}" for k, v in scheme.items())
           + (f"; failed {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# 9. Determinism and persistence
# ---------------------------------------------------------------------------


def test_criterion_9_determinism_and_persistence():
    spec = SyntheticSpec(grid_h=6, grid_w=6, feature_dim=16, num_groups=3, num_items=40, min_side=2, max_side=3,
                         patch_px=4, seed=5)
    tr, ev = generate_synthetic(spec).split(0.8, 0)
    config = synthetic_run_config(dim=16, hidden_dim=32, k_g=3, k_s=2, t_iters=3, grid_h=6, grid_w=6, patch_px=4,
                                  batch_size=8, epochs=2, seed=11)
    first = train(config, tr, ev)
    second = train(config, tr, ev)
    json_same = metrics_json(first.history[-1]["eval"]) == metrics_json(second.history[-1]["eval"])
    blob = encode_checkpoint(first.model, first.optimizer)
    ckpt_same = blob == encode_checkpoint(second.model, second.optimizer)
    loaded = decode_checkpoint(blob)
    resave_same = encode_checkpoint(loaded.model, loaded.optimizer) == blob
    a = first.model.attention_maps(ev.visual, ev.textual, 3)
    b = loaded.model.attention_maps(ev.visual, ev.textual, 3)
    forward_same = all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    arr = np.random.default_rng(0).standard_normal((576, 64)).astype(np.float32)
    back, role = decode_feature_file(encode_feature_file(arr, "visual"))
    file_same = back.tobytes() == arr.tobytes() and role == 0
    ok = json_same and ckpt_same and resave_same and forward_same and file_same
    record(9, ok, f"metrics JSON identical {json_same}; checkpoints identical {ckpt_same}; "
                  f"save-load-save identical {resave_same}; forward bit-identical {forward_same}; "
                  f"feature file lossless {file_same}")


# ---------------------------------------------------------------------------


def populate(names) -> None:
    for name in names:
        for seed in SEEDS:
            config = bench_config(seed, **VARIANTS[name])
            start = time.perf_counter()
            out = bench_run(config)
            print(f"{name} seed {seed}: mIoU {out['schemes']['compose']['miou']:.4f} "
                  f"untrained {out['untrained']['miou']:.4f} train {out['seconds'] / 60:.1f} min "
                  f"(wall {(time.perf_counter() - start) / 60:.1f} min)", flush=True)


if __name__ == "__main__":
    if "--populate" in sys.argv:
        populate([n for n in sys.argv[2:]] or list(VARIANTS))
        sys.exit(0)
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
